"""Teacher training: joint contrastive alignment plus classification.

Per batch, both encoders run, features are L2-normalized to V (EEG rows)
and U (one row per class prompt), and a learnable positive scale sigma
turns cosine similarities into logits l_eeg = sigma*V@U^T and its exact
transpose l_txt. The contrastive term averages cross-entropy over the
class axis of both logit views; the classification term is cross-entropy
of a linear head on V; the total mixes them with weight alpha. One Adam
step updates both encoders, the prompts, the head, and sigma.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .eeg_encoder import ConformerConfig, EegEncoder
from .layers import DropoutCtx, EVAL_CTX
from .presets import default_templates
from .text_encoder import (HANDCRAFTED_PREFIX, PromptTemplateSet, TextEncoder,
                           TextEncoderConfig, Vocabulary, build_prompts, tokenize)


class TrainError(Exception):
    pass


@dataclass
class TrainRunConfig:
    epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-5
    alpha: float = 0.5
    sigma_init: float = 1.0 / 0.07
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    contrastive_targets: str = "class"        # "class" or "in_batch"
    early_stop_accuracy: float | None = None
    early_stop_patience: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.sigma_init <= 0:
            raise ValueError("sigma_init must be positive (sigma = exp(logit_scale))")
        if self.contrastive_targets not in ("class", "in_batch"):
            raise ValueError(f"unknown contrastive_targets {self.contrastive_targets!r}")


@dataclass
class ClipBatchState:
    V: Tensor
    U: Tensor
    sigma: Tensor
    l_eeg: Tensor
    l_txt: Tensor
    cls_logits: Tensor
    alpha: float
    contrastive_idx: np.ndarray
    txt_ce_axis: int = 0       # class-prompt mode softmaxes l_txt over classes;
                               # in-batch pairing softmaxes it over items
    L1: Tensor | None = None
    L2: Tensor | None = None
    L_total: Tensor | None = None


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "split": self.split,
                           "loss": self.loss, "accuracy": self.accuracy})


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = 1) -> Tensor:
    """Mean negative log-likelihood; softmax normalization runs along ``axis``."""
    logp = ad.log_softmax(logits, axis=axis)
    picked = ad.gather_index(logp, np.asarray(targets, dtype=np.int64), axis=axis)
    return ad.scale(ad.tmean(picked), -1.0)


def clip_losses(state: ClipBatchState, targets: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """L1 = mean of the two contrastive cross-entropies, L2 = classifier
    cross-entropy, total = alpha*L1 + (1-alpha)*L2."""
    targets = np.asarray(targets, dtype=np.int64)
    n_rows = state.l_eeg.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= state.cls_logits.shape[1]):
        raise TrainError(f"target index out of range [0, {state.cls_logits.shape[1]})")
    if state.contrastive_idx.max(initial=0) >= n_rows:
        raise TrainError(f"contrastive index out of range [0, {n_rows})")
    ce_eeg = cross_entropy(state.l_eeg, state.contrastive_idx, axis=1)
    ce_txt = cross_entropy(state.l_txt, state.contrastive_idx, axis=state.txt_ce_axis)
    l1 = ad.scale(ad.add(ce_eeg, ce_txt), 0.5, name="L1")
    l2 = cross_entropy(state.cls_logits, targets, axis=1)
    total = ad.add(ad.scale(l1, state.alpha), ad.scale(l2, 1.0 - state.alpha), name="L_total")
    state.L1, state.L2, state.L_total = l1, l2, total
    return l1, l2, total


class TeacherModel:
    """Both encoders plus the logit scale and classifier head, with the
    per-class prompt token ids baked in."""

    def __init__(self, eeg: EegEncoder, text: TextEncoder, vocab: Vocabulary,
                 class_names: list[str], prompts: dict[str, str],
                 prompt_ids: np.ndarray, extra: dict[str, Tensor],
                 run_cfg: TrainRunConfig, eeg_prompts_enabled: bool):
        self.eeg = eeg
        self.text = text
        self.vocab = vocab
        self.class_names = class_names
        self.prompts = prompts
        self.prompt_ids = prompt_ids
        self.extra = extra
        self.run_cfg = run_cfg
        self.eeg_prompts_enabled = eeg_prompts_enabled

    @classmethod
    def build(cls, class_names: list[str], eeg_cfg: ConformerConfig,
              text_cfg: TextEncoderConfig, run_cfg: TrainRunConfig,
              templates: PromptTemplateSet | None = None,
              eeg_prompts: bool = True) -> "TeacherModel":
        dtype = ad.resolve_dtype(run_cfg.precision)
        rng = np.random.default_rng(run_cfg.seed)
        templates = templates or default_templates(class_names)
        prompts = build_prompts(class_names, templates)
        vocab = Vocabulary.build(list(prompts.values()) + [HANDCRAFTED_PREFIX])
        prompt_ids = np.stack([tokenize(prompts[c], vocab, text_cfg.max_seq_len)
                               for c in class_names])

        eeg = EegEncoder.build(eeg_cfg, rng, dtype, prefix="eeg_encoder",
                               prompts_enabled=eeg_prompts)
        text = TextEncoder.build(text_cfg, vocab, rng, dtype, prefix="text_encoder")
        if eeg_cfg.latent_dim != text_cfg.latent_dim:
            raise TrainError(f"latent width mismatch: eeg {eeg_cfg.latent_dim} vs "
                             f"text {text_cfg.latent_dim}")

        extra: dict[str, Tensor] = {}
        extra["clip/log_sigma"] = Tensor(np.asarray(math.log(run_cfg.sigma_init), dtype=dtype),
                                         requires_grad=True, name="clip/log_sigma")
        layers.init_linear(extra, "clip/classifier", eeg_cfg.latent_dim,
                           len(class_names), rng, dtype)
        return cls(eeg, text, vocab, class_names, prompts, prompt_ids, extra,
                   run_cfg, eeg_prompts)

    def params(self) -> dict[str, Tensor]:
        return {**self.eeg.params, **self.text.params, **self.extra}

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params().items() if t.requires_grad}

    def sigma(self) -> Tensor:
        return ad.exp(self.extra["clip/log_sigma"], name="sigma")

    def class_text_features(self, ctx: DropoutCtx = EVAL_CTX) -> Tensor:
        return ad.l2_normalize(self.text.forward(self.prompt_ids, ctx), axis=1, name="U")

    def forward_batch(self, x: np.ndarray, y: np.ndarray,
                      ctx: DropoutCtx = EVAL_CTX) -> ClipBatchState:
        y = np.asarray(y, dtype=np.int64)
        v = ad.l2_normalize(self.eeg.forward(x, ctx), axis=1, name="V")
        if self.run_cfg.contrastive_targets == "in_batch":
            ids = self.prompt_ids[y]
            u = ad.l2_normalize(self.text.forward(ids, ctx), axis=1, name="U")
            contrastive_idx = np.arange(len(y), dtype=np.int64)
            txt_ce_axis = 1
        else:
            u = self.class_text_features(ctx)
            contrastive_idx = y
            txt_ce_axis = 0
        sigma = self.sigma()
        sim = ad.matmul(v, ad.transpose(u), name="similarity")
        l_eeg = ad.mul(sim, sigma, name="l_eeg")
        l_txt = ad.transpose(l_eeg, name="l_txt")
        cls_logits = layers.linear(v, self.extra, "clip/classifier")
        return ClipBatchState(V=v, U=u, sigma=sigma, l_eeg=l_eeg, l_txt=l_txt,
                              cls_logits=cls_logits, alpha=self.run_cfg.alpha,
                              contrastive_idx=contrastive_idx, txt_ce_axis=txt_ce_axis)

    # -- persistence --------------------------------------------------------

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        save_tensors(prefix.with_suffix(".ckpt"),
                     {k: t.data for k, t in self.params().items()})
        meta = {
            "kind": "teacher",
            "class_names": self.class_names,
            "prompts": self.prompts,
            "vocab_tokens": self.vocab.tokens,
            "eeg_config": asdict(self.eeg.config),
            "text_config": asdict(self.text.config),
            "run_config": asdict(self.run_cfg),
            "eeg_prompts_enabled": self.eeg_prompts_enabled,
        }
        prefix.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, prefix) -> "TeacherModel":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".meta.json").read_text())
        if meta.get("kind") != "teacher":
            raise TrainError(f"{prefix}: not a teacher checkpoint")
        run_cfg = TrainRunConfig(**meta["run_config"])
        model = cls.build(meta["class_names"], ConformerConfig(**meta["eeg_config"]),
                          TextEncoderConfig(**meta["text_config"]), run_cfg,
                          eeg_prompts=meta["eeg_prompts_enabled"])
        stored = load_tensors(prefix.with_suffix(".ckpt"))
        params = model.params()
        if set(stored) != set(params):
            missing = set(params) ^ set(stored)
            raise TrainError(f"checkpoint/config mismatch, differing tensors: {sorted(missing)[:6]}")
        for name, arr in stored.items():
            if params[name].data.shape != arr.shape:
                raise TrainError(f"checkpoint shape mismatch for {name}: "
                                 f"{arr.shape} vs {params[name].data.shape}")
            params[name].data = arr.astype(params[name].data.dtype)
        return model


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_teacher(data: np.ndarray, labels: np.ndarray, class_names: list[str],
                  eeg_cfg: ConformerConfig, text_cfg: TextEncoderConfig,
                  run_cfg: TrainRunConfig,
                  templates: PromptTemplateSet | None = None,
                  eeg_prompts: bool = True,
                  curve_path=None) -> tuple[TeacherModel, list[EpochStats]]:
    """Run the full teacher loop; deterministic per seed and precision."""
    if len(data) == 0:
        raise TrainError("empty dataset")
    model = TeacherModel.build(class_names, eeg_cfg, text_cfg, run_cfg,
                               templates=templates, eeg_prompts=eeg_prompts)
    curves = fit(model, data, labels, run_cfg, curve_path=curve_path)
    return model, curves


def fit(model: TeacherModel, data: np.ndarray, labels: np.ndarray,
        run_cfg: TrainRunConfig, curve_path=None) -> list[EpochStats]:
    dtype = ad.resolve_dtype(run_cfg.precision)
    data = np.asarray(data, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    params = model.trainable()
    adam = ad.AdamState(lr=run_cfg.lr, weight_decay=run_cfg.weight_decay)
    curves: list[EpochStats] = []
    sink = open(curve_path, "w") if curve_path else None
    step = 0
    streak = 0
    try:
        for epoch in range(run_cfg.epochs):
            rng = np.random.default_rng((run_cfg.seed, epoch, 0xB47C))
            total_loss = 0.0
            total_hit = 0
            for b_idx, batch in enumerate(iterate_batches(len(data), run_cfg.batch_size, rng)):
                ctx = DropoutCtx(seed=run_cfg.seed, step=step, train=True)
                step += 1
                try:
                    state = model.forward_batch(data[batch], labels[batch], ctx)
                    _, _, total = clip_losses(state, labels[batch])
                    ad.zero_grad(params.values())
                    ad.backward(total, params.values())
                    ad.adam_step(params, adam)
                except ad.NonFiniteError as exc:
                    raise TrainError(f"non-finite loss at epoch {epoch} batch {b_idx}: {exc}") from exc
                total_loss += float(total.data) * len(batch)
                total_hit += int((state.cls_logits.data.argmax(axis=1) == labels[batch]).sum())
            stats = EpochStats(epoch, "train", total_loss / len(data), total_hit / len(data))
            curves.append(stats)
            if sink:
                sink.write(stats.to_json() + "\n")
            if run_cfg.early_stop_accuracy is not None:
                streak = streak + 1 if stats.accuracy >= run_cfg.early_stop_accuracy else 0
                if streak >= run_cfg.early_stop_patience:
                    break
    finally:
        if sink:
            sink.close()
    return curves


def predict(model, x: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray | None]:
    """Class probabilities from the classifier head, plus the separate
    zero-shot path (softmax over sigma-scaled text similarities). The zero-
    shot side is None when the model carries no text features."""
    with ad.no_grad():
        try:
            u = model.class_text_features().data
            sigma = float(model.sigma().data)
        except KeyError:
            u, sigma = None, None
        w = model.extra["clip/classifier/W"].data
        b = model.extra["clip/classifier/b"].data
        probs_cls, probs_zero = [], []
        dtype = w.dtype
        for i in range(0, len(x), batch_size):
            v = ad.l2_normalize(self_features(model, x[i:i + batch_size].astype(dtype)), axis=1).data
            probs_cls.append(_softmax_np(v @ w + b))
            if u is not None:
                probs_zero.append(_softmax_np(sigma * (v @ u.T)))
    return np.concatenate(probs_cls), (np.concatenate(probs_zero) if probs_zero else None)


def self_features(model, x: np.ndarray) -> Tensor:
    return model.eeg.forward(x, EVAL_CTX)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
