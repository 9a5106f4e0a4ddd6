"""Teacher-to-student knowledge distillation.

The trained teacher runs frozen (gradients blocked); its per-class text
features are computed once and reused. The student is a compact EEG
encoder whose latent features feed the teacher's frozen classifier head;
training mixes hard-label cross-entropy on the raw student logits with a
temperature-softened KL term carrying the compensating t^2 factor:

    total = alpha * CE + (1 - alpha) * t^2 * KL

Only student-namespace tensors are updated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .eeg_encoder import ConformerConfig, EegEncoder
from .layers import DropoutCtx, EVAL_CTX
from .trainer import (EpochStats, TeacherModel, TrainError, cross_entropy,
                      iterate_batches)

KL_EPS = 1e-12


class DistillError(Exception):
    pass


@dataclass
class DistillConfig:
    temperature: float = 1.0
    alpha: float = 0.5
    kl_direction: str = "teacher_ref"        # or "student_ref"
    epochs: int = 100
    reuse_teacher_text: bool = True
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    precision: str = "f32"
    early_stop_accuracy: float | None = None
    early_stop_patience: int = 3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kl_direction not in ("teacher_ref", "student_ref"):
            raise ValueError(f"kl_direction must be teacher_ref or student_ref, "
                             f"got {self.kl_direction!r}")


@dataclass
class SoftenedDistributions:
    P: np.ndarray        # softmax(student logits / t)
    Q: np.ndarray        # softmax(teacher logits / t)
    per_sample_kl: np.ndarray


def _softmax_rows(z: np.ndarray, t: float) -> np.ndarray:
    z = z / t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soften(student_logits: np.ndarray, teacher_logits: np.ndarray,
           temperature: float, direction: str = "teacher_ref") -> SoftenedDistributions:
    p = _softmax_rows(np.asarray(student_logits, dtype=np.float64), temperature)
    q = _softmax_rows(np.asarray(teacher_logits, dtype=np.float64), temperature)
    ref, other = (q, p) if direction == "teacher_ref" else (p, q)
    per = _kl_rows(ref, other)
    return SoftenedDistributions(P=p, Q=q, per_sample_kl=per)


def _kl_rows(ref: np.ndarray, other: np.ndarray) -> np.ndarray:
    # exact zeros in the reference contribute nothing (0*log 0 := 0)
    ratio = np.log(np.maximum(ref, KL_EPS)) - np.log(np.maximum(other, KL_EPS))
    return np.where(ref > 0.0, ref * ratio, 0.0).sum(axis=1)


def kl_divergence(p: np.ndarray, q: np.ndarray, direction: str = "teacher_ref") -> float:
    """Mean over samples of sum_i ref_i * log(ref_i / other_i), with the
    reference distribution picked by ``direction`` (teacher_ref weights the
    log-ratio by Q). Rows must already be probability vectors."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise DistillError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (("P", p), ("Q", q)):
        rows = dist.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-6 or dist.min() < -1e-12:
            raise DistillError(f"{name} rows are not probability vectors "
                               f"(max sum deviation {np.abs(rows - 1.0).max():.2e})")
    ref, other = (q, p) if direction == "teacher_ref" else (p, q)
    return float(_kl_rows(ref, other).mean())


def distill_loss(student_logits: Tensor, teacher_logits, labels: np.ndarray,
                 cfg: DistillConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(L_CE, L_KL, L_total) as graph tensors. CE uses the raw student
    logits; KL compares the t-softened distributions; the total applies the
    alpha mix and the t^2 factor."""
    t = cfg.temperature
    teacher_logits = ad.as_tensor(teacher_logits)
    l_ce = cross_entropy(student_logits, labels, axis=1)

    log_p = ad.log_softmax(student_logits, axis=1, temperature=t)
    log_q = ad.log_softmax(teacher_logits, axis=1, temperature=t)
    if cfg.kl_direction == "teacher_ref":
        q = ad.softmax(teacher_logits, axis=1, temperature=t)
        terms = ad.mul(q, ad.sub(log_q, log_p))
    else:
        p = ad.softmax(student_logits, axis=1, temperature=t)
        terms = ad.mul(p, ad.sub(log_p, log_q))
    l_kl = ad.tmean(ad.tsum(terms, axis=1), name="L_KL")

    total = ad.add(ad.scale(l_ce, cfg.alpha),
                   ad.scale(l_kl, (1.0 - cfg.alpha) * t * t), name="L_distill")
    return l_ce, l_kl, total


class StudentModel:
    """Compact EEG encoder plus the frozen pieces borrowed from its teacher
    (classifier head, logit scale, per-class text features)."""

    def __init__(self, eeg: EegEncoder, class_names: list[str],
                 frozen: dict[str, np.ndarray], cfg: DistillConfig,
                 teacher_meta: dict):
        self.eeg = eeg
        self.class_names = class_names
        self.cfg = cfg
        self.teacher_meta = teacher_meta
        dtype = ad.resolve_dtype(cfg.precision)
        self.extra = {name: Tensor(arr.astype(dtype), requires_grad=False, name=name)
                      for name, arr in frozen.items()}

    def params(self) -> dict[str, Tensor]:
        return {**self.eeg.params, **self.extra}

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.eeg.params.items() if t.requires_grad}

    def sigma(self) -> Tensor:
        return ad.exp(self.extra["clip/log_sigma"])

    def class_text_features(self, ctx: DropoutCtx = EVAL_CTX) -> Tensor:
        return self.extra["clip/text_features"]

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        tensors = {f"student/{k}": t.data for k, t in self.eeg.params.items()}
        tensors.update({k: t.data for k, t in self.extra.items()})
        save_tensors(prefix.with_suffix(".ckpt"), tensors)
        meta = {
            "kind": "student",
            "class_names": self.class_names,
            "eeg_config": asdict(self.eeg.config),
            "distill_config": asdict(self.cfg),
            "teacher_meta": self.teacher_meta,
        }
        prefix.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, prefix) -> "StudentModel":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".meta.json").read_text())
        if meta.get("kind") != "student":
            raise DistillError(f"{prefix}: not a student checkpoint")
        cfg = DistillConfig(**meta["distill_config"])
        eeg_cfg = ConformerConfig(**meta["eeg_config"])
        dtype = ad.resolve_dtype(cfg.precision)
        rng = np.random.default_rng(cfg.seed)
        eeg = EegEncoder.build(eeg_cfg, rng, dtype, prefix="eeg_encoder")
        stored = load_tensors(prefix.with_suffix(".ckpt"))
        frozen = {k: v for k, v in stored.items() if not k.startswith("student/")}
        model = cls(eeg, meta["class_names"], frozen, cfg, meta["teacher_meta"])
        for name, t in eeg.params.items():
            key = f"student/{name}"
            if key not in stored:
                raise DistillError(f"checkpoint missing tensor {key}")
            if stored[key].shape != t.data.shape:
                raise DistillError(f"checkpoint shape mismatch for {key}")
            t.data = stored[key].astype(t.data.dtype)
        return model


def distill(teacher: TeacherModel, student_cfg: ConformerConfig,
            data: np.ndarray, labels: np.ndarray, cfg: DistillConfig,
            curve_path=None) -> tuple[StudentModel, list[EpochStats], list[str]]:
    """Train a student against a frozen teacher; returns the student, the
    per-epoch curves, and the names of every tensor that was updated."""
    if len(data) == 0:
        raise TrainError("empty dataset")
    if student_cfg.latent_dim != teacher.eeg.config.latent_dim:
        raise DistillError(f"student latent width {student_cfg.latent_dim} does not "
                           f"match teacher {teacher.eeg.config.latent_dim} after projection")

    dtype = ad.resolve_dtype(cfg.precision)
    data = np.asarray(data, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)

    with ad.no_grad():
        text_features = teacher.class_text_features().data.copy()
    frozen = {
        "clip/classifier/W": teacher.extra["clip/classifier/W"].data.copy(),
        "clip/classifier/b": teacher.extra["clip/classifier/b"].data.copy(),
        "clip/log_sigma": np.asarray(teacher.extra["clip/log_sigma"].data).copy(),
    }
    if cfg.reuse_teacher_text:
        frozen["clip/text_features"] = text_features

    rng = np.random.default_rng(cfg.seed)
    student_eeg = EegEncoder.build(student_cfg, rng, dtype, prefix="eeg_encoder")
    student = StudentModel(student_eeg, list(teacher.class_names), frozen, cfg,
                           teacher_meta={"eeg_config": asdict(teacher.eeg.config)})

    head_w = student.extra["clip/classifier/W"]
    head_b = student.extra["clip/classifier/b"]

    # the teacher is frozen, so its logits per sample never change: compute once
    teacher_dtype = teacher.extra["clip/classifier/W"].dtype
    teacher_logits_all = np.empty((len(data), len(teacher.class_names)), dtype=dtype)
    with ad.no_grad():
        for i in range(0, len(data), cfg.batch_size):
            chunk = data[i:i + cfg.batch_size].astype(teacher_dtype)
            v_t = ad.l2_normalize(teacher.eeg.forward(chunk), axis=1).data
            teacher_logits_all[i:i + cfg.batch_size] = (
                v_t @ frozen["clip/classifier/W"] + frozen["clip/classifier/b"]).astype(dtype)

    params = student.trainable()
    adam = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curves: list[EpochStats] = []
    sink = open(curve_path, "w") if curve_path else None
    step = 0
    streak = 0
    try:
        for epoch in range(cfg.epochs):
            ep_rng = np.random.default_rng((cfg.seed, epoch, 0xD157))
            total_loss = 0.0
            total_hit = 0
            for b_idx, batch in enumerate(iterate_batches(len(data), cfg.batch_size, ep_rng)):
                x, y = data[batch], labels[batch]
                teacher_logits = teacher_logits_all[batch]
                ctx = DropoutCtx(seed=cfg.seed, step=step, train=True)
                step += 1
                try:
                    v_s = ad.l2_normalize(student.eeg.forward(x, ctx), axis=1)
                    student_logits = ad.add(ad.matmul(v_s, head_w), head_b, name="student_logits")
                    _, _, total = distill_loss(student_logits, teacher_logits, y, cfg)
                    ad.zero_grad(params.values())
                    ad.backward(total, params.values())
                    ad.adam_step(params, adam)
                except ad.NonFiniteError as exc:
                    raise TrainError(f"non-finite loss at epoch {epoch} batch {b_idx}: {exc}") from exc
                total_loss += float(total.data) * len(batch)
                total_hit += int((student_logits.data.argmax(axis=1) == y).sum())
            stats = EpochStats(epoch, "train", total_loss / len(data), total_hit / len(data))
            curves.append(stats)
            if sink:
                sink.write(stats.to_json() + "\n")
            if cfg.early_stop_accuracy is not None:
                streak = streak + 1 if stats.accuracy >= cfg.early_stop_accuracy else 0
                if streak >= cfg.early_stop_patience:
                    break
    finally:
        if sink:
            sink.close()
    updated = sorted(f"student/{k}" for k in params)
    return student, curves, updated


def epochs_to_accuracy(curves: list[EpochStats], threshold: float) -> int | None:
    """First epoch index (1-based count) at which train accuracy reached the
    threshold, or None if it never did."""
    for stats in curves:
        if stats.accuracy >= threshold:
            return stats.epoch + 1
    return None
