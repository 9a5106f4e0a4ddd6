"""Prompted bidirectional text encoder.

Word-level tokens feed a learned token+position embedding and a stack of
pre-norm self-attention blocks. Depending on ``prompt_mode``, every block
input receives per-layer learnable prompt vectors, a frozen embedded
natural-language prefix, or nothing; the prompts are stripped again after
each block. The [CLS] state of the final layer projects into the shared
latent space. Padding positions are masked out of attention entirely.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .layers import DropoutCtx, EVAL_CTX

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")

HANDCRAFTED_PREFIX = "a recording of brain electrical activity showing"

_WORD_RE = re.compile(r"[a-z0-9]+")


class TextError(Exception):
    pass


def words(text: str) -> list[str]:
    """Lowercased, punctuation-separated word tokens."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i + len(RESERVED) for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(RESERVED) + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @classmethod
    def build(cls, corpus: list[str]) -> "Vocabulary":
        """Sorted unique words of the corpus; ids are stable across runs."""
        seen = sorted({w for text in corpus for w in words(text)})
        return cls(tokens=seen)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln]
        return cls(tokens=lines)


def tokenize(text: str, vocab: Vocabulary, max_seq_len: int) -> np.ndarray:
    """[CLS]-prefixed id sequence, padded or truncated to exactly max_seq_len."""
    toks = words(text)
    if not toks:
        warnings.warn("tokenizing empty text: sequence is [CLS] plus padding")
    ids = [CLS] + [vocab.id_of(t) for t in toks[:max_seq_len - 1]]
    ids += [PAD] * (max_seq_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class PromptTemplateSet:
    """Per-class template strings with a ``{}`` slot for the class phrase."""
    templates: dict[str, str]
    phrases: dict[str, str] = field(default_factory=dict)

    def save(self, path) -> None:
        lines = [f"template.{k}={v}" for k, v in sorted(self.templates.items())]
        lines += [f"phrase.{k}={v}" for k, v in sorted(self.phrases.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PromptTemplateSet":
        templates, phrases = {}, {}
        for ln in Path(path).read_text().splitlines():
            if not ln.strip() or ln.startswith("#"):
                continue
            key, _, value = ln.partition("=")
            kind, _, label = key.strip().partition(".")
            if kind == "template":
                templates[label] = value.strip()
            elif kind == "phrase":
                phrases[label] = value.strip()
            else:
                raise TextError(f"unknown template-file key {key!r}")
        return cls(templates=templates, phrases=phrases)


def build_prompts(labels: list[str], templates: PromptTemplateSet) -> dict[str, str]:
    """One deterministic description string per class; injective by contract."""
    out: dict[str, str] = {}
    for label in labels:
        if label not in templates.templates:
            raise TextError(f"no prompt template for class {label!r}")
        phrase = templates.phrases.get(label, label.lower())
        out[label] = templates.templates[label].format(phrase)
    seen: dict[str, str] = {}
    for label, text in out.items():
        if text in seen:
            raise TextError(f"prompt collision: classes {seen[text]!r} and {label!r} "
                            f"both map to {text!r}")
        seen[text] = label
    return out


@dataclass
class TextEncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 64
    attention_dropout: float = 0.2
    hidden_dropout: float = 0.2
    prompt_count_per_layer: int = 4
    prompt_mode: str = "learnable"
    max_seq_len: int = 32
    latent_dim: int = 32

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must divide by num_heads {self.num_heads}")
        for r in (self.attention_dropout, self.hidden_dropout):
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout must be in [0, 1), got {r}")
        if self.prompt_mode not in ("learnable", "handcrafted", "none"):
            raise ValueError(f"prompt_mode must be learnable/handcrafted/none, got {self.prompt_mode!r}")


class TextEncoder:
    def __init__(self, config: TextEncoderConfig, vocab: Vocabulary,
                 params: dict[str, Tensor], prefix: str):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.prefix = prefix

    @classmethod
    def build(cls, config: TextEncoderConfig, vocab: Vocabulary,
              rng: np.random.Generator, dtype=np.float32,
              prefix: str = "text_encoder") -> "TextEncoder":
        c = config
        params: dict[str, Tensor] = {}
        params[f"{prefix}/embedding"] = Tensor(
            ad.trunc_normal((len(vocab), c.hidden_dim), layers.INIT_STD, rng, dtype),
            requires_grad=True, name=f"{prefix}/embedding")
        params[f"{prefix}/positions"] = Tensor(
            ad.trunc_normal((c.max_seq_len, c.hidden_dim), layers.INIT_STD, rng, dtype),
            requires_grad=True, name=f"{prefix}/positions")
        n_prompt = c.prompt_count_per_layer if c.prompt_mode == "learnable" else 0
        for i in range(c.num_layers):
            layers.init_block(params, f"{prefix}/block{i}", c.hidden_dim,
                              4, n_prompt, rng, dtype)
        layers.init_layer_norm(params, f"{prefix}/ln_final", c.hidden_dim, dtype)
        layers.init_linear(params, f"{prefix}/latent", c.hidden_dim, c.latent_dim, rng, dtype)
        if c.prompt_mode == "handcrafted":
            ids = [vocab.id_of(w) for w in words(HANDCRAFTED_PREFIX)]
            bank = params[f"{prefix}/embedding"].data[ids].copy()
            params[f"{prefix}/prompt_frozen"] = Tensor(bank, requires_grad=False,
                                                       name=f"{prefix}/prompt_frozen")
        return cls(config, vocab, params, prefix)

    def forward(self, ids: np.ndarray, ctx: DropoutCtx = EVAL_CTX) -> Tensor:
        """Encode [B, S] token ids to [B, latent_dim] features."""
        c, p, pre = self.config, self.params, self.prefix
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != c.max_seq_len:
            raise ad.ShapeError(f"{pre}: expected ids [B, {c.max_seq_len}], got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise ad.ShapeError(f"{pre}: token id out of range [0, {len(self.vocab)})")
        b, s = ids.shape

        emb = ad.embedding(p[f"{pre}/embedding"], ids, name=f"{pre}/embed")
        x = ad.add(emb, p[f"{pre}/positions"], name=f"{pre}/pos")
        x = ad.dropout(x, c.hidden_dropout, ctx.train, ctx.seed, f"{pre}/drop_embed", ctx.step)

        neg = -1e9
        mask = np.where(ids == PAD, neg, 0.0)[:, None, None, :]
        frozen = p.get(f"{pre}/prompt_frozen")
        for i in range(c.num_layers):
            x = layers.block_forward(x, p, f"{pre}/block{i}", c.num_heads,
                                     dropout_rate=c.hidden_dropout,
                                     attn_dropout=c.attention_dropout,
                                     mask=mask, ctx=ctx, frozen_prompts=frozen)
        x = layers.apply_layer_norm(x, p, f"{pre}/ln_final")
        cls_state = ad.reshape(ad.narrow(x, 1, 0, 1, name=f"{pre}/cls"), (b, c.hidden_dim))
        return layers.linear(cls_state, p, f"{pre}/latent")


def count_text_params(config: TextEncoderConfig, vocab_size: int) -> int:
    c = config
    total = vocab_size * c.hidden_dim + c.max_seq_len * c.hidden_dim
    n_prompt = c.prompt_count_per_layer if c.prompt_mode == "learnable" else 0
    total += c.num_layers * layers.block_param_count(c.hidden_dim, 4, n_prompt)
    total += 2 * c.hidden_dim
    total += c.hidden_dim * c.latent_dim + c.latent_dim
    return total
