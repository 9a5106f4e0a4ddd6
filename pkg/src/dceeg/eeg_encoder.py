"""Convolutional self-attention EEG encoder.

A 1-s multichannel window [B, E, L] passes a two-stage convolutional
front-end (a temporal filter bank shared across electrodes, then a
pointwise electrode mix) producing ceil(L/stride) tokens of ``model_dim``.
Stacked pre-norm blocks of multi-head self-attention and a 4x feed-forward
follow, each with residual connections, dropout, and per-block learnable
prompt tokens. Mean pooling over the (prompt-stripped) token stream and a
linear map yield the shared-latent feature; the compact student variant
appends one extra projection layer.

Token order carries no positional code: the front-end already localizes
temporal structure and the downstream objective is per-window
classification, so attention stays permutation-equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .layers import DropoutCtx, EVAL_CTX


@dataclass
class ConformerConfig:
    num_layers: int = 8
    num_heads: int = 10
    model_dim: int = 40
    ffn_expansion: int = 4
    dropout: float = 0.3
    conv_kernel: int = 31
    conv_stride: int = 4
    temporal_filters: int = 8
    prompt_count_per_layer: int = 4
    latent_dim: int = 32
    electrodes: int = 19
    window_samples: int = 256
    student_projection: bool = False

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} must divide by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.prompt_count_per_layer < 0:
            raise ValueError("prompt_count_per_layer must be >= 0")

    @property
    def num_tokens(self) -> int:
        return -(-self.window_samples // self.conv_stride)

    def student_of(self, num_layers: int = 4, conv_stride: int = 8) -> "ConformerConfig":
        """Derive the compact-student config: fewer blocks, a coarser
        front-end stride, and the extra projection layer."""
        return replace(self, num_layers=num_layers, conv_stride=conv_stride,
                       student_projection=True)


class EegEncoder:
    def __init__(self, config: ConformerConfig, params: dict[str, Tensor], prefix: str):
        self.config = config
        self.params = params
        self.prefix = prefix

    @classmethod
    def build(cls, config: ConformerConfig, rng: np.random.Generator,
              dtype=np.float32, prefix: str = "eeg_encoder",
              prompts_enabled: bool = True) -> "EegEncoder":
        c = config
        params: dict[str, Tensor] = {}
        params[f"{prefix}/front/temporal/W"] = Tensor(
            ad.trunc_normal((c.temporal_filters, 1, c.conv_kernel), layers.INIT_STD, rng, dtype),
            requires_grad=True, name=f"{prefix}/front/temporal/W")
        params[f"{prefix}/front/temporal/b"] = Tensor(
            np.zeros(c.temporal_filters, dtype=dtype), requires_grad=True,
            name=f"{prefix}/front/temporal/b")
        params[f"{prefix}/front/spatial/W"] = Tensor(
            ad.trunc_normal((c.model_dim, c.electrodes * c.temporal_filters, 1),
                            layers.INIT_STD, rng, dtype),
            requires_grad=True, name=f"{prefix}/front/spatial/W")
        params[f"{prefix}/front/spatial/b"] = Tensor(
            np.zeros(c.model_dim, dtype=dtype), requires_grad=True,
            name=f"{prefix}/front/spatial/b")
        n_prompt = c.prompt_count_per_layer if prompts_enabled else 0
        for i in range(c.num_layers):
            layers.init_block(params, f"{prefix}/block{i}", c.model_dim,
                              c.ffn_expansion, n_prompt, rng, dtype)
        layers.init_layer_norm(params, f"{prefix}/ln_final", c.model_dim, dtype)
        layers.init_linear(params, f"{prefix}/latent", c.model_dim, c.latent_dim, rng, dtype)
        if c.student_projection:
            layers.init_linear(params, f"{prefix}/proj", c.latent_dim, c.latent_dim, rng, dtype)
        return cls(config, params, prefix)

    def forward(self, x, ctx: DropoutCtx = EVAL_CTX,
                intermediates: dict | None = None) -> Tensor:
        """Encode [B, E, L] windows to [B, latent_dim] features."""
        c, p, pre = self.config, self.params, self.prefix
        x = ad.as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != c.electrodes or x.shape[2] != c.window_samples:
            raise ad.ShapeError(
                f"{pre}: expected input [B, {c.electrodes}, {c.window_samples}], got {x.shape}")
        b = x.shape[0]

        flat = ad.reshape(x, (b * c.electrodes, 1, c.window_samples))
        t = ad.conv1d(flat, p[f"{pre}/front/temporal/W"], p[f"{pre}/front/temporal/b"],
                      stride=c.conv_stride, padding=c.conv_kernel // 2,
                      name=f"{pre}/front/temporal")
        t = ad.gelu(t)
        n_tok = t.shape[2]
        t = ad.reshape(t, (b, c.electrodes * c.temporal_filters, n_tok))
        t = ad.conv1d(t, p[f"{pre}/front/spatial/W"], p[f"{pre}/front/spatial/b"],
                      name=f"{pre}/front/spatial")
        tokens = ad.transpose(ad.gelu(t), (0, 2, 1))

        for i in range(c.num_layers):
            tokens = layers.block_forward(tokens, p, f"{pre}/block{i}", c.num_heads,
                                          dropout_rate=c.dropout, attn_dropout=c.dropout,
                                          ctx=ctx)
        tokens = layers.apply_layer_norm(tokens, p, f"{pre}/ln_final")
        if intermediates is not None:
            intermediates["tokens"] = tokens
        pooled = ad.tmean(tokens, axis=1, name=f"{pre}/pool")
        feat = layers.linear(pooled, p, f"{pre}/latent")
        if c.student_projection:
            feat = layers.linear(feat, p, f"{pre}/proj")
        if intermediates is not None:
            intermediates["feature"] = feat
        return feat


def count_params(config: ConformerConfig, prompts_enabled: bool = True) -> int:
    """Trainable-parameter count from the analytic shape formula; must match
    enumeration of the instantiated tensors exactly."""
    c = config
    total = c.temporal_filters * c.conv_kernel + c.temporal_filters
    total += c.model_dim * (c.electrodes * c.temporal_filters) + c.model_dim
    n_prompt = c.prompt_count_per_layer if prompts_enabled else 0
    total += c.num_layers * layers.block_param_count(c.model_dim, c.ffn_expansion, n_prompt)
    total += 2 * c.model_dim
    total += c.model_dim * c.latent_dim + c.latent_dim
    if c.student_projection:
        total += c.latent_dim * c.latent_dim + c.latent_dim
    return total


@dataclass
class FlopsEntry:
    layer: str
    flops: int
    cumulative: int


def count_flops(config: ConformerConfig, batch_size: int) -> list[FlopsEntry]:
    """Multiply-accumulate cost (2 FLOPs per MAC) of conv, attention (QKV,
    scores, context, output), feed-forward and projection stages, reported
    per layer with a running total for cumulative-cost plots."""
    c = config
    b = batch_size
    n_tok = c.num_tokens
    s = n_tok + c.prompt_count_per_layer
    d = c.model_dim
    entries: list[FlopsEntry] = []

    def push(name: str, macs: int) -> None:
        flops = 2 * macs
        cum = entries[-1].cumulative + flops if entries else flops
        entries.append(FlopsEntry(name, flops, cum))

    push("front/temporal", b * c.electrodes * n_tok * c.temporal_filters * c.conv_kernel)
    push("front/spatial", b * n_tok * (c.electrodes * c.temporal_filters) * d)
    for i in range(c.num_layers):
        qkvo = 4 * b * s * d * d
        attn = 2 * b * s * s * d
        ffn = 2 * b * s * d * (c.ffn_expansion * d)
        push(f"block{i}", qkvo + attn + ffn)
    push("latent", b * d * c.latent_dim)
    if c.student_projection:
        push("proj", b * c.latent_dim * c.latent_dim)
    return entries


def total_flops(config: ConformerConfig, batch_size: int) -> int:
    return count_flops(config, batch_size)[-1].cumulative


def flops_dominated(teacher: ConformerConfig, student: ConformerConfig,
                    batch_size: int) -> bool:
    """True when the student's cumulative FLOPs stay strictly below the
    teacher's at every depth of the student's series."""
    t_series = count_flops(teacher, batch_size)
    s_series = count_flops(student, batch_size)
    return all(s.cumulative < t.cumulative
               for s, t in zip(s_series, t_series))
