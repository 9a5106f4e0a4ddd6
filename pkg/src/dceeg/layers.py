"""Shared transformer building blocks for the EEG and text encoders.

Parameters live in a flat ``dict[str, Tensor]`` keyed by '/'-separated
names; both encoders namespace into it. Blocks are pre-norm: with the
attention and feed-forward output projections zeroed, a block is exactly
the identity on its token stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


@dataclass
class DropoutCtx:
    """Carries the (seed, step) pair that keys every dropout site."""
    seed: int = 0
    step: int = 0
    train: bool = False


EVAL_CTX = DropoutCtx(train=False)


def init_linear(params: dict, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator, dtype) -> None:
    params[f"{prefix}/W"] = Tensor(ad.trunc_normal((d_in, d_out), INIT_STD, rng, dtype),
                                   requires_grad=True, name=f"{prefix}/W")
    params[f"{prefix}/b"] = Tensor(np.zeros(d_out, dtype=dtype),
                                   requires_grad=True, name=f"{prefix}/b")


def init_layer_norm(params: dict, prefix: str, d: int, dtype) -> None:
    params[f"{prefix}/gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True,
                                      name=f"{prefix}/gain")
    params[f"{prefix}/bias"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True,
                                      name=f"{prefix}/bias")


def linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}/W"]), params[f"{prefix}/b"], name=prefix)


def apply_layer_norm(x: Tensor, params: dict, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}/gain"], params[f"{prefix}/bias"], name=prefix)


def init_attention(params: dict, prefix: str, d: int, rng, dtype) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}/{proj}", d, d, rng, dtype)


def self_attention(x: Tensor, params: dict, prefix: str, num_heads: int,
                   mask: np.ndarray | None = None, attn_dropout: float = 0.0,
                   ctx: DropoutCtx = EVAL_CTX) -> Tensor:
    """Bidirectional multi-head self-attention over [B, S, D].

    ``mask`` is an additive [B, 1, 1, S] bias; masked-out key positions carry
    a large negative value so their post-softmax weight underflows to zero.
    """
    b, s, d = x.shape
    if d % num_heads:
        raise ad.ShapeError(f"{prefix}: model dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, s, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, params, f"{prefix}/q"))
    k = split_heads(linear(x, params, f"{prefix}/k"))
    v = split_heads(linear(x, params, f"{prefix}/v"))

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask.astype(x.dtype)))
    weights = ad.softmax(scores, axis=-1, name=f"{prefix}/weights")
    weights = ad.dropout(weights, attn_dropout, ctx.train, ctx.seed,
                         f"{prefix}/attn_drop", ctx.step)
    ctx_heads = ad.matmul(weights, v)
    merged = ad.reshape(ad.transpose(ctx_heads, (0, 2, 1, 3)), (b, s, d))
    return linear(merged, params, f"{prefix}/o")


def init_ffn(params: dict, prefix: str, d: int, expansion: int, rng, dtype) -> None:
    init_linear(params, f"{prefix}/up", d, d * expansion, rng, dtype)
    init_linear(params, f"{prefix}/down", d * expansion, d, rng, dtype)


def feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    return linear(ad.gelu(linear(x, params, f"{prefix}/up")), params, f"{prefix}/down")


def init_block(params: dict, prefix: str, d: int, expansion: int,
               prompt_count: int, rng, dtype) -> None:
    init_layer_norm(params, f"{prefix}/ln_attn", d, dtype)
    init_attention(params, f"{prefix}/attn", d, rng, dtype)
    init_layer_norm(params, f"{prefix}/ln_ffn", d, dtype)
    init_ffn(params, f"{prefix}/ffn", d, expansion, rng, dtype)
    if prompt_count > 0:
        params[f"{prefix}/prompts"] = Tensor(
            ad.trunc_normal((prompt_count, d), INIT_STD, rng, dtype),
            requires_grad=True, name=f"{prefix}/prompts")


def block_forward(x: Tensor, params: dict, prefix: str, num_heads: int,
                  dropout_rate: float, attn_dropout: float,
                  mask: np.ndarray | None = None, ctx: DropoutCtx = EVAL_CTX,
                  frozen_prompts: Tensor | None = None) -> Tensor:
    """One pre-norm block. Prompt tokens (learnable per-block, or a frozen
    bank shared across blocks) are prepended for the duration of the block
    and stripped again before the residual stream is returned."""
    b, s, _ = x.shape
    prompts = frozen_prompts if frozen_prompts is not None else params.get(f"{prefix}/prompts")
    n_prompt = 0
    if prompts is not None:
        n_prompt = prompts.shape[0]
        tiled = ad.broadcast_batch(prompts, b, name=f"{prefix}/prompt_tile")
        x = ad.concat([tiled, x], axis=1, name=f"{prefix}/prompt_cat")
        if mask is not None:
            keep = np.zeros(mask.shape[:-1] + (n_prompt,), dtype=mask.dtype)
            mask = np.concatenate([keep, mask], axis=-1)

    attn_in = apply_layer_norm(x, params, f"{prefix}/ln_attn")
    attn_out = self_attention(attn_in, params, f"{prefix}/attn", num_heads,
                              mask=mask, attn_dropout=attn_dropout, ctx=ctx)
    attn_out = ad.dropout(attn_out, dropout_rate, ctx.train, ctx.seed,
                          f"{prefix}/drop_attn", ctx.step)
    x = ad.add(x, attn_out)

    ffn_out = feed_forward(apply_layer_norm(x, params, f"{prefix}/ln_ffn"), params, f"{prefix}/ffn")
    ffn_out = ad.dropout(ffn_out, dropout_rate, ctx.train, ctx.seed,
                         f"{prefix}/drop_ffn", ctx.step)
    x = ad.add(x, ffn_out)

    if n_prompt:
        x = ad.narrow(x, 1, n_prompt, s, name=f"{prefix}/prompt_strip")
    return x


def block_param_count(d: int, expansion: int, prompt_count: int) -> int:
    """Analytic per-block parameter count matching init_block."""
    attn = 4 * (d * d + d)
    ffn = (d * d * expansion + d * expansion) + (d * expansion * d + d)
    norms = 4 * d
    return attn + ffn + norms + prompt_count * d


def parameter_manifest(params: dict[str, Tensor]) -> list[tuple[str, tuple[int, ...], bool]]:
    """Sorted (name, shape, trainable) triples for audits and ablation diffs."""
    return [(name, tuple(t.shape), bool(t.requires_grad)) for name, t in sorted(params.items())]


def trainable_count(params: dict[str, Tensor]) -> int:
    return sum(int(np.prod(t.shape)) for t in params.values() if t.requires_grad)
