"""Per-channel activation maps: which electrodes drove the decision.

Default attribution is gradient-times-input: the predicted-class logit is
backpropagated to the input window, the elementwise product with the input
is aggregated over time per channel, and scores are min-max normalized to
[0, 1] per epoch. The alternate 'conv_weight' mode is a cheap forward-only
heuristic weighting each electrode's signal energy by the L1 mass of its
front-end kernel slice.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .layers import EVAL_CTX


def ecam_scores(model, batch: np.ndarray, method: str = "grad_input") -> np.ndarray:
    """[B, E] channel scores in [0, 1], min 0 and max 1 per epoch (degenerate
    all-zero attributions fall back to a flat 0.5 map with a warning)."""
    if method == "grad_input":
        raw = _grad_times_input(model, batch)
    elif method == "conv_weight":
        raw = _conv_weight_energy(model, batch)
    else:
        raise ValueError(f"unknown ecam method {method!r}")

    lo = raw.min(axis=1, keepdims=True)
    hi = raw.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span.reshape(-1) <= 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} epoch(s) produced an all-uniform attribution; "
                      "emitting flat maps")
        span = np.where(span > 0, span, 1.0)
    out = (raw - lo) / span
    out[flat.nonzero()[0]] = 0.5
    return out


def _grad_times_input(model, batch: np.ndarray) -> np.ndarray:
    w = model.extra["clip/classifier/W"]
    b = model.extra["clip/classifier/b"]
    dtype = w.dtype
    x = ad.Tensor(np.asarray(batch, dtype=dtype), requires_grad=True, name="ecam_input")
    v = ad.l2_normalize(model.eeg.forward(x, EVAL_CTX), axis=1)
    logits = ad.add(ad.matmul(v, w), b)
    picked = ad.gather_index(logits, logits.data.argmax(axis=1), axis=1)
    total = ad.tsum(picked)
    ad.backward(total, [x])
    attribution = np.abs(x.grad * x.data).sum(axis=2)
    ad.zero_grad(model.params().values())
    return attribution


def _conv_weight_energy(model, batch: np.ndarray) -> np.ndarray:
    cfg = model.eeg.config
    pre = model.eeg.prefix
    spatial = np.abs(model.eeg.params[f"{pre}/front/spatial/W"].data)  # [D, E*F, 1]
    per_electrode = spatial.reshape(spatial.shape[0], cfg.electrodes,
                                    cfg.temporal_filters).sum(axis=(0, 2))
    energy = np.abs(np.asarray(batch, dtype=np.float64)).mean(axis=2)
    return energy * per_electrode[None, :]


def ecam_rows(model, batch: np.ndarray, channel_names: list[str],
              method: str = "grad_input") -> list[list[str]]:
    """CSV rows: epoch_index, channel, score."""
    scores = ecam_scores(model, batch, method)
    rows = [["epoch_index", "channel", "score"]]
    for i in range(scores.shape[0]):
        for e, name in enumerate(channel_names):
            rows.append([str(i), name, f"{scores[i, e]:.6f}"])
    return rows
