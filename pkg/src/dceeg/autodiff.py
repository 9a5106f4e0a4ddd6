"""Minimal reverse-mode autodiff on dense numpy arrays.

Tensors wrap float32/float64 numpy buffers and build an implicit DAG as ops
run; ``backward`` walks it in reverse topological order. The op set is the
small dense vocabulary the encoders and losses need (matmul, conv1d,
layer-norm, softmax with a temperature divisor, dropout, reductions, concat,
L2-normalize, ...). Every op registers a backward rule; the test suite sweeps
the registry against central finite differences.

Determinism contract: given the same seed, precision and inputs, forward and
backward are bit-reproducible. Dropout masks are drawn from a counter-based
stream keyed on (seed, node id, step) so evaluation order cannot change them.
"""
from __future__ import annotations

import itertools
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import erf

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_node_ids = itertools.count()
_finite_checks = True
_grad_enabled = True

REGISTERED_OPS: set[str] = set()


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op result (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording; results come out detached."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def resolve_dtype(precision) -> np.dtype:
    """Map a precision spec ('f32'/'f64' or a numpy dtype) to a numpy dtype."""
    if precision in ("f32", "float32", np.float32):
        return np.dtype(np.float32)
    if precision in ("f64", "float64", np.float64):
        return np.dtype(np.float64)
    raise ValueError(f"unknown precision {precision!r} (expected 'f32' or 'f64')")


class Tensor:
    """Dense value node. Leaf tensors may carry gradients; op results link
    back to their parents through a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "op", "node_id", "name",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def label(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"{self.op}#{self.node_id}{tag}"

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)

    def __repr__(self) -> str:
        return f"Tensor({self.label()}, shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _op(name: str):
    REGISTERED_OPS.add(name)

    def deco(fn):
        return fn

    return deco


def _result(name: str, data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable | None, label: str | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = name
    out.node_id = next(_node_ids)
    out.name = label
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = backward_fn if req else None
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op {out.label()}")
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

@_op("add")
def add(a, b, name: str | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result("add", a.data + b.data, (a, b), bwd, name)


@_op("sub")
def sub(a, b, name: str | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result("sub", a.data - b.data, (a, b), bwd, name)


@_op("mul")
def mul(a, b, name: str | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", a.data * b.data, (a, b), bwd, name)


@_op("scale")
def scale(x, c: float, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def bwd(g):
        _accum(x, g * c)

    return _result("scale", x.data * c, (x,), bwd, name)


@_op("matmul")
def matmul(a, b, name: str | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul needs >=1-d operands: {a.label()} {a.shape} @ {b.label()} {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.label()} {a.shape} @ {b.label()} {b.shape}")

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data[None, :]
        at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data[:, None]
        ga = np.matmul(g, bt) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.matmul(at, g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _result("matmul", np.matmul(a.data, b.data), (a, b), bwd, name)


@_op("transpose")
def transpose(x, axes: Sequence[int] | None = None, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _result("transpose", np.transpose(x.data, axes), (x,), bwd, name)


@_op("reshape")
def reshape(x, shape: Sequence[int], name: str | None = None) -> Tensor:
    x = as_tensor(x)
    orig = x.shape

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _result("reshape", x.data.reshape(tuple(shape)), (x,), bwd, name)


@_op("log")
def log(x, name: str | None = None) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        _accum(x, g / x.data)

    return _result("log", np.log(x.data), (x,), bwd, name)


@_op("exp")
def exp(x, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out_data)

    return _result("exp", out_data, (x,), bwd, name)


@_op("relu")
def relu(x, name: str | None = None) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _result("relu", np.maximum(x.data, 0), (x,), bwd, name)


@_op("gelu")
def gelu(x, name: str | None = None) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf))

    return _result("gelu", x.data * cdf, (x,), bwd, name)


# ---------------------------------------------------------------------------
# reductions and shape surgery
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


@_op("sum")
def tsum(x, axis=None, keepdims: bool = False, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _result("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), bwd, name)


@_op("mean")
def tmean(x, axis=None, keepdims: bool = False, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) or 1

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape) / count)

    return _result("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), bwd, name)


@_op("concat")
def concat(parts: Sequence[Tensor], axis: int = 0, name: str | None = None) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _result("concat", np.concatenate([p.data for p in parts], axis=axis),
                   tuple(parts), bwd, name)


@_op("narrow")
def narrow(x, axis: int, start: int, length: int, name: str | None = None) -> Tensor:
    """Contiguous slice along one axis (used to strip prompt tokens)."""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    idx = tuple(slice(None) if a != axis else slice(start, start + length)
                for a in range(x.data.ndim))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _result("narrow", x.data[idx].copy(), (x,), bwd, name)


@_op("broadcast_batch")
def broadcast_batch(x, batch: int, name: str | None = None) -> Tensor:
    """Tile a tensor along a new leading batch axis (prompt injection)."""
    x = as_tensor(x)

    def bwd(g):
        _accum(x, g.sum(axis=0))

    data = np.broadcast_to(x.data[None], (batch,) + x.shape).copy()
    return _result("broadcast_batch", data, (x,), bwd, name)


@_op("embedding")
def embedding(weight: Tensor, ids: np.ndarray, name: str | None = None) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {weight.shape[0]}) in {weight.label()}")

    def bwd(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))

    return _result("embedding", weight.data[ids], (weight,), bwd, name)


@_op("gather_index")
def gather_index(x, indices: np.ndarray, axis: int, name: str | None = None) -> Tensor:
    """Pick one entry along ``axis`` of a 2-d tensor per position of the
    other axis (the cross-entropy label gather)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_index expects 2-d input, got {x.shape} from {x.label()}")
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % 2
    n = x.shape[1 - axis]
    if idx.shape != (n,):
        raise ShapeError(f"gather_index indices shape {idx.shape} does not match axis size {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather_index target out of range [0, {x.shape[axis]})")
    pos = np.arange(n)
    sel = (idx, pos) if axis == 0 else (pos, idx)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sel] = g
        _accum(x, full)

    return _result("gather_index", x.data[sel].copy(), (x,), bwd, name)


# ---------------------------------------------------------------------------
# normalization / probability ops
# ---------------------------------------------------------------------------

@_op("softmax")
def softmax(x, axis: int = -1, temperature: float = 1.0, name: str | None = None) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    t = float(temperature)
    z = x.data / t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * s / t)

    return _result("softmax", s, (x,), bwd, name)


@_op("log_softmax")
def log_softmax(x, axis: int = -1, temperature: float = 1.0, name: str | None = None) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"log_softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    t = float(temperature)
    z = x.data / t
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    s = np.exp(out_data)

    def bwd(g):
        _accum(x, (g - s * g.sum(axis=axis, keepdims=True)) / t)

    return _result("log_softmax", out_data, (x,), bwd, name)


@_op("layer_norm")
def layer_norm(x, gain, bias, eps: float = 1e-5, name: str | None = None) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be shape ({d},): "
                         f"{gain.label()} {gain.shape}, {bias.label()} {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gx - m1 - xhat * m2) * inv)

    return _result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), bwd, name)


@_op("l2_normalize")
def l2_normalize(x, axis: int = -1, eps: float = 1e-12, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out_data = x.data / norm

    def bwd(g):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        _accum(x, g / norm - x.data * dot / norm ** 3)

    return _result("l2_normalize", out_data, (x,), bwd, name)


# ---------------------------------------------------------------------------
# dropout and convolution
# ---------------------------------------------------------------------------

def dropout_rng(seed: int, node_tag: str, step: int) -> np.random.Generator:
    """Counter-based stream: the mask depends only on (seed, site, step)."""
    return np.random.default_rng((int(seed), int(step), zlib.crc32(node_tag.encode())))


@_op("dropout")
def dropout(x, rate: float, train: bool, seed: int = 0, node_tag: str = "dropout",
            step: int = 0, name: str | None = None) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = 1.0 - float(rate)
    mask = (dropout_rng(seed, node_tag, step).random(x.shape) >= rate) / keep
    mask = mask.astype(x.dtype)

    def bwd(g):
        _accum(x, g * mask)

    return _result("dropout", x.data * mask, (x,), bwd, name or node_tag)


@_op("conv1d")
def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           name: str | None = None) -> Tensor:
    """Cross-correlation over the last axis. x: [B, Cin, L], weight:
    [Cout, Cin, K], output [B, Cout, Lout] with Lout = (L+2p-K)//s + 1."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input/weight: {x.label()} {x.shape}, "
                         f"{weight.label()} {weight.shape}")
    b_, cin, length = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if length + 2 * padding < k:
        raise ShapeError(f"conv1d kernel {k} longer than padded input {length + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lout = (xp.shape[2] - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    cols = windows.transpose(0, 2, 1, 3).reshape(b_, lout, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out_data = np.ascontiguousarray((cols @ wmat.T).transpose(0, 2, 1))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv1d bias must be ({cout},), got {bias.shape}")
        out_data = out_data + bias.data[None, :, None]
        parents.append(bias)

    def bwd(g):
        gt = g.transpose(0, 2, 1)                      # [B, Lout, Cout]
        if bias is not None:
            _accum(bias, gt.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = gt.reshape(-1, cout).T @ cols.reshape(-1, cin * k)
            _accum(weight, gw.reshape(cout, cin, k))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(b_, lout, cin, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            starts = np.arange(lout) * stride
            for kk in range(k):
                np.add.at(gxp, (slice(None), slice(None), starts + kk), gcols[:, :, :, kk])
            _accum(x, gxp[:, :, padding:padding + length] if padding else gxp)

    return _result("conv1d", out_data, tuple(parents), bwd, name)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    ``loss`` must be scalar. Parameters passed in ``params`` that the loss
    never touched come out with an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward target must be scalar, got shape {loss.shape} from {loss.label()}")
    if not loss.requires_grad:
        raise GraphError(f"backward on {loss.label()}: nothing upstream requires grad "
                         "(was forward run with gradients enabled?)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if _finite_checks and not np.all(np.isfinite(node.grad)):
                raise NonFiniteError(f"non-finite gradient at {node.label()}")

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def adam_step(params: dict[str, Tensor], state: AdamState,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One Adam update over all parameters. Weight decay is decoupled
    (applied to the parameter, not folded into the gradient)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * update


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    tolerance: float
    max_rel_error: dict[str, float]
    passed: bool

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def finite_diff_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      tolerance: float = 1e-4, h: float = 1e-5) -> FiniteDiffReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` rebuilds the (deterministic) scalar loss from the current
    parameter values; every element of every parameter is perturbed, so keep
    this to test-scale graphs. Relative error uses max(1, |fd|) as the scale
    so near-zero gradients are compared absolutely.
    """
    zero_grad(params.values())
    loss = loss_fn()
    backward(loss, params.values())
    analytic = {k: np.array(p.grad, dtype=np.float64, copy=True) for k, p in params.items()}

    report: dict[str, float] = {}
    for key, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
        a = analytic[key].reshape(-1)
        rel = np.abs(a - fd) / np.maximum(1.0, np.abs(fd))
        report[key] = float(rel.max()) if rel.size else 0.0
    passed = all(e <= tolerance for e in report.values())
    return FiniteDiffReport(tolerance=tolerance, max_rel_error=report, passed=passed)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Truncated normal at +/- 2 std, the default weight initializer."""
    flat = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)), random_state=rng)
    return flat.reshape(shape).astype(dtype)
