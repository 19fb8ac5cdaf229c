"""Dense float tensors with a tape-based reverse mode.

Only the primitives the converted networks need are provided: conv2d,
batchnorm (inference and batch-statistics forms), linear, avgpool2d,
heaviside, reshape, a few elementwise helpers and cross-entropy. Storage is
float32 unless a caller explicitly asks for float64 (used by oracles).

Usage::

    with Tape():
        y = conv2d(x, w, padding=1)
        loss = tsum(y)
    backward(loss)
    w.grad
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TapeError(RuntimeError):
    """Raised for backward passes that have no recorded tape."""


class Tensor:
    """n-d float array plus an optional gradient buffer.

    ``data`` is validated on construction: it must be finite. Arrays that
    are already float32 (or float64 when ``dtype=np.float64``) are wrapped
    without a copy, so a Tensor can act as a view onto model parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _check: bool = True):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        arr = arr.astype(dtype, copy=False)
        if _check and not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or ''} contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward_fn: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications; usable as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
        self.nodes.append(_Node(out, tuple(parents), backward_fn))
        out.requires_grad = True
        out._tape = self


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _emit(data: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    out = Tensor(data, _check=False)
    tape = active_tape()
    tracked = [p for p in parents if isinstance(p, Tensor) and p.requires_grad]
    if tape is not None and tracked:
        tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; fills ``.grad`` on leaves."""
    if loss._tape is None:
        raise TapeError("backward() needs a loss produced under an active Tape")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if parent._tape is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with OIkk weights (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} or padding={padding}")
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty: input {x.shape}, weights {w.shape}, padding {padding}")
    dtype = np.result_type(x.dtype, w.dtype)
    xp = x.data.astype(dtype, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wdata = w.data.astype(dtype, copy=False)
    out = _kernels.conv2d_forward(xp, wdata, stride, ho, wo)

    def _bw(g):
        dx = dw = None
        if x.requires_grad:
            dxp = _kernels.conv2d_grad_input(g, wdata, stride, xp.shape)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if w.requires_grad:
            dw = _kernels.conv2d_grad_weight(g, xp, stride, wdata.shape)
        return dx, dw

    return _emit(out, (x, w), _bw)


def _channel_vec(v, c, what):
    arr = v.data if isinstance(v, Tensor) else np.asarray(v)
    arr = arr.reshape(-1)
    if arr.shape[0] != c:
        raise ValueError(f"batchnorm {what} has {arr.shape[0]} channels, input has {c}")
    return arr


def _bshape(ndim):
    return (1, -1) + (1,) * (ndim - 2)


def batchnorm(x, mu, sigma, gamma, beta) -> Tensor:
    """Inference BN: ``gamma * (x - mu) / sigma + beta`` per channel (axis 1).

    ``sigma`` is the stored standard deviation with the stabilizer already
    folded in (see :func:`stabilized_sigma`); no extra epsilon is added here.
    """
    x = as_tensor(x)
    c = x.shape[1]
    mu_a = _channel_vec(mu, c, "mu")
    sig_a = _channel_vec(sigma, c, "sigma")
    if np.any(sig_a <= 0):
        raise ValueError("batchnorm sigma must be strictly positive")
    gamma_t, beta_t = as_tensor(gamma), as_tensor(beta)
    g_a = _channel_vec(gamma_t, c, "gamma")
    b_a = _channel_vec(beta_t, c, "beta")
    dtype = x.dtype
    bs = _bshape(x.data.ndim)
    mu_b = mu_a.astype(dtype).reshape(bs)
    sig_b = sig_a.astype(dtype).reshape(bs)
    g_b = g_a.astype(dtype).reshape(bs)
    xhat = (x.data - mu_b) / sig_b
    out = g_b * xhat + b_a.astype(dtype).reshape(bs)
    axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def _bw(g):
        dx = g * g_b / sig_b if x.requires_grad else None
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma_t.shape) if gamma_t.requires_grad else None
        dbeta = g.sum(axis=axes).reshape(beta_t.shape) if beta_t.requires_grad else None
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma_t, beta_t), _bw)


def stabilized_sigma(var, eps: float = 1e-5):
    """Stored BN standard deviation: sqrt(var + eps)."""
    return np.sqrt(np.asarray(var) + eps)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch-statistics BN. Returns (out, batch_mean, batch_var) with biased var."""
    x, gamma_t, beta_t = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    _channel_vec(gamma_t, c, "gamma")
    _channel_vec(beta_t, c, "beta")
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    bs = _bshape(x.data.ndim)
    m = x.data.size // c
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    sig = np.sqrt(var + eps).astype(x.dtype)
    xhat = (x.data - mean.reshape(bs)) / sig.reshape(bs)
    g_b = gamma_t.data.reshape(bs)
    out = g_b * xhat + beta_t.data.reshape(bs)

    def _bw(g):
        dx = None
        if x.requires_grad:
            dxhat = g * g_b
            s1 = dxhat.sum(axis=axes).reshape(bs)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
            dx = (m * dxhat - s1 - xhat * s2) / (m * sig.reshape(bs))
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma_t.shape) if gamma_t.requires_grad else None
        dbeta = g.sum(axis=axes).reshape(beta_t.shape) if beta_t.requires_grad else None
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma_t, beta_t), _bw), mean, var


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, F) and w of shape (K, F)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weights {w.shape}")
    b_t = as_tensor(b) if b is not None else None
    out = x.data @ w.data.T
    if b_t is not None:
        if b_t.shape != (w.shape[0],):
            raise ValueError(f"linear bias shape {b_t.shape} does not match weights {w.shape}")
        out = out + b_t.data

    def _bw(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if (b_t is not None and b_t.requires_grad) else None
        return dx, dw, db

    return _emit(out, (x, w, b_t), _bw)


def avgpool2d(x, size: int) -> Tensor:
    """Mean over non-overlapping ``size`` x ``size`` windows."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise ValueError(f"avgpool2d window {size} does not divide spatial extent {h}x{w}")
    # fixed window order so results do not depend on batch size or layout
    acc = np.zeros((n, c, h // size, w // size), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            acc += x.data[:, :, i::size, j::size]
    out = acc / x.dtype.type(size * size)

    def _bw(g):
        scale = x.dtype.type(1.0 / (size * size))
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale,)

    return _emit(out, (x,), _bw)


def heaviside(x) -> Tensor:
    """1.0 where x > 0, else 0.0. Zero gradient everywhere (not differentiable)."""
    x = as_tensor(x)
    out = (x.data > 0).astype(x.dtype)
    return _emit(out, (x,), lambda g: (np.zeros_like(g),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        ga = g if a.data.size == g.size else np.sum(g).reshape(a.shape)
        gb = g if b.data.size == g.size else np.sum(g).reshape(b.shape)
        return ga, gb

    return _emit(a.data + b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar constant."""
    if np.isscalar(b):
        a = as_tensor(a)
        c = a.dtype.type(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,))
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class ids."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {n} ids in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = (logsumexp - z[np.arange(n), labels]).mean()

    def _bw(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)


def custom_op(data: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    """Record an op defined elsewhere (e.g. QCFS) on the active tape."""
    return _emit(data, parents, backward_fn)
