"""Hot inner loops: convolution and the two IF neuron updates.

Forward convolution and the neuron loops exist twice, a numba ``@njit``
version and a pure-numpy version with the same per-element summation
order, so forward results are bit-identical between backends. Backward
convolutions are BLAS-bound and shared by both backends. The backend is picked once at
import time; set ``BITSNN_DISABLE_NUMBA=1`` to force numpy.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("BITSNN_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------

def _window(xp, ci, i, j, stride, ho, wo):
    return xp[:, ci, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d_forward_numpy(xp, w, stride, ho, wo):
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    out = np.zeros((n, o, ho, wo), dtype=xp.dtype)
    # loop order (c, i, j) fixes the accumulation order of every output element
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = _window(xp, ci, i, j, stride, ho, wo)
                out += w[:, ci, i, j][None, :, None, None] * patch[:, None]
    return out


def conv2d_grad_input_numpy(g, w, stride, xp_shape):
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    _, ho, wo = g.shape[1:]
    o, c, kh, kw = w.shape
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(w[:, ci, i, j], g, axes=(0, 1))
                dxp[:, ci, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return dxp


def conv2d_grad_weight_numpy(g, xp, stride, w_shape):
    o, c, kh, kw = w_shape
    ho, wo = g.shape[2:]
    dw = np.zeros(w_shape, dtype=g.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = _window(xp, ci, i, j, stride, ho, wo)
                dw[:, ci, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 1, 2]))
    return dw


def halving_thresholds(theta, steps, dtype):
    """theta/2, theta/4, ..., theta/2^steps in ``dtype`` (exact: powers of two)."""
    return np.asarray(theta, dtype=dtype) / (2.0 ** np.arange(1, steps + 1)).astype(dtype)


def fire_modified_numpy(u, theta, steps):
    u = u.copy()
    spikes = np.zeros((steps,) + u.shape, dtype=np.uint8)
    for t, thr in enumerate(halving_thresholds(theta, steps, u.dtype)):
        fired = u > thr
        spikes[t] = fired
        u = np.where(fired, u - thr, u)
    return spikes, u


def fire_baseline_numpy(z_seq, theta, u0):
    steps = z_seq.shape[0]
    th = z_seq.dtype.type(theta)
    trace = np.empty((steps + 1,) + z_seq.shape[1:], dtype=z_seq.dtype)
    spikes = np.zeros(z_seq.shape, dtype=np.uint8)
    u = np.full(z_seq.shape[1:], u0, dtype=z_seq.dtype)
    trace[0] = u
    for t in range(steps):
        v = u + z_seq[t]
        fired = v > th
        spikes[t] = fired
        u = np.where(fired, v - th, v)
        trace[t + 1] = u
    return spikes, trace


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(xp, w, stride, ho, wo):
        # innermost loop runs along output columns; per-output order is still (ci, i, j)
        n = xp.shape[0]
        o, c, kh, kw = w.shape
        out = np.zeros((n, o, ho, wo), dtype=xp.dtype)
        for b in range(n):
            for oc in range(o):
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[oc, ci, i, j]
                            for y in range(ho):
                                yi = y * stride + i
                                for x in range(wo):
                                    out[b, oc, y, x] += wv * xp[b, ci, yi, x * stride + j]
        return out

    @njit(cache=True)
    def _fire_modified_nb(u_flat, thresholds, spikes):
        u = u_flat.copy()
        for t in range(thresholds.shape[0]):
            thr = thresholds[t]
            for k in range(u.shape[0]):
                if u[k] > thr:
                    spikes[t, k] = 1
                    u[k] = u[k] - thr
        return u

    @njit(cache=True)
    def _fire_baseline_nb(z_flat, theta, u0, spikes, trace):
        steps, m = z_flat.shape
        for k in range(m):
            u = u0
            trace[0, k] = u
            for t in range(steps):
                v = u + z_flat[t, k]
                if v > theta:
                    spikes[t, k] = 1
                    u = v - theta
                else:
                    u = v
                trace[t + 1, k] = u
        return trace


def conv2d_forward_numba(xp, w, stride, ho, wo):
    return _conv2d_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, ho, wo)


def fire_modified_numba(u, theta, steps):
    flat = np.ascontiguousarray(u).reshape(-1)
    spikes = np.zeros((steps, flat.shape[0]), dtype=np.uint8)
    u_out = _fire_modified_nb(flat, halving_thresholds(theta, steps, flat.dtype), spikes)
    return spikes.reshape((steps,) + u.shape), u_out.reshape(u.shape)


def fire_baseline_numba(z_seq, theta, u0):
    steps = z_seq.shape[0]
    flat = np.ascontiguousarray(z_seq).reshape(steps, -1)
    spikes = np.zeros(flat.shape, dtype=np.uint8)
    trace = np.empty((steps + 1, flat.shape[1]), dtype=flat.dtype)
    dt = flat.dtype.type
    _fire_baseline_nb(flat, dt(theta), dt(u0), spikes, trace)
    return spikes.reshape(z_seq.shape), trace.reshape((steps + 1,) + z_seq.shape[1:])


BACKENDS = {
    "numpy": {
        "conv2d_forward": conv2d_forward_numpy,
        "conv2d_grad_input": conv2d_grad_input_numpy,
        "conv2d_grad_weight": conv2d_grad_weight_numpy,
        "fire_modified": fire_modified_numpy,
        "fire_baseline": fire_baseline_numpy,
    },
}
if HAVE_NUMBA:
    BACKENDS["numba"] = {
        "conv2d_forward": conv2d_forward_numba,
        # backward convs are BLAS-bound (tensordot); a JIT loop nest only loses
        "conv2d_grad_input": conv2d_grad_input_numpy,
        "conv2d_grad_weight": conv2d_grad_weight_numpy,
        "fire_modified": fire_modified_numba,
        "fire_baseline": fire_baseline_numba,
    }

_active = BACKENDS[backend_name()]
conv2d_forward = _active["conv2d_forward"]
conv2d_grad_input = _active["conv2d_grad_input"]
conv2d_grad_weight = _active["conv2d_grad_weight"]
fire_modified = _active["fire_modified"]
fire_baseline = _active["fire_baseline"]
