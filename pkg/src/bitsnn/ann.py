"""Source ANN: conv -> BN -> QCFS blocks, average pooling and a linear head."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def is_power_of_two(q: int) -> bool:
    return q >= 1 and (q & (q - 1)) == 0


@dataclass
class QcfsActivation:
    """Quantize-clip-floor-shift staircase with trainable ceiling ``lam``.

    Outputs lie on ``{0, lam/Q, ..., clip_hi*lam/Q}``. ``clip_hi`` defaults
    to ``Q - 1`` (conversion-exact mode); pass ``clip_hi=Q`` for the
    training-only variant whose top level ``lam`` has no T-bit encoding.
    """

    lam: float
    q_steps: int = 16
    clip_hi: int | None = None

    def __post_init__(self):
        self.lam = float(self.lam)
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise ValueError(f"QCFS threshold lambda must be positive, got {self.lam}")
        if not is_power_of_two(self.q_steps) or self.q_steps < 2:
            raise ValueError(f"q_steps must be a power of two >= 2, got {self.q_steps}")
        if self.clip_hi is None:
            self.clip_hi = self.q_steps - 1
        if self.clip_hi not in (self.q_steps - 1, self.q_steps):
            raise ValueError(f"clip_hi must be Q-1 or Q, got {self.clip_hi} for Q={self.q_steps}")

    @property
    def bits(self) -> int:
        return int(round(math.log2(self.q_steps)))

    @property
    def exact(self) -> bool:
        return self.clip_hi == self.q_steps - 1


def qcfs_levels(z, act: QcfsActivation) -> np.ndarray:
    """Integer staircase level clip(floor(z*Q/lam + 1/2), 0, clip_hi)."""
    z = np.asarray(z)
    dt = z.dtype if z.dtype in (np.float32, np.float64) else np.float64
    scale = dt.type(act.q_steps) / dt.type(act.lam)
    return np.clip(np.floor(z * scale + dt.type(0.5)), 0, act.clip_hi)


def qcfs_forward(z, act: QcfsActivation) -> np.ndarray:
    z = np.asarray(z)
    dt = z.dtype if z.dtype in (np.float32, np.float64) else np.float64
    step = dt.type(act.lam) / dt.type(act.q_steps)
    return (qcfs_levels(z, act) * step).astype(dt, copy=False)


def qcfs_backward(z, act: QcfsActivation, upstream):
    """Straight-through gradients of QCFS: returns (dz, dlambda).

    dz passes ``upstream`` where 0 < z < lam; dlambda is
    sum(upstream * (a - z * 1{0<z<lam}) / lam).
    """
    z = np.asarray(z)
    upstream = np.asarray(upstream)
    if z.shape != upstream.shape:
        raise ValueError(f"qcfs_backward shape mismatch {z.shape} vs {upstream.shape}")
    a = qcfs_forward(z, act)
    inside = (z > 0) & (z < act.lam)
    dz = np.where(inside, upstream, 0).astype(upstream.dtype)
    dlam = float(np.sum(upstream * (a - np.where(inside, z, 0)) / act.lam))
    return dz, dlam


def qcfs(z: Tensor, lam: Tensor, act: QcfsActivation) -> Tensor:
    """Tape-aware QCFS. ``lam`` is a one-element tensor that mirrors ``act.lam``."""
    a = qcfs_forward(z.data, act)

    def _bw(g):
        dz, dlam = qcfs_backward(z.data, act, g)
        return dz, np.asarray([dlam], dtype=lam.dtype)

    return tn.custom_op(a, (z, lam), _bw)


def levels_of_activation(a, act: QcfsActivation, tol: float = 1e-6) -> np.ndarray:
    """Integer grid index k with a = k*lam/Q; raises for off-grid values."""
    a = np.asarray(a, dtype=np.float64)
    step = act.lam / act.q_steps
    k = np.rint(a / step)
    if np.any(np.abs(a - k * step) > tol * step):
        bad = float(np.max(np.abs(a - k * step)))
        raise ValueError(f"activation off the QCFS grid (max offset {bad:.3g}, step {step:.3g})")
    if np.any(k < 0) or np.any(k > act.clip_hi):
        raise ValueError("activation outside [0, clip_hi*lam/Q]")
    return k.astype(np.int64)


def bits_of_levels(levels, steps: int) -> np.ndarray:
    """Binary planes of integer levels, MSB first: shape (steps, *levels.shape)."""
    levels = np.asarray(levels, dtype=np.int64)
    if np.any(levels >= (1 << steps)) or np.any(levels < 0):
        raise ValueError(f"level exceeds {steps}-bit range")
    shifts = np.arange(steps - 1, -1, -1).reshape((steps,) + (1,) * levels.ndim)
    return ((levels[None] >> shifts) & 1).astype(np.uint8)


def levels_of_bits(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    steps = bits.shape[0]
    weights = (1 << np.arange(steps - 1, -1, -1)).reshape((steps,) + (1,) * (bits.ndim - 1))
    return (bits * weights).sum(axis=0)


def bits_of_activation(a, act: QcfsActivation, steps: int | None = None) -> np.ndarray:
    """Split QCFS outputs into ``steps`` = log2(Q) binary planes, MSB first.

    Plane t carries weight lam/2^t, so sum_t plane_t * lam/2^t == a.
    """
    if steps is None:
        steps = act.bits
    if (1 << steps) != act.q_steps:
        raise ValueError(f"bit planes need steps = log2(Q) = {act.bits}, got {steps}")
    return bits_of_levels(levels_of_activation(a, act), steps)


# ---------------------------------------------------------------------------
# model graph
# ---------------------------------------------------------------------------

@dataclass
class ConvBnBlock:
    weight: np.ndarray          # (out, in, k, k)
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    act: QcfsActivation
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        c = self.weight.shape[0]
        for name in ("mu", "sigma", "gamma", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float32).reshape(-1)
            if v.shape[0] != c:
                raise ValueError(f"BN {name} has {v.shape[0]} channels, conv has {c}")
            setattr(self, name, v)
        if np.any(self.sigma <= 0):
            raise ValueError("BN sigma must be strictly positive")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class AvgPool:
    size: int = 2


@dataclass
class LinearHead:
    weight: np.ndarray          # (classes, features)
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("head bias/weight mismatch")


@dataclass
class AnnModel:
    layers: list
    head: LinearHead
    input_shape: tuple          # (C, H, W)
    num_classes: int
    q_steps: int = 16
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shapes = layer_shapes(self)
        if self.head.weight.shape != (self.num_classes, int(np.prod(shapes[-1]))):
            raise ValueError(
                f"head weight {self.head.weight.shape} incompatible with features "
                f"{int(np.prod(shapes[-1]))} and {self.num_classes} classes")

    @property
    def blocks(self) -> list[ConvBnBlock]:
        return [l for l in self.layers if isinstance(l, ConvBnBlock)]

    def copy(self) -> "AnnModel":
        return copy.deepcopy(self)


def layer_shapes(model) -> list[tuple]:
    """Per-sample activation shape after the input and after each layer."""
    c, h, w = model.input_shape
    shapes = [(c, h, w)]
    for layer in model.layers:
        if isinstance(layer, ConvBnBlock):
            if layer.in_channels != c:
                raise ValueError(f"block expects {layer.in_channels} channels, gets {c}")
            k, s, p = layer.kernel, layer.stride, layer.padding
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            c = layer.out_channels
            if h <= 0 or w <= 0:
                raise ValueError("block output has empty spatial extent")
        elif isinstance(layer, AvgPool):
            if h % layer.size or w % layer.size:
                raise ValueError(f"avgpool {layer.size} does not divide {h}x{w}")
            h, w = h // layer.size, w // layer.size
        else:
            raise TypeError(f"unknown layer {type(layer).__name__}")
        shapes.append((c, h, w))
    return shapes


def build_model(input_shape=(1, 8, 8), channels=(8, 16), num_classes=2, q_steps=16,
                pool_after=None, kernel=3, lam_init=1.0, seed=0) -> AnnModel:
    """Small sequential CNN with Kaiming-uniform conv weights and unit BN."""
    rng = np.random.default_rng(seed)
    if pool_after is None:
        pool_after = [False] * len(channels)
    layers = []
    c = input_shape[0]
    for i, oc in enumerate(channels):
        bound = math.sqrt(6.0 / (c * kernel * kernel))
        w = rng.uniform(-bound, bound, size=(oc, c, kernel, kernel)).astype(np.float32)
        layers.append(ConvBnBlock(
            weight=w, mu=np.zeros(oc), sigma=tn.stabilized_sigma(np.ones(oc)),
            gamma=np.ones(oc), beta=np.zeros(oc),
            act=QcfsActivation(lam_init, q_steps), padding=kernel // 2))
        if pool_after[i]:
            layers.append(AvgPool(2))
        c = oc
    tmp = AnnModel.__new__(AnnModel)
    tmp.layers, tmp.input_shape = layers, tuple(input_shape)
    feats = int(np.prod(layer_shapes(tmp)[-1]))
    bound = 1.0 / math.sqrt(feats)
    head = LinearHead(rng.uniform(-bound, bound, size=(num_classes, feats)),
                      rng.uniform(-bound, bound, size=num_classes))
    return AnnModel(layers, head, tuple(input_shape), num_classes, q_steps)


def block_preactivation(block: ConvBnBlock, x, dtype=np.float32) -> np.ndarray:
    """conv + BN of one block (the g_ANN map), evaluated in ``dtype``."""
    xt = Tensor(np.asarray(x, dtype=dtype), dtype=dtype)
    w = Tensor(block.weight, dtype=dtype)
    y = tn.conv2d(xt, w, stride=block.stride, padding=block.padding)
    return tn.batchnorm(y, block.mu, block.sigma,
                        block.gamma.astype(dtype), block.beta.astype(dtype)).data


def ann_forward(model: AnnModel, x, dtype=np.float32, return_preact: bool = False):
    """Inference pass. Returns (logits, per-block activations[, pre-activations])."""
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input (N,){model.input_shape}")
    h = x.astype(dtype)
    acts, pres = [], []
    for layer in model.layers:
        if isinstance(layer, ConvBnBlock):
            z = block_preactivation(layer, h, dtype)
            h = qcfs_forward(z, layer.act)
            pres.append(z)
            acts.append(h)
        else:
            h = tn.avgpool2d(Tensor(h, dtype=dtype), layer.size).data
    feats = h.reshape(h.shape[0], -1)
    logits = tn.linear(Tensor(feats, dtype=dtype), Tensor(model.head.weight, dtype=dtype),
                       Tensor(model.head.bias, dtype=dtype)).data
    if return_preact:
        return logits, acts, pres
    return logits, acts


def predict(model: AnnModel, x, dtype=np.float32) -> np.ndarray:
    return np.argmax(ann_forward(model, x, dtype)[0], axis=1)
