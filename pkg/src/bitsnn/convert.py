"""ANN -> bit-serial SNN conversion.

Weights, BN statistics and gamma are copied verbatim; each hidden block's
BN bias is split across the T time steps so that the per-step currents sum
to the ANN pre-activation. The first block is left alone because it runs
once on the analog input.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .ann import AnnModel, AvgPool, ConvBnBlock, LinearHead, QcfsActivation, layer_shapes

NEURON_MODES = ("modified", "baseline")


@dataclass
class SnnModel:
    """Converted network. ``layers`` mirror the ANN; blocks carry the shifted bias."""

    layers: list
    head: LinearHead
    theta: list                 # per-block scalar thresholds, theta_l = lambda_l
    timesteps: int
    input_shape: tuple
    num_classes: int
    q_steps: int
    neuron: str = "modified"
    u0_fraction: float = 0.5    # baseline IF initial potential, as a fraction of theta
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.neuron not in NEURON_MODES:
            raise ValueError(f"neuron mode must be one of {NEURON_MODES}, got {self.neuron!r}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        self.theta = [float(t) for t in self.theta]
        if len(self.theta) != len(self.blocks):
            raise ValueError("one threshold per block required")
        if any(not t > 0 for t in self.theta):
            raise ValueError("thresholds must be positive")
        layer_shapes(self)

    @property
    def blocks(self) -> list[ConvBnBlock]:
        return [l for l in self.layers if isinstance(l, ConvBnBlock)]

    @property
    def exact(self) -> bool:
        """Bit-exact mode: T = log2(Q) and every block clips at Q-1."""
        return (self.neuron == "modified" and (1 << self.timesteps) == self.q_steps
                and all(b.act.exact for b in self.blocks))


def shift_bn_bias(beta, gamma, mu, sigma, timesteps: int) -> np.ndarray:
    """beta/T + (1 - 1/T) * gamma * mu / sigma, per channel."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma == 0):
        raise ValueError("cannot shift BN bias with sigma == 0")
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    beta = np.asarray(beta, dtype=np.float64)
    if timesteps == 1:
        return beta.copy()
    gamma = np.asarray(gamma, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return beta / timesteps + (1.0 - 1.0 / timesteps) * gamma * mu / sigma


def convert(ann: AnnModel, timesteps: int | None = None, neuron: str = "modified",
            exact: bool | None = None) -> SnnModel:
    """Build the SNN for ``ann``; the input model is never mutated.

    ``timesteps`` defaults to log2(Q). With ``exact=True`` anything but
    T = log2(Q) (and a power-of-two Q) is an error; ``exact=None`` accepts
    any T >= 1 for degraded-latency studies.
    """
    q = ann.q_steps
    q_is_pow2 = q >= 2 and (q & (q - 1)) == 0
    if timesteps is None:
        if not q_is_pow2:
            raise ValueError(f"Q={q} is not a power of two; pass timesteps explicitly")
        timesteps = int(math.log2(q))
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if exact:
        if not q_is_pow2:
            raise ValueError(f"exact conversion needs a power-of-two Q, got {q}")
        if (1 << timesteps) != q:
            raise ValueError(f"exact conversion needs T = log2(Q) = {int(math.log2(q))}, got {timesteps}")
    for b in ann.blocks:
        if np.ndim(b.act.lam) != 0:
            raise ValueError("thresholds must be per-layer scalars")

    layers = []
    first = True
    for layer in ann.layers:
        if isinstance(layer, ConvBnBlock):
            blk = copy.deepcopy(layer)
            if neuron == "modified" and not first:
                blk.beta = shift_bn_bias(layer.beta, layer.gamma, layer.mu, layer.sigma,
                                         timesteps).astype(np.float32)
            layers.append(blk)
            first = False
        elif isinstance(layer, AvgPool):
            layers.append(AvgPool(layer.size))
        else:
            raise TypeError(f"unknown layer {type(layer).__name__}")
    return SnnModel(
        layers=layers,
        head=copy.deepcopy(ann.head),
        theta=[b.act.lam for b in ann.blocks],
        timesteps=timesteps,
        input_shape=ann.input_shape,
        num_classes=ann.num_classes,
        q_steps=q,
        neuron=neuron,
        meta={"source": dict(ann.meta)},
    )


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def _g(block: ConvBnBlock, x, beta, dtype):
    from .ann import block_preactivation

    b = copy.copy(block)
    b.beta = np.asarray(beta)
    return block_preactivation(b, x, dtype)


def condition_i_deviation(block: ConvBnBlock, beta_c, spikes, theta_prev: float = 1.0,
                          dtype=np.float64) -> float:
    """max |sum_t g_SNN(2^(t-1) u s(t)) - g_ANN(sum_t 2^(t-1) u s(t))|, u = theta_prev/2^T.

    ``spikes`` has shape (T, N, C, H, W); plane t (0-based) is scaled by 2^t.
    """
    dtype = np.dtype(dtype).type
    spikes = np.asarray(spikes, dtype=dtype)
    steps = spikes.shape[0]
    unit = theta_prev / (1 << steps)
    scaled = np.stack([spikes[t] * dtype(unit * (1 << t)) for t in range(steps)])
    lhs = sum(_g(block, scaled[t], beta_c, dtype) for t in range(steps))
    rhs = _g(block, scaled.sum(axis=0), block.beta, dtype)
    return float(np.max(np.abs(lhs - rhs)))


def check_condition_i(block: ConvBnBlock, timesteps: int, trials: int = 100, rng=None,
                      beta_c=None, spatial: int = 4, batch: int = 2, theta_prev: float = 1.0,
                      dtype=np.float64) -> float:
    """Max Condition I deviation over ``trials`` random binary spike patterns.

    ``beta_c`` defaults to the shifted bias; pass ``block.beta`` for the
    unshifted negative control.
    """
    rng = np.random.default_rng(rng)
    if beta_c is None:
        beta_c = shift_bn_bias(block.beta, block.gamma, block.mu, block.sigma, timesteps)
    worst = 0.0
    for _ in range(trials):
        s = rng.integers(0, 2, size=(timesteps, batch, block.in_channels, spatial, spatial))
        worst = max(worst, condition_i_deviation(block, beta_c, s, theta_prev, dtype))
    return worst


@dataclass
class LosslessReport:
    max_deviation: float
    logit_deviation: float
    layer_deviation: list
    bit_mismatches: list
    samples: int

    @property
    def bits_equal(self) -> bool:
        return all(m == 0 for m in self.bit_mismatches)

    def passed(self, tol: float) -> bool:
        return self.max_deviation <= tol

    def as_dict(self, tol: float | None = None) -> dict:
        d = {
            "samples": self.samples,
            "max_deviation": self.max_deviation,
            "logit_deviation": self.logit_deviation,
            "layers": [{"layer": i + 1, "max_deviation": dev, "bit_mismatches": int(mm)}
                       for i, (dev, mm) in enumerate(zip(self.layer_deviation, self.bit_mismatches))],
        }
        if tol is not None:
            d["tol"] = tol
            d["passed"] = self.passed(tol)
        return d


def verify_lossless(ann: AnnModel, snn: SnnModel, inputs, dtype=np.float64) -> LosslessReport:
    """Run both networks and compare every block output and the logits.

    Block l is compared as QCFS output a_l versus the bit-weighted rate
    sum_t s_l(t) theta_l / 2^t; bits are compared plane by plane when the
    plane counts agree. float64 keeps rounding ties out of the comparison.
    """
    from .ann import ann_forward, bits_of_levels, qcfs_levels
    from .snn import run_snn

    inputs = np.asarray(inputs)
    logits_a, acts, pres = ann_forward(ann, inputs, dtype=dtype, return_preact=True)
    res = run_snn(snn, inputs, dtype=dtype)
    layer_dev, mismatches = [], []
    for blk, a, z, trace, spikes in zip(ann.blocks, acts, pres, res.traces, res.spikes):
        layer_dev.append(float(np.max(np.abs(a - trace.phi))) if a.size else 0.0)
        if (1 << snn.timesteps) == blk.act.q_steps and blk.act.exact:
            ann_bits = bits_of_levels(qcfs_levels(z, blk.act).astype(np.int64), snn.timesteps)
            mismatches.append(int(np.count_nonzero(ann_bits != spikes)))
        else:
            mismatches.append(int(np.count_nonzero(np.abs(a - trace.phi) > 0)))
    logit_dev = float(np.max(np.abs(logits_a - res.logits)))
    return LosslessReport(
        max_deviation=max([logit_dev] + layer_dev),
        logit_deviation=logit_dev,
        layer_deviation=layer_dev,
        bit_mismatches=mismatches,
        samples=int(inputs.shape[0]),
    )
