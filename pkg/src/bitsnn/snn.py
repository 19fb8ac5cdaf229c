"""Spiking inference engines.

Two neuron models share one network description (:class:`SnnModel`):

* ``modified``: bit-serial IF. All T input currents are accumulated first,
  then the neuron emits one bit per step against halving thresholds
  theta/2, theta/4, ..., resetting by subtraction. Spike at step t carries
  theta/2^t (MSB first). Needs layer-by-layer propagation.
* ``baseline``: classic reset-by-subtraction IF with rate coding, usable
  with either scheduler.

Input-side weighting for the modified neuron: a spike emitted at step tau by
layer l-1 enters layer l scaled by theta_{l-1}/2^tau, i.e. by the left shift
2^(k-1) of the unit theta_{l-1}/2^T with shift index k = T - tau + 1.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import tensor as tn
from .ann import (AvgPool, ConvBnBlock, QcfsActivation, bits_of_levels, block_preactivation,
                  levels_of_bits, qcfs_levels)
from .convert import SnnModel
from .tensor import Tensor

SCHEDULERS = ("layer_by_layer", "step_by_step")


# ---------------------------------------------------------------------------
# neuron primitives
# ---------------------------------------------------------------------------

def rounding_offset(theta: float, timesteps: int) -> float:
    """Half of the finest output step, theta / 2^(T+1)."""
    return theta / float(1 << (timesteps + 1))


def fire_modified(u_init, theta: float, timesteps: int):
    """Bit-serial firing from an accumulated potential.

    ``u_init`` must already include :func:`rounding_offset`. At step t the
    neuron spikes iff u(t) > theta/2^t and then subtracts theta/2^t.
    Returns (spikes of shape (T, *u.shape) as uint8, final potential).
    """
    u = np.asarray(u_init)
    if u.dtype not in (np.float32, np.float64):
        u = u.astype(np.float64)
    return _kernels.fire_modified(u, theta, timesteps)


def fire_baseline(z_seq, theta: float, u0: float | None = None):
    """Reset-by-subtraction IF over a current sequence of shape (T, ...).

    Returns (spikes (T, ...), potential trace (T+1, ...)) with trace[0] = u0.
    """
    z_seq = np.asarray(z_seq)
    if z_seq.dtype not in (np.float32, np.float64):
        z_seq = z_seq.astype(np.float64)
    if u0 is None:
        u0 = theta / 2.0
    return _kernels.fire_baseline(z_seq, theta, u0)


def _if_step(u, z, theta):
    # one step of the baseline kernel, same arithmetic
    v = u + z
    fired = v > v.dtype.type(theta)
    return fired.astype(np.uint8), np.where(fired, v - v.dtype.type(theta), v)


def spike_rate(spikes, theta: float, neuron: str = "modified") -> np.ndarray:
    """phi(T): bit-weighted sum_t s(t) theta/2^t, or theta * mean_t s(t) for baseline."""
    spikes = np.asarray(spikes)
    steps = spikes.shape[0]
    if neuron == "modified":
        return levels_of_bits(spikes) * (theta / float(1 << steps))
    return spikes.astype(np.float64).sum(axis=0) * (theta / steps)


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class CostLedger:
    """Live-tensor accounting for the schedulers.

    A "plane" is one layer-sized tensor for one time step (a spike plane,
    an input-current plane or a membrane potential). Latency is charged in
    abstract units: one per layer per step step-by-step, and
    1 + (T-1)*fused_step_cost per layer layer-by-layer.
    """

    live: dict = field(default_factory=dict)
    peak_planes: int = 0
    peak_elements: int = 0
    latency_units: float = 0.0

    def alloc(self, key: str, planes: int, elements: int = 0):
        self.live[key] = (planes, planes * elements)
        self._update()

    def free(self, *keys: str):
        for key in keys:
            self.live.pop(key, None)

    def _update(self):
        planes = sum(p for p, _ in self.live.values())
        elems = sum(e for _, e in self.live.values())
        self.peak_planes = max(self.peak_planes, planes)
        self.peak_elements = max(self.peak_elements, elems)

    def as_dict(self) -> dict:
        return {"peak_live_planes": self.peak_planes, "peak_live_elements": self.peak_elements,
                "latency_units": self.latency_units}


@dataclass
class LayerTrace:
    """Per-block observables. ``phi`` is the rate output, ``current_sum`` = sum_t z(t)."""

    phi: np.ndarray
    current_sum: np.ndarray
    u_init: np.ndarray
    u_final: np.ndarray
    theta: float
    timesteps: int

    @property
    def z_avg(self) -> np.ndarray:
        return self.current_sum / self.timesteps


@dataclass
class SnnResult:
    logits: np.ndarray
    spikes: list            # per block, uint8 array (T, N, C, H, W)
    traces: list
    ledger: CostLedger
    scheduler: str


# ---------------------------------------------------------------------------
# modified (bit-serial) engine
# ---------------------------------------------------------------------------

def _input_act(snn: SnnModel, theta: float) -> QcfsActivation:
    return QcfsActivation(theta, 1 << snn.timesteps)


def encode_input_block(snn: SnnModel, x, dtype=np.float32):
    """Layer-1 spike planes: conv+BN once on the analog input, QCFS, bit split.

    Returns (planes (T, N, C, H, W) uint8, LayerTrace).
    """
    blk = snn.blocks[0]
    theta = snn.theta[0]
    steps = snn.timesteps
    z = block_preactivation(blk, np.asarray(x), dtype)
    levels = qcfs_levels(z, _input_act(snn, theta)).astype(np.int64)
    planes = bits_of_levels(levels, steps)
    phi = (levels * (theta / float(1 << steps))).astype(dtype)
    u_init = z + z.dtype.type(rounding_offset(theta, steps))
    trace = LayerTrace(phi=phi, current_sum=z, u_init=u_init,
                       u_final=u_init - phi, theta=theta, timesteps=steps)
    return planes, trace


def step_current(block: ConvBnBlock, s_prev, t: int, theta_prev: float, timesteps: int,
                 dtype=np.float32) -> np.ndarray:
    """Input current at shift index t: BN(conv(2^(t-1) * theta_prev/2^T * s_prev)).

    ``block.beta`` is expected to be the shifted bias.
    """
    if not 1 <= t <= timesteps:
        raise ValueError(f"time step {t} outside [1, {timesteps}]")
    scale = theta_prev * float(1 << (t - 1)) / float(1 << timesteps)
    s = np.asarray(s_prev, dtype=dtype) * np.asarray(scale, dtype=dtype)
    return block_preactivation(block, s, dtype)


def _shift_scales(theta_prev, steps, dtype):
    # emission step tau (1-based) -> theta_prev / 2^tau
    return [np.asarray(theta_prev / float(1 << tau), dtype=dtype) for tau in range(1, steps + 1)]


def _pool_planes(planes, size, dtype):
    steps, n = planes.shape[:2]
    flat = planes.reshape((steps * n,) + planes.shape[2:]).astype(dtype)
    out = tn.avgpool2d(Tensor(flat, dtype=dtype), size).data
    return out.reshape((steps, n) + out.shape[1:])


def _run_modified(snn: SnnModel, x, dtype, ledger: CostLedger, fused_step_cost: float):
    steps = snn.timesteps
    n = x.shape[0]
    per = lambda arr: int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 1  # noqa: E731

    ledger.alloc("input", 1, per(x))
    planes, trace = encode_input_block(snn, x, dtype)
    ledger.alloc("potential", 1, per(trace.current_sum))
    ledger.alloc("out", steps, per(trace.current_sum))
    ledger.free("input", "potential")
    ledger.latency_units += 1.0 + (steps - 1) * fused_step_cost
    spikes_all, traces = [planes], [trace]
    values = planes
    theta_prev = snn.theta[0]
    bi = 0
    for layer in snn.layers[1:]:
        ledger.free("in")
        ledger.live["in"] = ledger.live.pop("out")
        if isinstance(layer, AvgPool):
            values = _pool_planes(values, layer.size, dtype)
            ledger.alloc("out", steps, per(values[0]))
            continue
        bi += 1
        theta = snn.theta[bi]
        scales = _shift_scales(theta_prev, steps, dtype)
        # all T currents in one batched conv (per-element results do not depend on batching)
        stacked = np.concatenate([values[tau].astype(dtype) * scales[tau] for tau in range(steps)])
        currents = block_preactivation(layer, stacked, dtype)
        currents = currents.reshape((steps, n) + currents.shape[1:])
        ledger.alloc("currents", steps, per(currents[0]))
        u = np.zeros(currents.shape[1:], dtype=dtype)
        for tau in range(steps):
            u = u + currents[tau]
        ledger.alloc("potential", 1, per(u))
        ledger.free("currents")
        u_init = u + u.dtype.type(rounding_offset(theta, steps))
        planes, u_final = fire_modified(u_init, theta, steps)
        ledger.alloc("out", steps, per(u))
        ledger.free("in", "potential")
        ledger.latency_units += 1.0 + (steps - 1) * fused_step_cost
        phi = spike_rate(planes, theta).astype(dtype)
        spikes_all.append(planes)
        traces.append(LayerTrace(phi=phi, current_sum=u, u_init=u_init, u_final=u_final,
                                 theta=theta, timesteps=steps))
        values = planes
        theta_prev = theta

    # output layer: accumulate only
    scales = _shift_scales(theta_prev, steps, dtype)
    w = Tensor(snn.head.weight, dtype=dtype)
    logits = np.broadcast_to(snn.head.bias.astype(dtype), (n, snn.num_classes)).copy()
    for tau in range(steps):
        feats = (values[tau].astype(dtype) * scales[tau]).reshape(n, -1)
        logits = logits + tn.linear(Tensor(feats, dtype=dtype), w).data
    ledger.latency_units += 1.0 + (steps - 1) * fused_step_cost
    ledger.free("in", "out")
    return SnnResult(logits=logits, spikes=spikes_all, traces=traces, ledger=ledger,
                     scheduler="layer_by_layer")


# ---------------------------------------------------------------------------
# baseline (rate-coded) engine
# ---------------------------------------------------------------------------

def _head_step(snn, feats, dtype):
    n = feats.shape[0]
    return tn.linear(Tensor(feats.reshape(n, -1), dtype=dtype), Tensor(snn.head.weight, dtype=dtype),
                     Tensor(snn.head.bias, dtype=dtype)).data


def _run_baseline_layerwise(snn: SnnModel, x, dtype, ledger, fused_step_cost):
    steps = snn.timesteps
    n = x.shape[0]
    per = lambda arr: int(np.prod(arr.shape[1:]))  # noqa: E731
    spikes_all, traces = [], []
    values = None           # (T, N, ...) inputs to the next layer, already scaled by theta
    ledger.alloc("input", 1, per(x))
    bi = -1
    for layer in snn.layers:
        if isinstance(layer, AvgPool):
            values = _pool_planes(values, layer.size, dtype)
            ledger.free("in")
            ledger.live["in"] = ledger.live.pop("out")
            ledger.alloc("out", steps, per(values[0]))
            continue
        bi += 1
        theta = snn.theta[bi]
        if values is None:
            z1 = block_preactivation(layer, x, dtype)
            currents = np.broadcast_to(z1, (steps,) + z1.shape)
            ledger.alloc("currents", 1, per(z1))
            ledger.free("input")
        else:
            stacked = values.reshape((steps * n,) + values.shape[2:])
            currents = block_preactivation(layer, stacked, dtype)
            currents = currents.reshape((steps, n) + currents.shape[1:])
            ledger.free("in")
            ledger.live["in"] = ledger.live.pop("out")
            ledger.alloc("currents", steps, per(currents[0]))
        u0 = snn.u0_fraction * theta
        spikes, trace = fire_baseline(np.ascontiguousarray(currents), theta, u0)
        ledger.alloc("potential", 1, per(currents[0]))
        ledger.alloc("out", steps, per(currents[0]))
        ledger.free("in", "currents", "potential")
        ledger.latency_units += 1.0 + (steps - 1) * fused_step_cost
        current_sum = np.zeros(currents.shape[1:], dtype=dtype)
        for t in range(steps):
            current_sum = current_sum + currents[t]
        spikes_all.append(spikes)
        traces.append(LayerTrace(phi=spike_rate(spikes, theta, "baseline").astype(dtype),
                                 current_sum=current_sum, u_init=trace[0], u_final=trace[-1],
                                 theta=theta, timesteps=steps))
        values = spikes.astype(dtype) * dtype(theta)
    logits = np.zeros((n, snn.num_classes), dtype=dtype)
    for t in range(steps):
        logits = logits + _head_step(snn, values[t], dtype)
    ledger.latency_units += 1.0 + (steps - 1) * fused_step_cost
    ledger.free("in", "out")
    return SnnResult(logits=logits / dtype(steps), spikes=spikes_all, traces=traces,
                     ledger=ledger, scheduler="layer_by_layer")


def _run_baseline_stepwise(snn: SnnModel, x, dtype, ledger):
    steps = snn.timesteps
    n = x.shape[0]
    per = lambda arr: int(np.prod(arr.shape[1:]))  # noqa: E731
    blocks = snn.blocks
    u = [None] * len(blocks)
    u_init = [None] * len(blocks)
    sums = [None] * len(blocks)
    spikes = [[] for _ in blocks]
    z1 = None
    logits = np.zeros((n, snn.num_classes), dtype=dtype)
    ledger.alloc("input", 1, per(x))
    for t in range(steps):
        value = None
        bi = -1
        for li, layer in enumerate(snn.layers):
            if isinstance(layer, AvgPool):
                value = _pool_planes(value[None], layer.size, dtype)[0]
                ledger.alloc("plane", 1, per(value))
                continue
            bi += 1
            theta = snn.theta[bi]
            if bi == 0:
                if z1 is None:
                    z1 = block_preactivation(layer, x, dtype)
                    ledger.alloc("analog_current", 1, per(z1))
                z = z1
            else:
                z = block_preactivation(layer, value, dtype)
            ledger.alloc("current", 1, per(z))
            if u[bi] is None:
                u[bi] = np.full(z.shape, snn.u0_fraction * theta, dtype=dtype)
                u_init[bi] = u[bi]
                sums[bi] = np.zeros(z.shape, dtype=dtype)
                ledger.alloc(f"potential{bi}", 1, per(z))
            sums[bi] = sums[bi] + z
            s, u[bi] = _if_step(u[bi], z, theta)
            spikes[bi].append(s)
            ledger.alloc("plane", 1, per(z))
            ledger.free("current")
            value = s.astype(dtype) * dtype(theta)
            ledger.latency_units += 1.0
        logits = logits + _head_step(snn, value, dtype)
        ledger.latency_units += 1.0
        ledger.free("plane")
    ledger.free(*list(ledger.live))
    spikes_all = [np.stack(s) for s in spikes]
    traces = [LayerTrace(phi=spike_rate(sp, th, "baseline").astype(dtype), current_sum=cs,
                         u_init=ui, u_final=uf, theta=th, timesteps=steps)
              for sp, th, cs, ui, uf in zip(spikes_all, snn.theta, sums, u_init, u)]
    return SnnResult(logits=logits / dtype(steps), spikes=spikes_all, traces=traces,
                     ledger=ledger, scheduler="step_by_step")


def run_snn(snn: SnnModel, x, scheduler: str = "layer_by_layer", dtype=np.float32,
            fused_step_cost: float = 0.5) -> SnnResult:
    """Run the SNN on a batch ``x`` (N, C, H, W).

    The output layer only accumulates; logits are its final potential
    (divided by T for the rate-coded baseline).
    """
    if scheduler not in SCHEDULERS:
        raise ValueError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
    dtype = np.dtype(dtype).type
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != snn.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input (N,){snn.input_shape}")
    x = x.astype(dtype)
    ledger = CostLedger()
    if snn.neuron == "modified":
        if scheduler != "layer_by_layer":
            raise ValueError(
                "the modified IF neuron needs every input current before its first spike, "
                "so it only runs with scheduler='layer_by_layer'")
        return _run_modified(snn, x, dtype, ledger, fused_step_cost)
    if scheduler == "layer_by_layer":
        return _run_baseline_layerwise(snn, x, dtype, ledger, fused_step_cost)
    return _run_baseline_stepwise(snn, x, dtype, ledger)


def predict(snn: SnnModel, x, scheduler: str = "layer_by_layer", dtype=np.float32) -> np.ndarray:
    return np.argmax(run_snn(snn, x, scheduler, dtype).logits, axis=1)


# ---------------------------------------------------------------------------
# spike dumps
# ---------------------------------------------------------------------------

SPIKE_MAGIC = b"SPKD"
SPIKE_VERSION = 1


def write_spike_dump(path, spikes, layer: int, theta: float | None = None, neuron: str = "modified") -> None:
    """Bit-packed spike train for one layer.

    Layout: b"SPKD", u32 version, u32 header length, UTF-8 JSON header,
    then T planes of ``plane_bytes`` bytes each. Every plane is the C-order
    flattening of ``shape`` packed 8 spikes per byte, least significant bit
    first (numpy ``packbits(..., bitorder="little")``).
    """
    spikes = np.asarray(spikes, dtype=np.uint8)
    steps = spikes.shape[0]
    flat = spikes.reshape(steps, -1)
    plane_bytes = (flat.shape[1] + 7) // 8
    header = {
        "format": "bitsnn-spikes",
        "layer": int(layer),
        "timesteps": int(steps),
        "shape": [int(v) for v in spikes.shape[1:]],
        "bit_order": "little",
        "plane_bytes": plane_bytes,
        "neuron": neuron,
        "plane_weight": "theta/2^t" if neuron == "modified" else "theta/T",
        "theta": theta,
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(SPIKE_MAGIC + struct.pack("<II", SPIKE_VERSION, len(hb)) + hb)
        for t in range(steps):
            fh.write(np.packbits(flat[t], bitorder="little").tobytes())


def read_spike_dump(path):
    """Returns (spikes (T, *shape) uint8, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != SPIKE_MAGIC:
        raise ValueError(f"{path}: not a spike dump")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != SPIKE_VERSION:
        raise ValueError(f"{path}: unsupported spike dump version {version}")
    header = json.loads(raw[12:12 + hlen])
    steps, pb = header["timesteps"], header["plane_bytes"]
    count = int(np.prod(header["shape"]))
    body = raw[12 + hlen:]
    if len(body) != steps * pb:
        raise ValueError(f"{path}: truncated spike dump")
    planes = np.frombuffer(body, dtype=np.uint8).reshape(steps, pb)
    bits = np.unpackbits(planes, axis=1, count=count, bitorder="little")
    return bits.reshape((steps,) + tuple(header["shape"])), header
