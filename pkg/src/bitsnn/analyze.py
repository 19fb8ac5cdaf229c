"""Conversion-error decomposition, spiking activity, op counts and energy."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ann import AnnModel, AvgPool, ConvBnBlock, ann_forward, layer_shapes
from .snn import fire_baseline, run_snn

REPORT_SCHEMA = "bitsnn.report"
REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# conversion errors
# ---------------------------------------------------------------------------

def expected_quantization_error(theta: float, timesteps: int) -> float:
    """Mean |x - round(x)| for x uniform on [0, theta] and resolution theta/T: theta/(4T)."""
    return theta / (4.0 * timesteps)


def uniform_drive_error(theta: float, timesteps: int, samples: int = 100_000, seed: int = 0,
                        u0: float | None = None) -> float:
    """Empirical mean |Z - phi(T)| of the baseline IF under constant drive Z ~ U[0, theta]."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, theta, size=samples)
    spikes, _ = fire_baseline(np.broadcast_to(z, (timesteps, samples)).copy(), theta, u0)
    phi = spikes.sum(axis=0) * (theta / timesteps)
    return float(np.mean(np.abs(z - phi)))


def rate_identity_gap(trace) -> float:
    """max |phi - (Z - (u(T) - u(0)) / T)| for one baseline trace."""
    rhs = trace.z_avg - (trace.u_final - trace.u_init) / trace.timesteps
    return float(np.max(np.abs(trace.phi - rhs))) if trace.phi.size else 0.0


@dataclass
class LayerErrors:
    layer: int
    neuron: str
    theta: float
    timesteps: int
    expected_quantization_err: float
    quantization_err: float
    clipping_err: float
    deviation_err: float
    residual_err: float | None


@dataclass
class ErrorDecomposition:
    reference: str
    layers: list = field(default_factory=list)

    def by_neuron(self, neuron: str) -> list:
        return [l for l in self.layers if l.neuron == neuron]

    def as_dict(self) -> dict:
        return {"reference": self.reference, "layers": [asdict(l) for l in self.layers]}


def _masked_mean(x, mask) -> float:
    return float(np.mean(x[mask])) if np.any(mask) else 0.0


def _ideal_response(trace, neuron: str, u0_fraction: float):
    """What the neuron would output for its own total input, delivered evenly."""
    theta, steps = trace.theta, trace.timesteps
    if neuron == "modified":
        top = (1 << steps) - 1
        levels = np.clip(np.floor(trace.current_sum.astype(np.float64) * (1 << steps) / theta + 0.5), 0, top)
        return levels * (theta / (1 << steps))
    z = np.broadcast_to(trace.z_avg, (steps,) + trace.z_avg.shape).copy()
    spikes, _ = fire_baseline(z, theta, u0_fraction * theta)
    return spikes.astype(np.float64).sum(axis=0) * (theta / steps)


def layer_errors(a_ref, h, trace, neuron: str, layer: int, u0_fraction: float = 0.5) -> LayerErrors:
    """Split |a_ref - phi| for one layer.

    quantization: mean over entries whose pre-activation h is inside (0, theta);
    clipping: mean over all entries of the mismatch where h >= theta;
    deviation: mean |phi - ideal(total input)|, the part caused by uneven
    arrival of input over time (zero for the modified neuron);
    residual: mean |(u(T) - u(0)) / T| for the baseline neuron.
    """
    theta, steps = trace.theta, trace.timesteps
    phi = trace.phi.astype(np.float64)
    diff = np.abs(np.asarray(a_ref, dtype=np.float64) - phi)
    h = np.asarray(h, dtype=np.float64)
    interior = (h > 0) & (h < theta)
    clipped = h >= theta
    deviation = float(np.mean(np.abs(phi - _ideal_response(trace, neuron, u0_fraction))))
    residual = None
    if neuron == "baseline":
        residual = float(np.mean(np.abs((trace.u_final - trace.u_init) / steps)))
    return LayerErrors(
        layer=layer, neuron=neuron, theta=theta, timesteps=steps,
        expected_quantization_err=expected_quantization_error(theta, steps),
        quantization_err=_masked_mean(diff, interior),
        clipping_err=float(np.mean(diff * clipped)) if diff.size else 0.0,
        deviation_err=deviation,
        residual_err=residual,
    )


def decompose_errors(ann: AnnModel, snn_baseline, snn_modified, inputs, reference: str = "quantized",
                     dtype=np.float64) -> ErrorDecomposition:
    """Per-layer quantization / clipping / deviation errors for both neuron models.

    ``reference`` picks what the SNN rate is compared against: the quantized
    ANN activation (``"quantized"``) or the float ReLU of the ANN
    pre-activation (``"relu"``).
    """
    if reference not in ("quantized", "relu"):
        raise ValueError("reference must be 'quantized' or 'relu'")
    _, acts, pres = ann_forward(ann, inputs, dtype=dtype, return_preact=True)
    out = ErrorDecomposition(reference=reference)
    for snn in (snn_baseline, snn_modified):
        if snn is None:
            continue
        res = run_snn(snn, inputs, dtype=dtype)
        for li, (a, h, trace) in enumerate(zip(acts, pres, res.traces)):
            a_ref = a if reference == "quantized" else np.maximum(h, 0)
            out.layers.append(layer_errors(a_ref, h, trace, snn.neuron, li + 1, snn.u0_fraction))
    return out


# ---------------------------------------------------------------------------
# activity
# ---------------------------------------------------------------------------

def spiking_activity(trains) -> dict:
    """Density of ones per layer and overall (each train is (T, ...) binary)."""
    layers = []
    ones = total = 0
    for tr in trains:
        tr = np.asarray(tr)
        if tr.size and (tr.min() < 0 or tr.max() > 1):
            raise ValueError("spike trains must be binary")
        o, n = int(np.count_nonzero(tr)), int(tr.size)
        steps = tr.shape[0] if tr.ndim else 0
        per_step = [float(np.count_nonzero(tr[t]) / tr[t].size) if tr[t].size else 0.0 for t in range(steps)]
        layers.append({"density": o / n if n else 0.0, "per_step": per_step})
        ones += o
        total += n
    return {"layers": layers, "overall": ones / total if total else 0.0}


# ---------------------------------------------------------------------------
# op counting and energy
# ---------------------------------------------------------------------------

OP_FIELDS = ("macs", "acs", "input_shifts", "threshold_shifts", "comparisons", "resets",
             "potential_updates", "pool_adds")


@dataclass
class LayerOps:
    name: str
    macs: int = 0
    acs: float = 0.0
    input_shifts: int = 0
    threshold_shifts: int = 0
    comparisons: int = 0
    resets: int = 0
    potential_updates: int = 0
    pool_adds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def ac_shift_ratio(density: float, kernel: int, c_in: int) -> float:
    """Spiking-conv ACs per left shift for one output entry: s * k^2 * c_in."""
    return density * kernel * kernel * c_in


def _density_table(densities, n_blocks: int, steps: int) -> np.ndarray:
    d = np.asarray(densities, dtype=np.float64)
    if d.ndim == 0:
        d = np.full((n_blocks, steps), float(d))
    elif d.ndim == 1:
        if d.shape[0] != n_blocks:
            raise ValueError(f"need one density per block ({n_blocks}), got {d.shape[0]}")
        d = np.repeat(d[:, None], steps, axis=1)
    elif d.shape != (n_blocks, steps):
        raise ValueError(f"densities must have shape ({n_blocks}, {steps}), got {d.shape}")
    if np.any(d < 0) or np.any(d > 1):
        raise ValueError("densities must lie in [0, 1]")
    return d


def count_ops(model, densities, timesteps: int, neuron: str = "modified") -> list[LayerOps]:
    """Per-layer operation counts for one inference of one sample.

    ``densities[b][t]`` is the spike density of block b's output at step t
    (a scalar or per-block value is broadcast). Layer 1 runs once on the
    analog input and is charged as MACs; later blocks and the head receive
    spikes and are charged ACs = sum_t s_t * k^2 * c_in * c_out * H * W.
    Input left shifts are c_out * H * W per step (one per produced current
    entry); threshold shifts are one per spiking layer per step.
    """
    steps = timesteps
    blocks = [l for l in model.layers if isinstance(l, ConvBnBlock)]
    dens = _density_table(densities, len(blocks), steps)
    shapes = layer_shapes(model)
    shifting = neuron == "modified"
    ops = []
    bi = -1
    in_density = None
    for layer, (cin, hin, win), (cout, hout, wout) in zip(model.layers, shapes[:-1], shapes[1:]):
        if isinstance(layer, AvgPool):
            ops.append(LayerOps(name=f"pool{len(ops) + 1}",
                                pool_adds=float(in_density.sum() * cin * hin * win)))
            continue
        bi += 1
        neurons = cout * hout * wout
        fan = layer.kernel * layer.kernel * cin * neurons
        lo = LayerOps(name=f"block{bi + 1}", comparisons=neurons * steps, resets=neurons * steps,
                      threshold_shifts=steps if shifting else 0)
        if bi == 0:
            lo.macs = fan
        else:
            lo.acs = float(in_density.sum() * fan)
            lo.input_shifts = neurons * steps if shifting else 0
            lo.potential_updates = neurons * steps
        ops.append(lo)
        in_density = dens[bi]
    feats = int(np.prod(shapes[-1]))
    k = model.num_classes
    ops.append(LayerOps(name="head", acs=float(in_density.sum() * feats * k),
                        input_shifts=k * steps if shifting else 0, potential_updates=k * steps))
    return ops


class EnergyTableError(KeyError):
    pass


DEFAULT_PJ = {
    32: {"mult": 3.1, "add": 0.1, "shift": 0.13, "comparator": 0.08},
    8: {"mult": 0.2, "add": 0.03, "shift": 0.024, "comparator": 0.03},
}
DEFAULT_PROVENANCE = ("built-in defaults: 45 nm CMOS per-operation energies in pJ at 32- and 8-bit "
                      "width; a reset is charged as an addition")


@dataclass
class EnergyTable:
    values: dict = field(default_factory=lambda: {w: dict(v) for w, v in DEFAULT_PJ.items()})
    provenance: str = DEFAULT_PROVENANCE

    def pj(self, op: str, width: int) -> float:
        if op == "reset":
            op = "add"
        try:
            v = self.values[width][op]
        except KeyError:
            raise EnergyTableError(f"energy table has no entry for {op!r} at {width} bits") from None
        if not v > 0:
            raise ValueError(f"energy for {op!r} at {width} bits must be positive")
        return float(v)

    @classmethod
    def from_json(cls, path) -> "EnergyTable":
        raw = json.loads(Path(path).read_text())
        values = {int(w): {k: float(v) for k, v in ops.items()} for w, ops in raw["values"].items()}
        return cls(values=values, provenance=raw.get("provenance", str(path)))

    def as_dict(self) -> dict:
        return {"values": {str(w): dict(v) for w, v in sorted(self.values.items(), reverse=True)},
                "provenance": self.provenance}


# op -> list of table entries charged per count
_CHARGES = {
    "macs": ("mult", "add"),
    "acs": ("add",),
    "input_shifts": ("shift",),
    "threshold_shifts": ("shift",),
    "comparisons": ("comparator",),
    "resets": ("reset",),
    "potential_updates": ("add",),
    "pool_adds": ("add",),
}


@dataclass
class EnergyReport:
    width: int
    layers: list
    total_pj: float
    shift_pj: float
    densities: list | None = None

    @property
    def shift_share(self) -> float:
        return self.shift_pj / self.total_pj if self.total_pj else 0.0

    def as_dict(self) -> dict:
        return {"width": self.width, "total_pj": self.total_pj, "shift_pj": self.shift_pj,
                "shift_share": self.shift_share, "densities": self.densities, "layers": self.layers}


def estimate_energy(ops: list[LayerOps], table: EnergyTable | None = None, width: int = 32,
                    densities=None) -> EnergyReport:
    table = table or EnergyTable()
    unit = {op: sum(table.pj(e, width) for e in entries) for op, entries in _CHARGES.items()}
    layers = []
    total = shift = 0.0
    for lo in ops:
        energies = {op: getattr(lo, op) * unit[op] for op in OP_FIELDS}
        e = sum(energies.values())
        total += e
        shift += energies["input_shifts"] + energies["threshold_shifts"]
        layers.append({"name": lo.name, "counts": {op: getattr(lo, op) for op in OP_FIELDS},
                       "energy_pj": energies, "total_pj": e})
    dens = None if densities is None else np.asarray(densities, dtype=float).tolist()
    return EnergyReport(width=width, layers=layers, total_pj=total, shift_pj=shift, densities=dens)


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------

def accuracy_vs_timesteps(ann: AnnModel, images, labels, timesteps_list, dtype=np.float64) -> dict:
    """ANN accuracy and modified-SNN accuracy for each T (degraded below log2 Q)."""
    from .convert import convert

    logits, _ = ann_forward(ann, images, dtype=dtype)
    ann_acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    rows = []
    for steps in timesteps_list:
        snn = convert(ann, steps)
        res = run_snn(snn, images, dtype=dtype)
        rows.append({"timesteps": int(steps), "exact": snn.exact,
                     "snn_accuracy": float(np.mean(np.argmax(res.logits, axis=1) == labels))})
    return {"ann_accuracy": ann_acc, "rows": rows}


def emit_report(*, model_info: dict | None = None, errors: ErrorDecomposition | None = None,
                activity: dict | None = None, energy: EnergyReport | None = None,
                table: EnergyTable | None = None, sweep: dict | None = None,
                extra: dict | None = None) -> str:
    """Schema-versioned JSON with a fixed section order."""
    doc = {"schema": REPORT_SCHEMA, "schema_version": REPORT_SCHEMA_VERSION}
    doc["model"] = model_info or {}
    doc["errors"] = errors.as_dict() if errors is not None else None
    doc["activity"] = activity
    doc["energy"] = energy.as_dict() if energy is not None else None
    doc["energy_table"] = (table or EnergyTable()).as_dict()
    doc["accuracy_vs_timesteps"] = sweep
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
