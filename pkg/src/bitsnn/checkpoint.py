"""Binary checkpoints for ANN and SNN models.

Layout::

    b"SFRG" | u32 version | u64 header length | JSON header | pad | tensors

All integers are little-endian. Every tensor payload is little-endian
binary32, starts at a 64-byte aligned absolute file offset and is described
in the header by ``{"shape", "offset", "nbytes"}``. The JSON is written with
a fixed key order and no timestamps, so equal models give equal bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .ann import AnnModel, AvgPool, ConvBnBlock, LinearHead, QcfsActivation

MAGIC = b"SFRG"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


class _Payload:
    def __init__(self):
        self.arrays = []

    def add(self, arr) -> dict:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        self.arrays.append(arr)
        # offset is patched once the header size is known
        return {"shape": list(arr.shape), "index": len(self.arrays) - 1, "nbytes": arr.nbytes}


def _block_entry(block: ConvBnBlock, payload: _Payload) -> dict:
    return {
        "type": "conv_bn_qcfs",
        "stride": block.stride,
        "padding": block.padding,
        "lambda": block.act.lam,
        "q_steps": block.act.q_steps,
        "clip_hi": block.act.clip_hi,
        "tensors": {
            "weight": payload.add(block.weight),
            "bn.mu": payload.add(block.mu),
            "bn.sigma": payload.add(block.sigma),
            "bn.gamma": payload.add(block.gamma),
            "bn.beta": payload.add(block.beta),
        },
    }


def save_checkpoint(model) -> bytes:
    """Serialize an AnnModel or SnnModel to bytes."""
    from .convert import SnnModel

    payload = _Payload()
    layers = []
    for layer in model.layers:
        if isinstance(layer, ConvBnBlock):
            layers.append(_block_entry(layer, payload))
        elif isinstance(layer, AvgPool):
            layers.append({"type": "avgpool", "size": layer.size})
        else:
            raise TypeError(f"cannot serialize layer {type(layer).__name__}")
    header = {
        "kind": "snn" if isinstance(model, SnnModel) else "ann",
        "q_steps": model.q_steps,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": layers,
        "head": {"weight": payload.add(model.head.weight), "bias": payload.add(model.head.bias)},
        "meta": model.meta,
    }
    if isinstance(model, SnnModel):
        header["snn"] = {
            "timesteps": model.timesteps,
            "neuron": model.neuron,
            "theta": list(model.theta),
            "u0_fraction": model.u0_fraction,
            "exact": model.exact,
        }

    # two passes: offsets depend on the header length, which depends on the offsets
    offsets = [0] * len(payload.arrays)
    for _ in range(4):
        hb = _encode_header(header, offsets)
        start = _align(_PREFIX.size + len(hb))
        new = []
        pos = start
        for arr in payload.arrays:
            new.append(pos)
            pos = _align(pos + arr.nbytes)
        if new == offsets:
            break
        offsets = new
    hb = _encode_header(header, offsets)
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, VERSION, len(hb)))
    buf.write(hb)
    for off, arr in zip(offsets, payload.arrays):
        buf.write(b"\0" * (off - buf.tell()))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _encode_header(header: dict, offsets) -> bytes:
    def fix(obj):
        if isinstance(obj, dict):
            if "index" in obj and "nbytes" in obj:
                return {"shape": obj["shape"], "offset": offsets[obj["index"]], "nbytes": obj["nbytes"]}
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [fix(v) for v in obj]
        return obj

    return json.dumps(fix(header), separators=(",", ":")).encode("utf-8")


def _tensor(raw: bytes, entry: dict) -> np.ndarray:
    off, nbytes = entry["offset"], entry["nbytes"]
    if off + nbytes > len(raw):
        raise TruncatedCheckpointError(f"tensor at offset {off} runs past end of file ({len(raw)} bytes)")
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if count * 4 != nbytes:
        raise CheckpointError(f"tensor size mismatch: shape {entry['shape']} vs {nbytes} bytes")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(entry["shape"])


def load_checkpoint(raw: bytes):
    """Inverse of :func:`save_checkpoint`; returns AnnModel or SnnModel."""
    from .convert import SnnModel

    if len(raw) < _PREFIX.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise BadMagicError("not a checkpoint: bad magic")
        raise TruncatedCheckpointError("file shorter than checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    if _PREFIX.size + hlen > len(raw):
        raise TruncatedCheckpointError("header runs past end of file")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc

    layers = []
    for entry in header["layers"]:
        if entry["type"] == "avgpool":
            layers.append(AvgPool(int(entry["size"])))
            continue
        if entry["type"] != "conv_bn_qcfs":
            raise CheckpointError(f"unknown layer type {entry['type']!r}")
        if isinstance(entry["lambda"], list):
            raise CheckpointError("per-channel thresholds are not supported; lambda must be a scalar")
        t = entry["tensors"]
        layers.append(ConvBnBlock(
            weight=_tensor(raw, t["weight"]),
            mu=_tensor(raw, t["bn.mu"]),
            sigma=_tensor(raw, t["bn.sigma"]),
            gamma=_tensor(raw, t["bn.gamma"]),
            beta=_tensor(raw, t["bn.beta"]),
            act=QcfsActivation(entry["lambda"], entry["q_steps"], entry["clip_hi"]),
            stride=entry["stride"], padding=entry["padding"]))
    head = LinearHead(_tensor(raw, header["head"]["weight"]), _tensor(raw, header["head"]["bias"]))
    common = dict(layers=layers, head=head, input_shape=tuple(header["input_shape"]),
                  num_classes=header["num_classes"], q_steps=header["q_steps"], meta=header.get("meta", {}))
    if header["kind"] == "snn":
        s = header["snn"]
        if any(isinstance(t, list) for t in s["theta"]):
            raise CheckpointError("per-channel thresholds are not supported")
        return SnnModel(theta=s["theta"], timesteps=s["timesteps"], neuron=s["neuron"],
                        u0_fraction=s.get("u0_fraction", 0.5), **common)
    if header["kind"] != "ann":
        raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    return AnnModel(**common)


def save_file(model, path) -> None:
    Path(path).write_bytes(save_checkpoint(model))


def load_file(path):
    return load_checkpoint(Path(path).read_bytes())
