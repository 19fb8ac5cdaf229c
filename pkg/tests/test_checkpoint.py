import struct

import numpy as np
import pytest

from bitsnn.ann import AnnModel, build_model
from bitsnn.checkpoint import (ALIGN, BadMagicError, CheckpointError, TruncatedCheckpointError,
                               VersionMismatchError, load_checkpoint, save_checkpoint)
from bitsnn.convert import SnnModel, convert


def _random_model(seed=0):
    rng = np.random.default_rng(seed)
    m = build_model(channels=(3, 5), pool_after=[True, False], seed=seed)
    for b in m.blocks:
        b.mu[:] = rng.standard_normal(b.mu.shape)
        b.sigma[:] = rng.uniform(0.5, 2, b.sigma.shape)
        b.gamma[:] = rng.standard_normal(b.gamma.shape)
        b.beta[:] = rng.standard_normal(b.beta.shape)
        b.act.lam = float(rng.uniform(0.5, 2))
    return m


def _same_arrays(a, b):
    for la, lb in zip(a.blocks, b.blocks):
        for f in ("weight", "mu", "sigma", "gamma", "beta"):
            assert getattr(la, f).tobytes() == getattr(lb, f).tobytes()
        assert la.act == lb.act
    assert a.head.weight.tobytes() == b.head.weight.tobytes()
    assert a.head.bias.tobytes() == b.head.bias.tobytes()


def test_ann_roundtrip_bit_identical():
    m = _random_model()
    raw = save_checkpoint(m)
    assert raw[:4] == b"SFRG"
    back = load_checkpoint(raw)
    assert isinstance(back, AnnModel)
    _same_arrays(m, back)
    assert save_checkpoint(back) == raw


def test_snn_roundtrip_keeps_theta_and_shifted_beta():
    snn = convert(_random_model(1), 4)
    back = load_checkpoint(save_checkpoint(snn))
    assert isinstance(back, SnnModel)
    assert back.theta == snn.theta and back.timesteps == 4 and back.neuron == "modified"
    _same_arrays(snn, back)


def test_payloads_aligned():
    import json
    raw = save_checkpoint(_random_model())
    _, _, hlen = struct.unpack_from("<4sIQ", raw)
    header = json.loads(raw[16:16 + hlen])
    offs = [t["offset"] for l in header["layers"] if "tensors" in l for t in l["tensors"].values()]
    assert offs and all(o % ALIGN == 0 for o in offs)


def test_bad_magic():
    raw = bytearray(save_checkpoint(_random_model()))
    raw[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        load_checkpoint(bytes(raw))


def test_version_mismatch():
    raw = bytearray(save_checkpoint(_random_model()))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        load_checkpoint(bytes(raw))


@pytest.mark.parametrize("cut", [10, 100, -8])
def test_truncated(cut):
    raw = save_checkpoint(_random_model())
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(raw[:cut])


def test_error_classes_distinct():
    assert len({BadMagicError, VersionMismatchError, TruncatedCheckpointError}) == 3
    assert all(issubclass(e, CheckpointError) for e in (BadMagicError, VersionMismatchError, TruncatedCheckpointError))


def test_per_channel_lambda_rejected():
    import json
    raw = save_checkpoint(_random_model())
    _, ver, hlen = struct.unpack_from("<4sIQ", raw)
    header = json.loads(raw[16:16 + hlen])
    header["layers"][0]["lambda"] = [1.0, 2.0, 3.0]
    hb = json.dumps(header, separators=(",", ":")).encode()
    with pytest.raises(CheckpointError, match="per-channel"):
        load_checkpoint(struct.pack("<4sIQ", b"SFRG", ver, len(hb)) + hb + raw[16 + hlen:])
