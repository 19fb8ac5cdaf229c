import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitsnn.ann import bits_of_levels, build_model
from bitsnn.convert import convert, shift_bn_bias
from bitsnn.snn import (encode_input_block, fire_baseline, fire_modified, read_spike_dump, rounding_offset,
                        run_snn, spike_rate, step_current, write_spike_dump)

from test_convert import random_block, random_model


def integer_oracle(u, steps):
    k = int(np.clip(np.floor(u * (1 << steps) + 0.5), 0, (1 << steps) - 1))
    return [(k >> (steps - 1 - t)) & 1 for t in range(steps)]


class TestFireModified:
    def test_hand_trace(self):
        s, _ = fire_modified(np.array([0.4 + 1 / 32]), 1.0, 4)
        np.testing.assert_array_equal(s[:, 0], [0, 1, 1, 0])

    def test_zero(self):
        s, _ = fire_modified(np.array([0.0 + rounding_offset(1.0, 4)]), 1.0, 4)
        np.testing.assert_array_equal(s[:, 0], 0)

    def test_saturates(self):
        s, _ = fire_modified(np.array([0.99 + rounding_offset(1.0, 4)]), 1.0, 4)
        np.testing.assert_array_equal(s[:, 0], 1)

    @settings(max_examples=200, deadline=None)
    @given(h=st.floats(-1, 2), steps=st.integers(1, 6))
    def test_matches_integer_oracle(self, h, steps):
        s, _ = fire_modified(np.array([h + rounding_offset(1.0, steps)]), 1.0, steps)
        assert s[:, 0].tolist() == integer_oracle(h, steps)

    def test_rate_on_grid(self, rng):
        h = rng.uniform(-0.5, 1.5, 200)
        s, _ = fire_modified(h + rounding_offset(2.0, 4), 2.0, 4)
        phi = spike_rate(s, 2.0)
        k = phi / (2.0 / 16)
        np.testing.assert_allclose(k, np.rint(k))
        assert phi.max() <= 15 / 16 * 2.0


class TestFireBaseline:
    def test_steady_drive(self):
        s, trace = fire_baseline(np.ones((5, 3)), 1.0)
        np.testing.assert_array_equal(s, 1)
        np.testing.assert_array_equal(trace[-1], 0.5)

    def test_no_drive(self):
        s, trace = fire_baseline(np.zeros((5, 3)), 1.0, 0.5)
        np.testing.assert_array_equal(s, 0)
        np.testing.assert_array_equal(trace, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**20), steps=st.integers(1, 16), theta=st.floats(0.1, 4))
    def test_conservation_identity(self, seed, steps, theta):
        z = np.random.default_rng(seed).uniform(-theta, 2 * theta, (steps, 20))
        s, trace = fire_baseline(z, theta)
        phi = s.sum(axis=0) * theta / steps
        np.testing.assert_allclose(phi + (trace[-1] - trace[0]) / steps, z.mean(axis=0), atol=1e-9)


class TestInputBlock:
    def test_thirteen_sixteenths(self):
        m = build_model(input_shape=(1, 1, 1), channels=(1,), kernel=1, num_classes=1)
        m.blocks[0].weight[:] = 1
        planes, trace = encode_input_block(convert(m), np.full((1, 1, 1, 1), 13 / 16), np.float64)
        np.testing.assert_array_equal(planes[:, 0, 0, 0, 0], [1, 1, 0, 1])

    def test_zero(self):
        m = build_model()
        planes, _ = encode_input_block(convert(m), np.zeros((2, 1, 8, 8)))
        assert not planes.any()

    def test_reconstruction(self, rng):
        m = random_model(rng, blocks=2)
        snn = convert(m)
        planes, trace = encode_input_block(snn, rng.random((3,) + m.input_shape), np.float64)
        np.testing.assert_allclose(spike_rate(planes, snn.theta[0]), trace.phi, atol=1e-12)


class TestStepCurrent:
    def test_zero_plane_is_affine_offset(self, rng):
        blk = random_block(rng)
        blk.beta = shift_bn_bias(blk.beta, blk.gamma, blk.mu, blk.sigma, 4)
        z = step_current(blk, np.zeros((1, 3, 4, 4)), 2, 1.0, 4, np.float64)
        ref = blk.beta - blk.gamma * blk.mu / blk.sigma
        np.testing.assert_allclose(z, np.broadcast_to(ref[None, :, None, None], z.shape), atol=1e-6)

    def test_shift_factor(self, rng):
        blk = random_block(rng)
        s = np.zeros((1, 3, 4, 4))
        s[0, 1, 2, 2] = 1
        base = step_current(blk, np.zeros_like(s), 1, 1.0, 4, np.float64)
        c1 = step_current(blk, s, 1, 1.0, 4, np.float64) - base
        c3 = step_current(blk, s, 3, 1.0, 4, np.float64) - base
        np.testing.assert_allclose(c3, 4 * c1, atol=1e-12)

    @pytest.mark.parametrize("t", [0, 5])
    def test_out_of_range(self, rng, t):
        with pytest.raises(ValueError):
            step_current(random_block(rng), np.zeros((1, 3, 4, 4)), t, 1.0, 4)

    def test_additivity(self, rng):
        blk = random_block(rng)
        from bitsnn.ann import block_preactivation
        shifted = random_block(rng)
        shifted.__dict__.update(blk.__dict__)
        shifted.beta = shift_bn_bias(blk.beta, blk.gamma, blk.mu, blk.sigma, 4)
        s = rng.integers(0, 2, (4, 2, 3, 4, 4))
        total = sum(step_current(shifted, s[k - 1], k, 1.0, 4, np.float64) for k in range(1, 5))
        x = sum(s[k - 1] * 2 ** (k - 1) / 16 for k in range(1, 5))
        np.testing.assert_allclose(total, block_preactivation(blk, x, np.float64), atol=1e-4)


class TestRunSnn:
    def test_modified_rejects_step_by_step(self, rng):
        with pytest.raises(ValueError, match="layer_by_layer"):
            run_snn(convert(random_model(rng)), rng.random((1, 1, 8, 8)), scheduler="step_by_step")

    def test_unknown_scheduler(self, rng):
        with pytest.raises(ValueError):
            run_snn(convert(random_model(rng)), rng.random((1, 1, 8, 8)), scheduler="async")

    def test_exact_logits_match_ann(self, rng):
        from bitsnn.ann import ann_forward
        m = random_model(rng)
        x = rng.random((4,) + m.input_shape).astype(np.float32)
        np.testing.assert_allclose(run_snn(convert(m), x).logits, ann_forward(m, x)[0], atol=1e-4)

    def test_spikes_binary_and_bitwise(self, rng):
        from bitsnn.ann import ann_forward, qcfs_levels
        m = random_model(rng)
        x = rng.random((3,) + m.input_shape)
        res = run_snn(convert(m), x, dtype=np.float64)
        _, _, pres = ann_forward(m, x, np.float64, return_preact=True)
        for blk, z, s in zip(m.blocks, pres, res.spikes):
            assert set(np.unique(s)) <= {0, 1}
            np.testing.assert_array_equal(s, bits_of_levels(qcfs_levels(z, blk.act).astype(int), 4))

    @pytest.mark.parametrize("steps", [2, 4, 8])
    def test_baseline_schedulers_identical(self, rng, steps):
        m = random_model(rng)
        snn = convert(m, steps, neuron="baseline")
        x = rng.random((3,) + m.input_shape).astype(np.float32)
        a = run_snn(snn, x, "layer_by_layer")
        b = run_snn(snn, x, "step_by_step")
        for sa, sb in zip(a.spikes, b.spikes):
            assert sa.tobytes() == sb.tobytes()
        assert a.logits.tobytes() == b.logits.tobytes()

    def test_baseline_traces_conserve(self, rng):
        m = random_model(rng)
        res = run_snn(convert(m, 8, neuron="baseline"), rng.random((2,) + m.input_shape), dtype=np.float64)
        for tr in res.traces:
            np.testing.assert_allclose(tr.phi, tr.z_avg - (tr.u_final - tr.u_init) / tr.timesteps, atol=1e-5)

    def test_ledger_scaling(self, rng):
        m = build_model(channels=(4, 4, 4))
        x = rng.random((1, 1, 8, 8))
        lbl = [run_snn(convert(m, t, neuron="baseline"), x).ledger.peak_planes for t in (2, 4, 8)]
        sbs = [run_snn(convert(m, 4, neuron="baseline"), x, "step_by_step").ledger.peak_planes]
        assert lbl[0] < lbl[1] < lbl[2]
        deep = build_model(channels=(4,) * 6)
        sbs.append(run_snn(convert(deep, 4, neuron="baseline"), x, "step_by_step").ledger.peak_planes)
        assert sbs[1] > sbs[0]
        steps_sbs = [run_snn(convert(m, t, neuron="baseline"), x, "step_by_step").ledger.peak_planes
                     for t in (2, 8)]
        assert steps_sbs[0] == steps_sbs[1]


class TestSpikeDump:
    def test_roundtrip(self, tmp_path, rng):
        s = rng.integers(0, 2, (4, 2, 3, 5, 5)).astype(np.uint8)
        p = tmp_path / "l1.spk"
        write_spike_dump(p, s, 1, 0.75)
        back, header = read_spike_dump(p)
        np.testing.assert_array_equal(back, s)
        assert header["bit_order"] == "little" and header["timesteps"] == 4 and header["theta"] == 0.75
        assert p.stat().st_size < s.size

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.spk"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            read_spike_dump(p)
