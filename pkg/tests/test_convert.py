import itertools

import numpy as np
import pytest

from bitsnn.ann import AnnModel, ConvBnBlock, LinearHead, QcfsActivation, build_model
from bitsnn.convert import check_condition_i, condition_i_deviation, convert, shift_bn_bias, verify_lossless


def random_block(rng, cin=3, cout=4, k=3):
    return ConvBnBlock(weight=rng.standard_normal((cout, cin, k, k)) * 0.5,
                       mu=rng.standard_normal(cout), sigma=rng.uniform(0.5, 2.0, cout),
                       gamma=rng.uniform(0.5, 1.5, cout) * rng.choice([-1, 1], cout),
                       beta=rng.standard_normal(cout), act=QcfsActivation(1.0, 16), padding=k // 2)


def random_model(rng, blocks=None, channels_max=16, q=16):
    blocks = blocks or int(rng.integers(2, 5))
    channels = tuple(int(c) for c in rng.integers(2, channels_max + 1, blocks))
    pools = [False] * blocks
    if blocks >= 2 and rng.random() < 0.5:
        pools[int(rng.integers(0, blocks))] = True
    m = build_model(channels=channels, pool_after=pools, q_steps=q, seed=int(rng.integers(1 << 30)))
    for b in m.blocks:
        c = b.out_channels
        b.mu[:] = rng.normal(0, 0.3, c)
        b.sigma[:] = rng.uniform(0.5, 1.5, c)
        b.gamma[:] = rng.uniform(0.5, 1.5, c)
        b.beta[:] = rng.normal(0.2, 0.3, c)
        b.act.lam = float(rng.uniform(0.5, 2.0))
    return m


class TestShiftBnBias:
    def test_worked_value(self):
        assert shift_bn_bias(0.8, 1.0, 0.2, 1.0, 4) == pytest.approx(0.35, abs=1e-15)

    def test_single_step_identity(self, rng):
        beta = rng.standard_normal(5)
        np.testing.assert_array_equal(
            shift_bn_bias(beta, rng.standard_normal(5), rng.standard_normal(5), rng.uniform(1, 2, 5), 1), beta)

    def test_zero_case(self):
        np.testing.assert_array_equal(shift_bn_bias(np.zeros(3), np.ones(3), np.zeros(3), np.ones(3), 4), 0)

    def test_zero_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            shift_bn_bias(1.0, 1.0, 1.0, 0.0, 4)


class TestConvert:
    def test_only_beta_changes(self, rng):
        ann = random_model(rng, blocks=3)
        snn = convert(ann, 4)
        for i, (a, s) in enumerate(zip(ann.blocks, snn.blocks)):
            for f in ("weight", "mu", "sigma", "gamma"):
                assert getattr(a, f).tobytes() == getattr(s, f).tobytes()
            if i == 0:
                assert a.beta.tobytes() == s.beta.tobytes()
            else:
                assert not np.array_equal(a.beta, s.beta)
        assert snn.head.weight.tobytes() == ann.head.weight.tobytes()

    def test_theta_equals_lambda(self, rng):
        ann = random_model(rng)
        assert convert(ann).theta == [b.act.lam for b in ann.blocks]

    def test_single_step_leaves_beta(self, rng):
        ann = random_model(rng)
        snn = convert(ann, 1)
        for a, s in zip(ann.blocks, snn.blocks):
            np.testing.assert_array_equal(a.beta, s.beta)

    def test_input_not_mutated(self, rng):
        ann = random_model(rng)
        before = [b.beta.copy() for b in ann.blocks]
        convert(ann, 4)
        for b, old in zip(ann.blocks, before):
            np.testing.assert_array_equal(b.beta, old)

    def test_exact_mode_guards(self, rng):
        ann = random_model(rng)
        with pytest.raises(ValueError, match="log2"):
            convert(ann, 3, exact=True)
        assert convert(ann, 4, exact=True).exact
        assert not convert(ann, 3).exact

    def test_baseline_keeps_beta(self, rng):
        ann = random_model(rng)
        snn = convert(ann, 4, neuron="baseline")
        for a, s in zip(ann.blocks, snn.blocks):
            np.testing.assert_array_equal(a.beta, s.beta)


class TestConditionI:
    def test_random_trials_float32(self, rng):
        assert check_condition_i(random_block(rng), 4, trials=100, rng=1, dtype=np.float32) <= 1e-4

    def test_random_trials_float64(self, rng):
        assert check_condition_i(random_block(rng), 4, trials=100, rng=2) <= 1e-8

    def test_single_step(self, rng):
        assert check_condition_i(random_block(rng), 1, trials=10, rng=3) <= 1e-12

    def test_unshifted_negative_control(self, rng):
        blk = random_block(rng)
        assert check_condition_i(blk, 4, trials=10, rng=4, beta_c=blk.beta) >= 1e-2

    def test_exhaustive_micro_block(self, rng):
        # 1x1 conv, 2 inputs, T=2: all 2^(2*2) = 16 patterns
        blk = random_block(rng, cin=2, cout=3, k=1)
        beta_c = shift_bn_bias(blk.beta, blk.gamma, blk.mu, blk.sigma, 2)
        worst = 0.0
        for bits in itertools.product((0, 1), repeat=4):
            s = np.array(bits, dtype=np.float64).reshape(2, 1, 2, 1, 1)
            worst = max(worst, condition_i_deviation(blk, beta_c, s))
        assert worst <= 1e-6


class TestVerifyLossless:
    def test_random_models(self, rng):
        for _ in range(10):
            ann = random_model(rng)
            x = rng.random((4,) + ann.input_shape)
            rep = verify_lossless(ann, convert(ann, 4), x)
            assert rep.bits_equal and rep.max_deviation <= 1e-4

    def test_zero_input_zero_bias(self):
        m = build_model(channels=(3, 4))
        m.head.bias[:] = 0
        rep = verify_lossless(m, convert(m), np.zeros((2, 1, 8, 8)))
        assert rep.max_deviation == 0.0

    def test_degraded_steps_deviate(self, rng):
        ann = random_model(rng, blocks=2)
        rep = verify_lossless(ann, convert(ann, 3), rng.random((8,) + ann.input_shape))
        assert rep.max_deviation > 1e-4

    def test_report_dict(self, rng):
        ann = random_model(rng, blocks=2)
        d = verify_lossless(ann, convert(ann), rng.random((2,) + ann.input_shape)).as_dict(1e-4)
        assert d["passed"] and len(d["layers"]) == 2
