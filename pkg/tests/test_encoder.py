"""Graph convolution, the deep residual stack, and the dual-channel encoder."""

import math

import numpy as np
import pytest

from conftest import assert_grad_matches
from hcl import encoder as enc
from hcl.tensor import Tape, Tensor


def test_xavier_bounds():
    rng = np.random.default_rng(0)
    w = enc.xavier_uniform(rng, 30, 50)
    limit = math.sqrt(6.0 / 80.0)
    assert w.shape == (30, 50)
    assert np.all(np.abs(w) <= limit)
    assert np.abs(w).max() > 0.5 * limit  # actually spread out


class TestGcnLayer:
    def test_identity_propagation_passes_nonnegative_input(self):
        tape = Tape()
        layer = enc.GcnLayer(tape, np.random.default_rng(0), 3, 3, "g")
        layer.weight.data[:] = np.eye(3)
        x = Tensor(np.abs(np.random.default_rng(1).standard_normal((4, 3))))
        out = enc.gcn_forward(layer, np.eye(4), x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_matches_direct_evaluation(self):
        tape = Tape()
        layer = enc.GcnLayer(tape, np.random.default_rng(2), 2, 2, "g")
        w = np.array([[1.0, -2.0], [0.5, 0.25]])
        layer.weight.data[:] = w
        prop = np.full((2, 2), 0.5)
        x = np.array([[1.0, 2.0], [-1.0, 0.5]])
        raw = prop @ x @ w
        expected = np.where(raw > 0, raw, 0.25 * raw)
        out = enc.gcn_forward(layer, prop, Tensor(x))
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        layer = enc.GcnLayer(tape, rng, 3, 2, "g")
        prop = Tensor(rng.random((5, 5)))
        x = Tensor(rng.standard_normal((5, 3)))

        from hcl.tensor import sum_all
        assert_grad_matches(lambda: sum_all(layer.forward(prop, x)),
                            [layer.weight, layer.slope])


class TestGcniiStack:
    def test_alpha_one_ignores_propagation(self):
        rng = np.random.default_rng(4)
        tape = Tape()
        stack = enc.GcniiStack(tape, rng, 3, 4, layers=2, alpha=1.0, lam=0.5, name="s")
        x = Tensor(rng.standard_normal((6, 3)))
        out_a = stack.forward(Tensor(np.eye(6)), x)
        out_b = stack.forward(Tensor(rng.random((6, 6))), x)
        np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)

    def test_matches_hand_loop_oracle(self):
        rng = np.random.default_rng(5)
        tape = Tape()
        alpha, lam, layers = 0.1, 0.5, 3
        stack = enc.GcniiStack(tape, rng, 3, 4, layers=layers, alpha=alpha, lam=lam,
                               name="s")
        prop = rng.random((5, 5))
        x = rng.standard_normal((5, 3))
        out = stack.forward(Tensor(prop), Tensor(x))

        h0 = x @ stack.input_projection.data
        h = h0
        for l, (weight, slope, beta) in enumerate(stack.layers, start=1):
            assert beta == math.log(lam / l + 1.0)
            support = (1 - alpha) * (prop @ h) + alpha * h0
            mixed = (1 - beta) * support + beta * (support @ weight.data)
            h = np.where(mixed > 0, mixed, slope.data[0, 0] * mixed)
        np.testing.assert_allclose(out.data, h, atol=1e-12)

    def test_beta_zero_ignores_weights(self):
        rng = np.random.default_rng(6)
        tape = Tape()
        stack = enc.GcniiStack(tape, rng, 2, 3, layers=2, alpha=0.2, lam=0.5, name="s")
        # force beta = 0 on every layer; weights must then be inert
        stack.layers = [(w, s, 0.0) for (w, s, _) in stack.layers]
        prop = rng.random((4, 4))
        x = rng.standard_normal((4, 2))
        before = stack.forward(Tensor(prop), Tensor(x)).data
        for w, _, _ in stack.layers:
            w.data[:] = rng.standard_normal(w.data.shape)
        after = stack.forward(Tensor(prop), Tensor(x)).data
        np.testing.assert_allclose(before, after, atol=1e-12)

    def test_single_node_scalar_recurrence(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        alpha, lam = 0.3, 0.5
        stack = enc.GcniiStack(tape, rng, 1, 1, layers=4, alpha=alpha, lam=lam,
                               name="s")
        x = 1.7
        out = stack.forward(Tensor([[1.0]]), Tensor([[x]])).item()
        h0 = x * stack.input_projection.data[0, 0]
        h = h0
        for l, (weight, slope, beta) in enumerate(stack.layers, start=1):
            support = (1 - alpha) * h + alpha * h0
            mixed = (1 - beta) * support + beta * support * weight.data[0, 0]
            h = mixed if mixed > 0 else slope.data[0, 0] * mixed
        assert out == pytest.approx(h, abs=1e-14)

    def test_pure_propagation_reduction(self):
        # alpha=0, beta=0, one linear layer: output is prop @ H0 exactly
        rng = np.random.default_rng(8)
        tape = Tape()
        stack = enc.GcniiStack(tape, rng, 2, 2, layers=1, alpha=0.0, lam=0.5, name="s")
        stack.layers = [(stack.layers[0][0], stack.layers[0][1], 0.0)]
        prop = rng.random((4, 4))
        x = rng.standard_normal((4, 2))
        h0 = x @ stack.input_projection.data
        raw = prop @ h0
        expected = np.where(raw > 0, raw, 0.25 * raw)  # sigma still applies
        out = stack.forward(Tensor(prop), Tensor(x))
        np.testing.assert_allclose(out.data, expected, atol=1e-13)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(9)
        tape = Tape()
        stack = enc.GcniiStack(tape, rng, 2, 3, layers=2, alpha=0.1, lam=0.5, name="s")
        prop = Tensor(rng.random((4, 4)))
        x = Tensor(rng.standard_normal((4, 2)))

        from hcl.tensor import sum_all
        params = [stack.input_projection] + [w for w, _, _ in stack.layers] \
            + [s for _, s, _ in stack.layers]
        assert_grad_matches(lambda: sum_all(stack.forward(prop, x)), params)


class TestDualChannel:
    def test_channels_differ_after_init(self):
        rng = np.random.default_rng(10)
        tape = Tape()
        dual = enc.DualChannelEncoder(tape, rng, 3, 8)
        x = Tensor(rng.standard_normal((6, 3)))
        prop = Tensor(np.eye(6))
        h1, h2 = dual.forward(prop, x)
        assert h1.shape == (6, 8) and h2.shape == (6, 8)
        assert np.abs(h1.data - h2.data).max() > 1e-6

    def test_copying_parameters_makes_channels_equal(self):
        rng = np.random.default_rng(11)
        tape = Tape()
        dual = enc.DualChannelEncoder(tape, rng, 3, 4, depth=2)
        for l1, l2 in zip(dual.channel1, dual.channel2):
            l2.weight.data[:] = l1.weight.data
            l2.slope.data[:] = l1.slope.data
        x = Tensor(rng.standard_normal((5, 3)))
        prop = Tensor(rng.random((5, 5)))
        h1, h2 = dual.forward(prop, x)
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_single_channel_mode(self):
        tape = Tape()
        dual = enc.DualChannelEncoder(tape, np.random.default_rng(0), 3, 4, dual=False)
        h1, h2 = dual.forward(Tensor(np.eye(2)), Tensor(np.zeros((2, 3))))
        assert h2 is None

    def test_default_hidden_width(self):
        rng = np.random.default_rng(12)
        tape = Tape()
        dual = enc.DualChannelEncoder(tape, rng, 7, 512)
        x = Tensor(rng.standard_normal((4, 7)))
        h1, h2 = dual.forward(Tensor(np.eye(4)), x)
        assert h1.shape == (4, 512) and h2.shape == (4, 512)

    def test_outputs_finite_for_large_inputs(self):
        rng = np.random.default_rng(13)
        tape = Tape()
        dual = enc.DualChannelEncoder(tape, rng, 5, 16)
        x = Tensor(rng.uniform(-1e3, 1e3, (10, 5)))
        prop = Tensor(np.eye(10))
        h1, h2 = dual.forward(prop, x)
        assert np.all(np.isfinite(h1.data)) and np.all(np.isfinite(h2.data))
