import math

import numpy as np
import pytest

from talkmesh.errors import ContractError
from talkmesh.gradcheck import max_grad_error
from talkmesh.ssm import (
    MambaLayer,
    SsmConfig,
    SsmCore,
    discretize,
    scan_chunked,
    scan_sequential,
    selective_scan,
)
from talkmesh.tensor import Tensor


def random_scan_inputs(rng, B=2, T=16, C=3, N=16):
    # decaying a_bar in (0,1), as produced by discretization of negative A
    a = rng.uniform(0.05, 0.95, size=(B, T, C, N))
    b = rng.normal(size=(B, T, C, N))
    c = rng.normal(size=(B, T, N))
    x = rng.normal(size=(B, T, C))
    h0 = rng.normal(size=(B, C, N))
    return a, b, c, x, h0


class TestDiscretize:
    def test_analytic_log2(self):
        a_bar, b_bar = discretize(np.array([[-1.0]]), np.array([1.0]),
                                  np.array([math.log(2.0)]))
        assert abs(a_bar[0, 0] - 0.5) < 1e-9
        assert abs(b_bar[0, 0] - 0.5) < 1e-9

    def test_analytic_exp2(self):
        a_bar, b_bar = discretize(np.array([[-2.0]]), np.array([1.0]),
                                  np.array([1.0]))
        assert abs(a_bar[0, 0] - math.exp(-2.0)) < 1e-9
        assert abs(b_bar[0, 0] - (1.0 - math.exp(-2.0)) / 2.0) < 1e-9

    def test_small_delta_limit(self):
        a_bar, b_bar = discretize(np.array([[-1.0]]), np.array([1.0]),
                                  np.array([1e-6]))
        assert abs(a_bar[0, 0] - (1.0 - 1e-6)) < 1e-9
        assert abs(b_bar[0, 0] - 1e-6) < 1e-9

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ContractError):
            discretize(np.array([[-1.0]]), np.array([1.0]), np.array([0.0]))

    def test_stability_a_bar_in_unit_interval(self, rng):
        A = -np.exp(rng.normal(size=(5, 16)))
        delta = np.exp(rng.normal(size=(3, 5)))  # arbitrary positive
        a_bar, _ = discretize(A, rng.normal(size=(3, 16)), delta)
        assert np.all(a_bar > 0) and np.all(a_bar < 1)


class TestScan:
    def test_impulse_geometric_decay(self):
        T = 8
        a = np.full((1, T, 1, 1), 0.5)
        b = np.ones((1, T, 1, 1))
        c = np.ones((1, T, 1))
        x = np.zeros((1, T, 1))
        x[0, 0, 0] = 1.0
        y, _ = scan_sequential(a, b, c, x, np.zeros((1, 1, 1)))
        assert np.allclose(y[0, :, 0], 0.5 ** np.arange(T))

    def test_constant_input_saturates(self):
        T = 12
        a = np.full((1, T, 1, 1), 0.5)
        b = np.full((1, T, 1, 1), 0.5)
        c = np.ones((1, T, 1))
        x = np.ones((1, T, 1))
        y, _ = scan_sequential(a, b, c, x, np.zeros((1, 1, 1)))
        expected = 1.0 - 0.5 ** (np.arange(T) + 1)
        assert np.allclose(y[0, :, 0], expected)

    def test_chunked_matches_sequential_100_configs(self, rng):
        for _ in range(100):
            T = int(rng.integers(1, 129))
            B = int(rng.integers(1, 3))
            C = int(rng.integers(1, 5))
            a, b, c, x, h0 = random_scan_inputs(rng, B=B, T=T, C=C, N=16)
            y_seq, h_seq = scan_sequential(a, b, c, x, h0)
            y_par, h_par = scan_chunked(a, b, c, x, h0)
            scale = max(1.0, np.abs(y_seq).max())
            assert np.abs(y_par - y_seq).max() / scale < 1e-10
            assert np.allclose(h_par, h_seq, rtol=1e-10, atol=1e-12)

    def test_sequential_causality_bitwise(self, rng):
        a, b, c, x, h0 = random_scan_inputs(rng, T=20)
        y1, _ = scan_sequential(a, b, c, x, h0)
        x2 = x.copy()
        x2[:, 11:] += 100.0
        y2, _ = scan_sequential(a, b, c, x2, h0)
        assert np.array_equal(y1[:, :11], y2[:, :11])

    def test_length_mismatch_rejected(self, rng):
        a, b, c, x, h0 = random_scan_inputs(rng, T=8)
        with pytest.raises(ContractError):
            scan_sequential(a, b, c[:, :5], x, h0)

    def test_graph_scan_matches_sequential(self, rng):
        a, b, c, x, h0 = random_scan_inputs(rng, T=10)
        h0 = np.zeros_like(h0)
        y_ref, _ = scan_sequential(a, b, c, x, h0)
        y = selective_scan(Tensor(a), Tensor(b), Tensor(c), Tensor(x))
        assert np.allclose(y.data, y_ref, atol=1e-14)

    def test_graph_scan_gradients(self, rng):
        from talkmesh.tensor import finite_diff_check

        B, T, C, N = 1, 5, 2, 3
        a = rng.uniform(0.1, 0.9, size=(B, T, C, N))
        b = rng.normal(size=(B, T, C, N))
        c = rng.normal(size=(B, T, N))
        x = rng.normal(size=(B, T, C))

        cases = {
            "a": lambda t: (selective_scan(t, Tensor(b), Tensor(c), Tensor(x)) ** 2.0).sum(),
            "b": lambda t: (selective_scan(Tensor(a), t, Tensor(c), Tensor(x)) ** 2.0).sum(),
            "c": lambda t: (selective_scan(Tensor(a), Tensor(b), t, Tensor(x)) ** 2.0).sum(),
            "x": lambda t: (selective_scan(Tensor(a), Tensor(b), Tensor(c), t) ** 2.0).sum(),
        }
        for name, f in cases.items():
            probe = {"a": a, "b": b, "c": c, "x": x}[name]
            err = finite_diff_check(f, Tensor(probe))
            assert err < 1e-4, f"scan grad wrt {name}: {err}"


class TestSelectParams:
    def test_zero_input_gives_softplus_bias(self, rng):
        cfg = SsmConfig(d_model=4, d_state=8)
        core = SsmCore(cfg, rng)
        x = np.zeros((3, cfg.d_inner))
        delta, bt, ct = core.select_params(x)
        expected = np.logaddexp(0.0, core.delta_bias.data)
        assert np.allclose(delta, np.broadcast_to(expected, delta.shape))
        assert np.allclose(bt, 0.0) and np.allclose(ct, 0.0)

    def test_zero_bias_zero_weights_gives_ln2(self, rng):
        cfg = SsmConfig(d_model=4)
        core = SsmCore(cfg, rng)
        core.proj_delta.weight.data[:] = 0.0
        core.delta_bias.data[:] = 0.0
        delta, _, _ = core.select_params(rng.normal(size=(2, cfg.d_inner)))
        assert np.allclose(delta, math.log(2.0), atol=1e-12)

    def test_matches_direct_affine_maps(self, rng):
        cfg = SsmConfig(d_model=6, d_state=16)
        core = SsmCore(cfg, rng)
        x = rng.normal(size=(4, cfg.d_inner))
        delta, bt, ct = core.select_params(x)
        ref_delta = np.logaddexp(
            0.0, x @ core.proj_delta.weight.data + core.delta_bias.data)
        assert np.array_equal(delta, ref_delta)
        assert np.array_equal(bt, x @ core.proj_B.weight.data)
        assert np.array_equal(ct, x @ core.proj_C.weight.data)


class TestMambaLayer:
    def test_zero_weights_identity(self, rng):
        cfg = SsmConfig(d_model=5)
        layer = MambaLayer(cfg, rng)
        for p in layer.ssm.parameters():
            p.data[:] = 0.0
        x = rng.normal(size=(2, 7, 5))
        out = layer(Tensor(x))
        assert np.allclose(out.data, x, atol=1e-15)

    def test_causality(self, rng):
        cfg = SsmConfig(d_model=6)
        layer = MambaLayer(cfg, rng)
        x = rng.normal(size=(1, 10, 6))
        y1 = layer(Tensor(x)).data
        x2 = x.copy()
        x2[:, 6:] += 3.0
        y2 = layer(Tensor(x2)).data
        assert np.array_equal(y1[:, :6], y2[:, :6])

    def test_step_replay_matches_forward(self, rng):
        cfg = SsmConfig(d_model=8)
        layer = MambaLayer(cfg, rng)
        x = rng.normal(size=(2, 6, 8))
        ref = layer(Tensor(x)).data
        state = layer.init_state(2)
        for t in range(6):
            y_t, state = layer.step(x[:, t], state)
            assert np.abs(y_t - ref[:, t]).max() < 1e-10

    def test_first_step_from_zero_state_matches_batch(self, rng):
        cfg = SsmConfig(d_model=8)
        layer = MambaLayer(cfg, rng)
        x = rng.normal(size=(1, 4, 8))
        ref = layer(Tensor(x)).data
        y0, _ = layer.step(x[:, 0], layer.init_state(1))
        assert np.abs(y0 - ref[:, 0]).max() < 1e-12

    def test_state_footprint_constant(self, rng):
        cfg = SsmConfig(d_model=4)
        layer = MambaLayer(cfg, rng)
        state = layer.init_state(1)
        sizes = set()
        for t in range(50):
            _, state = layer.step(rng.normal(size=(1, 4)), state)
            sizes.add(state.nbytes)
        assert len(sizes) == 1

    def test_zero_input_zero_conv_bias_residual_only(self, rng):
        cfg = SsmConfig(d_model=5)
        layer = MambaLayer(cfg, rng)
        layer.ssm.conv_bias.data[:] = 0.0
        x = np.zeros((1, 4, 5))
        out = layer(Tensor(x))
        assert np.allclose(out.data, 0.0, atol=1e-15)

    def test_stale_state_rejected(self, rng):
        cfg = SsmConfig(d_model=4)
        layer = MambaLayer(cfg, rng)
        other = MambaLayer(SsmConfig(d_model=6), rng)
        with pytest.raises(ContractError):
            layer.step(np.zeros((1, 4)), other.init_state(1))

    def test_block_gradient_check(self, rng):
        cfg = SsmConfig(d_model=4, d_state=4)
        layer = MambaLayer(cfg, rng)
        x = rng.normal(size=(1, 5, 4))

        def make_loss():
            return (layer(Tensor(x)) ** 2.0).sum()

        err = max_grad_error(layer, make_loss, rng, coords_per_param=6)
        assert err < 1e-4

    def test_input_gradient_check(self, rng):
        from talkmesh.tensor import finite_diff_check

        cfg = SsmConfig(d_model=4, d_state=4)
        layer = MambaLayer(cfg, rng)

        def f(t):
            return (layer(t.reshape(1, 5, 4)) ** 2.0).sum()

        err = finite_diff_check(f, Tensor(rng.normal(size=20)))
        assert err < 1e-4

    def test_checkpoint_keys_use_ssm_prefix(self, rng):
        layer = MambaLayer(SsmConfig(d_model=4), rng)
        keys = layer.named_parameters()
        assert any(k.startswith("ssm.") for k in keys)
        assert "ssm.A_log" in keys
