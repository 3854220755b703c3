import math

import numpy as np
import pytest

from stablespam.models import (MlpModel, QuadraticProblem, init_mlp,
                               inject_spikes, make_dataset, make_quadratic,
                               mlp_forward_backward, mlp_loss,
                               quadratic_loss_grad, rmsnorm_fwd_bwd,
                               swiglu_fwd_bwd)
from stablespam.quant import QuantFormat, QuantSpec, grid
from stablespam.tensor_core import make_rng, matmul


def finite_difference(f, x, h=1e-6):
    """Central differences of a scalar function over a matrix argument."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Quadratic bowl
# ---------------------------------------------------------------------------

class TestQuadratic:
    def test_matrix_exactly_symmetric_and_spd(self):
        p = make_quadratic(8, make_rng(0))
        assert np.array_equal(p.a, p.a.T)
        assert np.all(np.linalg.eigvalsh(p.a) > 0)

    def test_gradient_vanishes_at_optimum(self):
        p = make_quadratic(6, make_rng(1))
        p.w = np.linalg.solve(p.a, p.b)
        _, grad = quadratic_loss_grad(p)
        assert np.max(np.abs(grad)) < 1e-10

    def test_identity_matrix_closed_form(self):
        b = np.array([[1.0], [2.0]])
        w = np.array([[3.0], [4.0]])
        p = QuadraticProblem(a=np.eye(2), b=b, w=w)
        loss, grad = quadratic_loss_grad(p)
        assert loss == pytest.approx(0.5 * 25.0 - 11.0, rel=1e-15)
        assert np.allclose(grad, w - b, atol=0)

    def test_gradient_matches_finite_differences(self):
        p = make_quadratic(5, make_rng(2))

        def f(w):
            return quadratic_loss_grad(QuadraticProblem(p.a, p.b, w))[0]

        _, grad = quadratic_loss_grad(p)
        fd = finite_difference(f, p.w)
        assert np.max(np.abs(grad - fd)) < 1e-6


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------

class TestRmsNorm:
    def test_unit_gain_constant_row(self):
        y, _ = rmsnorm_fwd_bwd(np.array([[2.0, 2.0, 2.0]]), np.ones((1, 3)))
        assert np.allclose(y, 1.0, rtol=1e-8)

    def test_scale_equivariance_of_output(self):
        rng = make_rng(3)
        x = rng.standard_normal((4, 6))
        gain = rng.standard_normal((1, 6))
        y1, _ = rmsnorm_fwd_bwd(x, gain)
        y2, _ = rmsnorm_fwd_bwd(10.0 * x, gain)
        assert np.allclose(y1, y2, rtol=1e-6)

    def test_backward_matches_finite_differences(self):
        rng = make_rng(4)
        x = rng.standard_normal((3, 5))
        gain = rng.standard_normal((1, 5))
        dy = rng.standard_normal((3, 5))

        def loss_x(xv):
            y, _ = rmsnorm_fwd_bwd(xv, gain)
            return float(np.sum(y * dy))

        def loss_g(gv):
            y, _ = rmsnorm_fwd_bwd(x, gv)
            return float(np.sum(y * dy))

        _, bwd = rmsnorm_fwd_bwd(x, gain)
        dx, dgain = bwd(dy)
        assert np.max(np.abs(dx - finite_difference(loss_x, x))) < 1e-7
        assert np.max(np.abs(dgain - finite_difference(loss_g, gain))) < 1e-7


# ---------------------------------------------------------------------------
# SwiGLU
# ---------------------------------------------------------------------------

class TestSwiGlu:
    def test_zero_up_projection_gives_zero(self):
        rng = make_rng(5)
        x = rng.standard_normal((2, 3))
        w_gate = rng.standard_normal((3, 4))
        y, _ = swiglu_fwd_bwd(x, w_gate, np.zeros((3, 4)))
        assert np.array_equal(y, np.zeros((2, 4)))

    def test_silu_at_zero_is_zero(self):
        y, _ = swiglu_fwd_bwd(np.zeros((1, 2)), np.ones((2, 2)), np.ones((2, 2)))
        assert np.array_equal(y, np.zeros((1, 2)))

    def test_backward_matches_finite_differences(self):
        rng = make_rng(6)
        x = rng.standard_normal((3, 4))
        wg = rng.standard_normal((4, 5))
        wu = rng.standard_normal((4, 5))
        dy = rng.standard_normal((3, 5))

        def make_loss(which):
            def f(v):
                args = {"x": x, "wg": wg, "wu": wu}
                args[which] = v
                y, _ = swiglu_fwd_bwd(args["x"], args["wg"], args["wu"])
                return float(np.sum(y * dy))
            return f

        _, bwd = swiglu_fwd_bwd(x, wg, wu)
        dx, dwg, dwu = bwd(dy)
        assert np.max(np.abs(dx - finite_difference(make_loss("x"), x))) < 1e-7
        assert np.max(np.abs(dwg - finite_difference(make_loss("wg"), wg))) < 1e-7
        assert np.max(np.abs(dwu - finite_difference(make_loss("wu"), wu))) < 1e-7


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class TestMlp:
    def _model(self, seed=7, quant=None, depth=2):
        return init_mlp(6, 8, depth, 3, make_rng(seed), quant=quant)

    def test_param_shapes(self):
        m = self._model()
        assert m.params["block0.gain"].shape == (1, 6)
        assert m.params["block0.w_gate"].shape == (6, 8)
        assert m.params["block1.w_up"].shape == (8, 8)
        assert m.params["out.w"].shape == (8, 3)

    def test_uniform_logits_loss_is_log_classes(self):
        m = self._model()
        m.params["out.w"][...] = 0.0
        x = make_rng(8).standard_normal((10, 6))
        labels = np.arange(10) % 3
        assert mlp_loss(m, x, labels) == pytest.approx(math.log(3), rel=1e-12)

    def test_gradients_match_finite_differences_unquantized(self):
        m = self._model(seed=9)
        x = make_rng(10).standard_normal((5, 6))
        labels = np.array([0, 1, 2, 0, 1])
        _, grads = mlp_forward_backward(m, x, labels)
        for name in m.params:
            def f(v, name=name):
                saved = m.params[name]
                m.params[name] = v
                out = mlp_loss(m, x, labels)
                m.params[name] = saved
                return out
            fd = finite_difference(f, m.params[name])
            err = np.max(np.abs(grads[name] - fd))
            assert err < 1e-7, f"{name}: fd mismatch {err}"

    def test_quantized_forward_exact_on_grid(self):
        # depth 0: logits = qdq(x) @ qdq(w). With x and w already on an
        # absmax-scaled grid the quantizer is exact, so the quantized loss
        # equals the unquantized one bit for bit.
        m = init_mlp(4, 8, 0, 2, make_rng(11),
                     quant=QuantSpec(format=QuantFormat.INT4))
        scale = 0.5 / 7.0
        g = grid(QuantFormat.INT4)
        rng = make_rng(12)
        m.params["out.w"] = rng.choice(g, size=(4, 2)) * scale
        m.params["out.w"].ravel()[0] = 7 * scale  # pin absmax to a grid point
        x = rng.choice(g, size=(6, 4)) * (1.25 / 7.0)
        x.ravel()[0] = 7 * (1.25 / 7.0)
        labels = np.arange(6) % 2
        quantized = mlp_loss(m, x, labels)
        plain = mlp_loss(m, x, labels, quant=QuantSpec())
        assert quantized == plain

    def test_quantization_changes_loss_off_grid(self):
        m = self._model(seed=13, quant=QuantSpec(format=QuantFormat.INT4))
        x = make_rng(14).standard_normal((8, 6))
        labels = np.arange(8) % 3
        assert mlp_loss(m, x, labels) != mlp_loss(m, x, labels,
                                                  quant=QuantSpec())

    def test_straight_through_gradient_shapes_and_finiteness(self):
        m = self._model(seed=15, quant=QuantSpec(format=QuantFormat.FP4_E1M2))
        x = make_rng(16).standard_normal((5, 6))
        labels = np.array([0, 1, 2, 0, 1])
        _, grads = mlp_forward_backward(m, x, labels)
        assert set(grads) == set(m.params)
        for name, g in grads.items():
            assert g.shape == m.params[name].shape
            assert np.all(np.isfinite(g))


# ---------------------------------------------------------------------------
# Data and spikes
# ---------------------------------------------------------------------------

class TestDataset:
    def test_balanced_and_reproducible(self):
        d1 = make_dataset(120, 5, 4, seed=0)
        d2 = make_dataset(120, 5, 4, seed=0)
        assert np.array_equal(d1.inputs, d2.inputs)
        assert np.array_equal(d1.labels, d2.labels)
        counts = np.bincount(d1.labels, minlength=4)
        assert np.all(counts == 30)

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_dataset(64, 5, 4, seed=0).inputs,
                                  make_dataset(64, 5, 4, seed=1).inputs)

    def test_clusters_centered(self):
        d = make_dataset(4000, 3, 2, seed=2)
        for c in range(2):
            pts = d.inputs[d.labels == c]
            assert np.max(np.abs(pts.mean(axis=0) - d.centers[c])) < 0.1


class TestInjectSpikes:
    def test_zero_probability_or_severity_is_identity(self):
        x = make_rng(17).standard_normal((4, 4))
        assert np.array_equal(inject_spikes(x, 0.0, 0.5, make_rng(0)), x)
        assert np.array_equal(inject_spikes(x, 0.5, 0.0, make_rng(0)), x)

    def test_does_not_mutate_input(self):
        x = make_rng(18).standard_normal((4, 4))
        saved = x.copy()
        inject_spikes(x, 1.0, 1.0, make_rng(0))
        assert np.array_equal(x, saved)

    def test_full_probability_noise_std(self):
        x = np.full((100, 100), 2.0)
        out = inject_spikes(x, 1.0, 1.0, make_rng(19))
        noise = out - x
        assert float(np.std(noise)) == pytest.approx(2.0, rel=0.05)

    def test_partial_probability_hits_expected_fraction(self):
        x = np.ones((200, 200))
        out = inject_spikes(x, 0.1, 1.0, make_rng(20))
        frac = float(np.mean(out != x))
        assert frac == pytest.approx(0.1, abs=0.01)

    def test_invalid_arguments(self):
        x = np.ones((2, 2))
        with pytest.raises(ValueError):
            inject_spikes(x, -0.1, 1.0, make_rng(0))
        with pytest.raises(ValueError):
            inject_spikes(x, 0.5, -1.0, make_rng(0))
