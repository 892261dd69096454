import numpy as np
import pytest

from ibcsc.fista import FistaConfig, csc_solve
from ibcsc.tensor_ops import ShapeError, dict_analyze
from ibcsc.unroll import lambda_grad_forward, unroll_backward
from helpers import guarded_instance, threshold_margin
from oracles import central_diff, rel_err


def solve(X, K, lam, cfg):
    return csc_solve(X, K, lam, cfg, track_objective=False)


def fd_lambda(X, K, lam, cfg, eps=1e-5):
    return (solve(X, K, lam + eps, cfg)[0] - solve(X, K, lam - eps, cfg)[0]) / (2 * eps)


class TestForwardMode:
    def test_dead_zone(self):
        rng = np.random.default_rng(0)
        K = rng.standard_normal((2, 3, 3, 3))
        X = rng.standard_normal((1, 2, 4, 4))
        cfg = FistaConfig.for_dict(K, (4, 4), steps=4)
        lam = 2.0 * np.abs(dict_analyze(K, X)).max()
        assert not solve(X, K, lam, cfg)[0].any()
        assert not lambda_grad_forward(X, K, lam, cfg).any()

    @pytest.mark.parametrize("L", [1.0, 2.0, 5.0])
    def test_scalar_one_step(self, L):
        cfg = FistaConfig(steps=1, lipschitz=L)
        X = np.full((1, 1, 1, 1), 5.0)
        d = lambda_grad_forward(X, np.ones((1, 1, 1, 1)), 0.3, cfg)
        assert d.item() == pytest.approx(-cfg.threshold_scale, abs=1e-15)

    @pytest.mark.parametrize("steps", [1, 2, 5])
    def test_matches_finite_differences(self, steps):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(steps), steps=steps)
        fwd = lambda_grad_forward(X, K, lam, cfg)
        np.testing.assert_allclose(fwd, fd_lambda(X, K, lam, cfg), rtol=0, atol=1e-6 * np.abs(fwd).max())
        assert rel_err(fwd, fd_lambda(X, K, lam, cfg)) <= 1e-6

    def test_nonzero_scale_option(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(11), steps=3)
        cfg = FistaConfig(steps=3, lipschitz=cfg.lipschitz, threshold_scale=0.5 / cfg.lipschitz)
        if threshold_margin(X, K, lam, cfg) < 1e-4:
            pytest.skip("instance too close to a threshold kink for this scale")
        assert rel_err(lambda_grad_forward(X, K, lam, cfg), fd_lambda(X, K, lam, cfg)) <= 1e-6


class TestReverseMode:
    def test_zero_upstream(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(20))
        Z, trace = solve(X, K, lam, cfg)
        g = unroll_backward(trace, X, K, lam, np.zeros_like(Z))
        assert g.d_lambda == 0.0 and not g.d_dict.any() and not g.d_input.any()

    @pytest.mark.parametrize("steps", [1, 2, 5])
    def test_one_hot_matches_forward(self, steps):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(30 + steps), steps=steps)
        Z, trace = solve(X, K, lam, cfg)
        fwd = lambda_grad_forward(X, K, lam, cfg)
        rng = np.random.default_rng(0)
        for flat in rng.choice(Z.size, 12, replace=False):
            e = np.zeros(Z.size)
            e[flat] = 1.0
            rev = unroll_backward(trace, X, K, lam, e.reshape(Z.shape)).d_lambda
            assert abs(rev - fwd.ravel()[flat]) <= 1e-10

    def test_dense_upstream_matches_forward(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(40), steps=4)
        Z, trace = solve(X, K, lam, cfg)
        U = np.random.default_rng(1).standard_normal(Z.shape)
        rev = unroll_backward(trace, X, K, lam, U).d_lambda
        assert rev == pytest.approx(float(np.vdot(U, lambda_grad_forward(X, K, lam, cfg))), abs=1e-10)

    @pytest.mark.parametrize("steps", [1, 2, 3])
    def test_dict_and_input_finite_differences(self, steps):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(50 + steps), steps=steps)
        Z, trace = solve(X, K, lam, cfg)
        U = np.random.default_rng(2).standard_normal(Z.shape)
        g = unroll_backward(trace, X, K, lam, U)
        f = lambda: float(np.vdot(U, solve(X, K, lam, cfg)[0]))  # L held fixed
        assert rel_err(g.d_dict, central_diff(f, K)) <= 1e-5
        assert rel_err(g.d_input, central_diff(f, X)) <= 1e-5

    def test_batch_of_two(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(60), n=2, m=1, c=2, h=4, w=4)
        Z, trace = solve(X, K, lam, cfg)
        U = np.random.default_rng(3).standard_normal(Z.shape)
        g = unroll_backward(trace, X, K, lam, U)
        f = lambda: float(np.vdot(U, solve(X, K, lam, cfg)[0]))
        lam_fd = (float(np.vdot(U, solve(X, K, lam + 1e-5, cfg)[0]))
                  - float(np.vdot(U, solve(X, K, lam - 1e-5, cfg)[0]))) / 2e-5
        assert g.d_lambda == pytest.approx(lam_fd, rel=1e-6)
        assert rel_err(g.d_input, central_diff(f, X)) <= 1e-5

    def test_shape_mismatch(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(70))
        Z, trace = solve(X, K, lam, cfg)
        with pytest.raises(ShapeError):
            unroll_backward(trace, X, K, lam, np.zeros((1,) + Z.shape[1:-1] + (Z.shape[-1] + 1,)))
        with pytest.raises(ShapeError):
            unroll_backward(trace, X[:, :1], K, lam, np.zeros_like(Z))

    def test_incomplete_trace(self):
        X, K, lam, cfg = guarded_instance(np.random.default_rng(80), steps=3)
        Z, trace = solve(X, K, lam, cfg)
        trace.xs.pop()
        with pytest.raises(ShapeError):
            unroll_backward(trace, X, K, lam, np.zeros_like(Z))
