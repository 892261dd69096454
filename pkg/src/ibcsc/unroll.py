"""Derivatives of the unrolled FISTA output.

`unroll_backward` replays a recorded :class:`FistaTrace` in reverse and
returns gradients of ``<upstream, Z>`` with respect to lambda, dictionary
and input. `lambda_grad_forward` propagates dZ/dlambda forward through the
same iterations; it is the independent check on the reverse pass.

L is a constant here. Where ``|g| == tau`` the soft threshold has no
derivative and the dead-zone branch (0) is taken.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fista import FistaConfig, FistaTrace, csc_solve, momentum_coefficients
from .tensor_ops import ConvDict, ShapeError, as_tensor4, dict_analyze, dict_grad, dict_synthesize


@dataclass
class UnrollGradients:
    d_lambda: float
    d_dict: np.ndarray
    d_input: np.ndarray


def _kernels(D) -> np.ndarray:
    return D.kernels if isinstance(D, ConvDict) else np.asarray(D, dtype=np.float64)


def lambda_grad_forward(X, D, lam: float, cfg: FistaConfig) -> np.ndarray:
    """Coordinatewise dZ/dlambda by forward accumulation.

    On the active set, ``dx_k = -sign(x_k) * s + dg_k`` with
    ``dg_k = dy_k - (1/L) D^T D dy_k``; elsewhere ``dx_k = 0``. The
    extrapolation ``y_{k+1} = x_k + c_k (x_k - x_{k-1})`` is linear, so the
    same combination carries the derivatives.
    """
    K = _kernels(D)
    _, trace = csc_solve(X, K, lam, cfg, track_objective=False)
    step = 1.0 / cfg.lipschitz
    s = cfg.threshold_scale
    _, coefs = momentum_coefficients(cfg.steps, cfg.momentum)

    dx_prev = np.zeros_like(trace.xs[0])
    dy = np.zeros_like(dx_prev)
    for k, x in enumerate(trace.xs):
        if k == 0:
            dg = dy
        else:
            dg = dy - step * dict_analyze(K, dict_synthesize(K, dy))
        active = x != 0
        dx = np.where(active, -np.sign(x) * s + dg, 0.0)
        dy = dx + coefs[k] * (dx - dx_prev)
        dx_prev = dx
    return dx_prev


def unroll_backward(trace: FistaTrace, X, D, lam: float, upstream) -> UnrollGradients:
    """Reverse-mode gradients of ``<upstream, x_T>`` for a recorded solve."""
    cfg = trace.config
    if cfg is None or len(trace) != cfg.steps:
        raise ShapeError("unroll_backward: trace is missing its config or is incomplete")
    X = as_tensor4(X, "X")
    K = _kernels(D)
    upstream = as_tensor4(upstream, "upstream")
    if upstream.shape != trace.xs[-1].shape:
        raise ShapeError(
            f"unroll_backward: upstream {upstream.shape} does not match code {trace.xs[-1].shape}"
        )
    if X.shape[0] != upstream.shape[0] or X.shape[2:] != upstream.shape[2:] or X.shape[1] != K.shape[0]:
        raise ShapeError(f"unroll_backward: X {X.shape} inconsistent with trace/dictionary {K.shape}")

    step = 1.0 / cfg.lipschitz
    s = cfg.threshold_scale
    k_size = K.shape[-1]
    _, coefs = momentum_coefficients(cfg.steps, cfg.momentum)
    T = len(trace)

    xbar = [None] * T
    xbar[T - 1] = upstream.copy()
    d_lambda = 0.0
    d_dict = np.zeros_like(K)
    d_input = np.zeros_like(X)

    for k in range(T - 1, -1, -1):
        if xbar[k] is None:
            continue
        x = trace.xs[k]
        gbar = np.where(x != 0, xbar[k], 0.0)
        d_lambda -= s * float(np.vdot(gbar, np.sign(x)))
        if not np.any(gbar):
            continue
        Dg = dict_synthesize(K, gbar)
        d_input += step * Dg
        y = trace.ys[k]
        if k == 0:
            d_dict += step * dict_grad(gbar, X, k_size)
            continue
        r = dict_synthesize(K, y) - X
        d_dict -= step * (dict_grad(gbar, r, k_size) + dict_grad(y, Dg, k_size))
        ybar = gbar - step * dict_analyze(K, Dg)
        # y_k = x_{k-1} + c (x_{k-1} - x_{k-2}), with c from the step that produced it
        c = coefs[k - 1]
        _accumulate(xbar, k - 1, (1.0 + c) * ybar)
        if k >= 2 and c != 0.0:
            _accumulate(xbar, k - 2, -c * ybar)

    return UnrollGradients(d_lambda=d_lambda, d_dict=d_dict, d_input=d_input)


def _accumulate(bufs, idx, value):
    if bufs[idx] is None:
        bufs[idx] = value
    else:
        bufs[idx] = bufs[idx] + value
