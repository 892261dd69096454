"""Unrolled FISTA for the convolutional LASSO.

Solves ``min_Z lam*||Z||_1 + 0.5*||X - D*Z||^2`` with a fixed number of
proximal-gradient steps and the standard FISTA momentum sequence. The
shrinkage threshold is ``lam * threshold_scale``; the default scale 1/L is
the proximal step that actually minimizes the objective above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .tensor_ops import (
    ConvDict,
    ShapeError,
    as_tensor4,
    check_finite,
    dict_analyze,
    dict_synthesize,
    lipschitz_estimate,
)

LIPSCHITZ_SAFETY = 1.01


@dataclass
class FistaConfig:
    steps: int = 2
    lipschitz: float = 1.0
    threshold_scale: Optional[float] = None
    momentum: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"FistaConfig: steps must be >= 1, got {self.steps}")
        if not self.lipschitz > 0:
            raise ValueError(f"FistaConfig: lipschitz must be > 0, got {self.lipschitz}")
        if self.threshold_scale is None:
            self.threshold_scale = 1.0 / self.lipschitz
        if not self.threshold_scale > 0:
            raise ValueError(f"FistaConfig: threshold_scale must be > 0, got {self.threshold_scale}")

    @classmethod
    def for_dict(cls, D, spatial, steps: int = 2, safety: float = LIPSCHITZ_SAFETY, **kw):
        """Config with L estimated by power iteration and scaled by `safety`."""
        L = lipschitz_estimate(D, spatial) * safety
        if L <= 0:
            raise ValueError("FistaConfig.for_dict: dictionary has zero operator norm")
        return cls(steps=steps, lipschitz=L, **kw)


@dataclass
class FistaTrace:
    """Per-step iterates of one unrolled solve.

    ``ys[k]`` is the extrapolation point entering step k+1, ``xs[k]`` the
    thresholded output of that step and ``ts[k]`` its momentum scalar.
    """

    xs: List[np.ndarray] = field(default_factory=list)
    ys: List[np.ndarray] = field(default_factory=list)
    ts: List[float] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    config: Optional[FistaConfig] = None

    def __len__(self):
        return len(self.xs)

    def masks(self) -> List[np.ndarray]:
        """Active sets: coordinates passed (shrunk, nonzero) by the threshold."""
        return [x != 0 for x in self.xs]


def soft_threshold(v, tau):
    """``sign(v) * max(|v| - tau, 0)``, elementwise for arrays."""
    if tau < 0:
        raise ValueError(f"soft_threshold: tau must be >= 0, got {tau}")
    if np.isscalar(v):
        return math.copysign(max(abs(v) - tau, 0.0), v) if abs(v) > tau else 0.0
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def fista_momentum(t: float) -> float:
    """Next term of the FISTA sequence, ``(1 + sqrt(1 + 4 t^2)) / 2``."""
    if t < 1:
        raise ValueError(f"fista_momentum: t must be >= 1, got {t}")
    return (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0


def momentum_coefficients(steps: int, enabled: bool = True):
    """Momentum scalars t_1..t_{T+1} and extrapolation weights (t_k - 1)/t_{k+1}."""
    ts = [1.0]
    for _ in range(steps):
        ts.append(fista_momentum(ts[-1]))
    if not enabled:
        return ts, [0.0] * steps
    return ts, [(ts[k] - 1.0) / ts[k + 1] for k in range(steps)]


def _check_shapes(X: np.ndarray, D) -> ConvDict:
    if not isinstance(D, ConvDict):
        D = ConvDict(D)
    if X.shape[1] != D.signal_channels:
        raise ShapeError(
            f"signal has {X.shape[1]} channels but dictionary {D.kernels.shape} "
            f"expects {D.signal_channels}"
        )
    return D


def csc_objective(X, D, Z, lam: float) -> float:
    """``lam*||Z||_1 + 0.5*||X - D*Z||_F^2``."""
    X = as_tensor4(X, "X")
    D = _check_shapes(X, D)
    Z = as_tensor4(Z, "Z")
    if lam < 0:
        raise ValueError("csc_objective: lam must be >= 0")
    r = dict_synthesize(D, Z) - X
    return float(lam * np.abs(Z).sum() + 0.5 * np.vdot(r, r))


def csc_solve(X, D, lam: float, cfg: FistaConfig, track_objective: bool = True):
    """Run ``cfg.steps`` FISTA iterations from zero; return (Z, trace).

    The threshold is applied to the post-gradient point
    ``y - (1/L) D^T (D*y - X)``.
    """
    X = as_tensor4(X, "X")
    D = _check_shapes(X, D)
    if lam < 0:
        raise ValueError(f"csc_solve: lam must be >= 0, got {lam}")
    check_finite(X, "X")
    if not math.isfinite(lam):
        raise ValueError("csc_solve: lam is not finite")

    step = 1.0 / cfg.lipschitz
    tau = lam * cfg.threshold_scale
    ts, coefs = momentum_coefficients(cfg.steps, cfg.momentum)
    n, _, h, w = X.shape
    back = dict_analyze(D, X) * step  # (1/L) D^T X, reused by every step

    trace = FistaTrace(config=cfg)
    x_prev = np.zeros((n, D.code_channels, h, w))
    y = x_prev
    for k in range(cfg.steps):
        if k == 0:
            g = back.copy()
        else:
            g = y - step * dict_analyze(D, dict_synthesize(D, y)) + back
        x = soft_threshold(g, tau)
        trace.ys.append(y)
        trace.xs.append(x)
        trace.ts.append(ts[k])
        if track_objective:
            trace.objective.append(csc_objective(X, D, x, lam))
        y = x + coefs[k] * (x - x_prev)
        x_prev = x
    return trace.xs[-1], trace
