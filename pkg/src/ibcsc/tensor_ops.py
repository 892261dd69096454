"""Rank-4 tensor helpers and the convolutional dictionary operator pair.

Arrays follow the (batch, channels, rows, cols) layout and are float64
throughout. All convolutions are stride 1 cross-correlations with zero
"same" padding, so odd kernels preserve the spatial size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Return `x` as a C-contiguous float64 array of rank 4."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (n, c, h, w), got shape {arr.shape}")
    return arr


class NonFiniteError(ValueError):
    """Raised when an operand holds NaN or Inf."""


def check_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name}: contains non-finite entries")


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product."""
    return float(np.vdot(a, b))


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns of shape (c*k*k, n*h*w) for a same-padded correlation."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    win = sliding_window_view(_pad_same(x, k), (k, k), axis=(2, 3))
    # win: (n, c, h, w, k, k) -> (c, k, k, n, h, w)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * h * w)


def conv2d_same(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Cross-correlate `x` (n, cin, h, w) with `weight` (cout, cin, k, k)."""
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d_same: input {x.shape} vs weight {weight.shape}")
    out = weight.reshape(cout, -1) @ _im2col(x, k)
    return np.ascontiguousarray(out.reshape(cout, n, h, w).transpose(1, 0, 2, 3))


def conv2d_same_adjoint(g: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d_same` with respect to its input."""
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_same(g, flipped)


def conv2d_same_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``<g, conv2d_same(x, W)>`` with respect to ``W``."""
    n, cin, h, w = x.shape
    cout = g.shape[1]
    gmat = g.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
    return (gmat @ _im2col(x, k).T).reshape(cout, cin, k, k)


@dataclass
class ConvDict:
    """Convolutional dictionary with kernels of shape (m, c, k, k).

    `m` counts signal channels and `c` code channels; synthesis maps codes
    (n, c, h, w) to signals (n, m, h, w).
    """

    kernels: np.ndarray

    def __post_init__(self):
        self.kernels = np.ascontiguousarray(self.kernels, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise ShapeError(f"ConvDict: kernels must be rank 4, got {self.kernels.shape}")
        k1, k2 = self.kernels.shape[2:]
        if k1 != k2 or k1 % 2 == 0:
            raise ShapeError(f"ConvDict: kernel must be square with odd size, got {k1}x{k2}")
        check_finite(self.kernels, "ConvDict.kernels")

    @property
    def signal_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def code_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def k(self) -> int:
        return self.kernels.shape[2]

    def synthesize(self, Z):
        return dict_synthesize(self, Z)

    def analyze(self, X):
        return dict_analyze(self, X)


def _kernels(D) -> np.ndarray:
    return D.kernels if isinstance(D, ConvDict) else np.asarray(D, dtype=np.float64)


def dict_synthesize(D, Z) -> np.ndarray:
    """Signal ``D * Z``: channel i sums kernel d_ij correlated with code z_j."""
    K = _kernels(D)
    Z = as_tensor4(Z, "Z")
    if Z.shape[1] != K.shape[1]:
        raise ShapeError(
            f"dict_synthesize: code has {Z.shape[1]} channels, dictionary expects {K.shape[1]} "
            f"(kernels {K.shape}, Z {Z.shape})"
        )
    return conv2d_same(Z, K)


def dict_analyze(D, X) -> np.ndarray:
    """Adjoint of :func:`dict_synthesize`, mapping signals back to code space."""
    K = _kernels(D)
    X = as_tensor4(X, "X")
    if X.shape[1] != K.shape[0]:
        raise ShapeError(
            f"dict_analyze: signal has {X.shape[1]} channels, dictionary expects {K.shape[0]} "
            f"(kernels {K.shape}, X {X.shape})"
        )
    return conv2d_same_adjoint(X, K)


def dict_grad(Z: np.ndarray, G: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``<G, D * Z>`` with respect to the kernels of D."""
    return conv2d_same_weight_grad(Z, G, k)


def lipschitz_estimate(D, spatial, iters: int = 50, tol: float = 1e-6, seed: int = 0,
                       return_history: bool = False):
    """Power iteration for the largest eigenvalue of ``Z -> D^T (D * Z)``.

    The estimate at each iteration is the Rayleigh quotient of the
    normalized iterate, which for a PSD operator never decreases. Iteration
    stops after `iters` steps or once the relative change drops below `tol`.
    A zero dictionary yields 0.
    """
    if iters < 1:
        raise ValueError("lipschitz_estimate: iters must be >= 1")
    if tol <= 0:
        raise ValueError("lipschitz_estimate: tol must be > 0")
    K = _kernels(D)
    h, w = spatial
    history = []
    if not np.any(K):
        return (0.0, [0.0]) if return_history else 0.0

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, K.shape[1], h, w))
    z /= np.linalg.norm(z)
    est = 0.0
    for _ in range(iters):
        az = dict_analyze(K, dict_synthesize(K, z))
        new = inner(z, az)
        history.append(new)
        nrm = np.linalg.norm(az)
        if nrm == 0.0:
            break
        z = az / nrm
        converged = est > 0 and abs(new - est) <= tol * abs(new)
        est = new
        if converged:
            break
    est = max(est, 0.0)
    return (est, history) if return_history else est


def lipschitz_upper_bound(D) -> float:
    """Cheap bound: sum over kernel pairs of the squared l1 norm."""
    K = _kernels(D)
    return float(np.sum(np.abs(K).sum(axis=(2, 3)) ** 2))
