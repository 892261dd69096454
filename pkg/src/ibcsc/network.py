"""Networks of stacked sparse-coding layers with hand-written backprop.

Every module implements ``forward(x, mode)`` and ``backward(grad)``.
Modes:

* ``"train"``: batch statistics in BN, running stats updated, caches kept.
* ``"batch"``: batch statistics, running stats untouched, caches kept.
* ``"eval"``: running statistics, no caching, no state mutation.

Parameters live in ``module.params`` (name -> array, updated in place by
the optimizer) and their gradients in ``module.grads``.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .fista import LIPSCHITZ_SAFETY, FistaConfig, csc_solve
from .loss import cross_entropy, cross_entropy_grad, ib_loss, lambda_penalty_grad
from .tensor_ops import (
    NonFiniteError,
    ShapeError,
    conv2d_same,
    conv2d_same_adjoint,
    conv2d_same_weight_grad,
    lipschitz_estimate,
)
from .unroll import unroll_backward

MODES = ("train", "batch", "eval")
# effective threshold lam/L ("inverse", the exact prox step) or lam*L ("lipschitz")
THRESHOLD_CONVENTIONS = ("inverse", "lipschitz")
CHECKPOINT_VERSION = 1


class MissingCacheError(RuntimeError):
    """backward() called without a preceding caching forward pass."""


class Module:
    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def children(self) -> List[Tuple[str, "Module"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def zero_grad(self):
        for m in self.modules():
            m.grads = {k: np.zeros_like(v) for k, v in m.params.items()}


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


class BatchNorm2d(Module):
    """Per-channel batch normalization.

    Running variance uses the biased (population) estimate. When
    ``self.collector`` is a dict, a batch-mode forward records the batch
    mean and variance in it for recalibration.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.collector: Optional[dict] = None
        self._cache = None

    def forward(self, x, mode="train"):
        _check_mode(mode)
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if mode == "eval":
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
            inv = 1.0 / np.sqrt(var + self.eps)
            return (x - mean[None, :, None, None]) * (inv * self.params["gamma"])[None, :, None, None] + beta

        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv[None, :, None, None]
        if mode == "train":
            m = self.momentum
            self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var
        elif self.collector is not None:
            self.collector["mean"] = mean.copy()
            self.collector["var"] = var.copy()
        self._cache = (xhat, inv)
        return xhat * gamma + beta

    def backward(self, g):
        if self._cache is None:
            raise MissingCacheError("BatchNorm2d.backward without cached forward")
        xhat, inv = self._cache
        self.grads["gamma"] = (g * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = g.sum(axis=(0, 2, 3))
        gx = g * self.params["gamma"][None, :, None, None]
        mean_g = gx.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gx - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class CscLayer(Module):
    """Sparse-coding layer: unrolled FISTA solve, then BN, then optional ReLU.

    The input X has `in_channels` (signal side of the dictionary) and the
    output code has `out_channels`. ``params["lam"]`` holds the layer's
    scalar trade-off as a length-1 array.
    """

    def __init__(self, in_channels, out_channels, spatial, k=3, steps=2, lam=1e-3,
                 relu=True, rng=None, threshold="inverse"):
        super().__init__()
        if threshold not in THRESHOLD_CONVENTIONS:
            raise ValueError(f"unknown threshold convention {threshold!r}")
        self.threshold = threshold
        rng = rng if rng is not None else np.random.default_rng(0)
        std = 1.0 / np.sqrt(in_channels * k * k)
        self.params["dict"] = rng.standard_normal((in_channels, out_channels, k, k)) * std
        self.params["lam"] = np.array([float(lam)])
        self.bn = BatchNorm2d(out_channels)
        self.relu = relu
        self.spatial = tuple(spatial)
        self.steps = steps
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.cfg: Optional[FistaConfig] = None
        self.refresh_lipschitz()
        self._cache = None

    def children(self):
        return [("bn", self.bn)]

    @property
    def lam(self) -> float:
        return float(self.params["lam"][0])

    def refresh_lipschitz(self):
        L = lipschitz_estimate(self.params["dict"], self.spatial) * LIPSCHITZ_SAFETY
        if not np.isfinite(L):
            raise NonFiniteError(f"Lipschitz estimate overflowed ({L})")
        self.set_lipschitz(L)

    def set_lipschitz(self, L: float):
        scale = 1.0 / L if self.threshold == "inverse" else L
        self.cfg = FistaConfig(steps=self.steps, lipschitz=float(L), threshold_scale=scale)

    def code(self, x):
        """Sparse code only (no BN / ReLU); returns (Z, trace)."""
        return csc_solve(x, self.params["dict"], self.lam, self.cfg, track_objective=False)

    def forward(self, x, mode="train"):
        _check_mode(mode)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"CscLayer: input has {x.shape[1]} channels, expected {self.in_channels}")
        z, trace = self.code(x)
        out = self.bn.forward(z, mode)
        if self.relu:
            out = np.maximum(out, 0.0)
        self._cache = None if mode == "eval" else (x, trace, out)
        return out

    def backward(self, g):
        if self._cache is None:
            raise MissingCacheError("CscLayer.backward without a retained trace")
        x, trace, out = self._cache
        if self.relu:
            g = np.where(out > 0, g, 0.0)
        gz = self.bn.backward(g)
        ug = unroll_backward(trace, x, self.params["dict"], self.lam, gz)
        self.grads["dict"] = ug.d_dict
        self.grads["lam"] = np.array([ug.d_lambda])
        return ug.d_input


class ConvLayer(Module):
    """Plain convolution, BN, optional ReLU (the lambda-free reference path)."""

    def __init__(self, in_channels, out_channels, k=3, relu=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_channels * k * k))
        self.params["weight"] = rng.standard_normal((out_channels, in_channels, k, k)) * std
        self.bn = BatchNorm2d(out_channels)
        self.relu = relu
        self.in_channels = in_channels
        self.out_channels = out_channels
        self._cache = None

    def children(self):
        return [("bn", self.bn)]

    def forward(self, x, mode="train"):
        _check_mode(mode)
        z = conv2d_same(x, self.params["weight"])
        out = self.bn.forward(z, mode)
        if self.relu:
            out = np.maximum(out, 0.0)
        self._cache = None if mode == "eval" else (x, out)
        return out

    def backward(self, g):
        if self._cache is None:
            raise MissingCacheError("ConvLayer.backward without cached forward")
        x, out = self._cache
        if self.relu:
            g = np.where(out > 0, g, 0.0)
        gz = self.bn.backward(g)
        w = self.params["weight"]
        self.grads["weight"] = conv2d_same_weight_grad(x, gz, w.shape[-1])
        return conv2d_same_adjoint(gz, w)


class ResidualBlock(Module):
    """``relu(second(first(x)) + shortcut(x))``; `second` must not apply ReLU."""

    def __init__(self, first: Module, second: Module, shortcut: Optional[Module] = None):
        super().__init__()
        self.first = first
        self.second = second
        self.shortcut = shortcut
        self._cache = None

    def children(self):
        out = [("first", self.first), ("second", self.second)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def forward(self, x, mode="train"):
        h = self.second.forward(self.first.forward(x, mode), mode)
        s = x if self.shortcut is None else self.shortcut.forward(x, mode)
        out = np.maximum(h + s, 0.0)
        self._cache = None if mode == "eval" else out
        return out

    def backward(self, g):
        if self._cache is None:
            raise MissingCacheError("ResidualBlock.backward without cached forward")
        g = np.where(self._cache > 0, g, 0.0)
        gx = self.first.backward(self.second.backward(g))
        gx = gx + (g if self.shortcut is None else self.shortcut.backward(g))
        return gx


class AvgPool2(Module):
    """2x2 average pooling with stride 2."""

    def forward(self, x, mode="train"):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"AvgPool2: spatial size {h}x{w} is not even")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g):
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


class GlobalAvgPool(Module):
    def forward(self, x, mode="train"):
        if mode != "eval":
            self._spatial = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, g):
        h, w = self._spatial
        return np.broadcast_to(g[:, :, None, None] / (h * w), g.shape + (h, w)).copy()


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, zero=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero:
            self.params["weight"] = np.zeros((out_features, in_features))
        else:
            self.params["weight"] = rng.standard_normal((out_features, in_features)) / np.sqrt(in_features)
        self.params["bias"] = np.zeros(out_features)
        self._x = None

    def forward(self, x, mode="train"):
        if mode != "eval":
            self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g):
        if self._x is None:
            raise MissingCacheError("Linear.backward without cached forward")
        self.grads["weight"] = g.T @ self._x
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.params["weight"]


class Network(Module):
    """Ordered stack of modules ending in a linear classifier head."""

    def __init__(self, layers: List[Module], input_shape, num_classes, arch: Optional[dict] = None):
        super().__init__()
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch = arch or {}
        self._validate()
        self.zero_grad()

    def children(self):
        return [(str(i), m) for i, m in enumerate(self.layers)]

    def _validate(self):
        probe = np.zeros((1,) + self.input_shape)
        try:
            out = self.forward(probe, "eval")
        except (ShapeError, ValueError) as exc:
            raise ShapeError(f"Network: architecture does not fit input {self.input_shape}: {exc}") from exc
        if out.shape != (1, self.num_classes):
            raise ShapeError(f"Network: output shape {out.shape}, expected (1, {self.num_classes})")

    def csc_layers(self) -> List[CscLayer]:
        return [m for m in self.modules() if isinstance(m, CscLayer)]

    def batchnorms(self) -> List[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def lambda_vector(self) -> np.ndarray:
        return np.array([layer.lam for layer in self.csc_layers()])

    def mean_lambda(self) -> float:
        """Mean layer lambda; 0 for a net without sparse-coding layers."""
        lam = self.lambda_vector()
        return float(lam.mean()) if lam.size else 0.0

    def set_lambda_vector(self, values):
        layers = self.csc_layers()
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(layers),):
            raise ShapeError(f"lambda vector has shape {values.shape}, net has {len(layers)} layers")
        for layer, v in zip(layers, values):
            layer.params["lam"][0] = v

    def refresh_lipschitz(self):
        for layer in self.csc_layers():
            layer.refresh_lipschitz()

    def forward(self, x, mode="train"):
        _check_mode(mode)
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, g):
        self.zero_grad()
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self.named_parameters())

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self.named_grads())


def network_forward(net: Network, batch, mode="train") -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != net.input_shape:
        raise ShapeError(f"network_forward: batch {batch.shape[1:]} vs declared input {net.input_shape}")
    return net.forward(batch, mode)


def network_backward(net: Network, logits, labels, beta: float, squared: bool = False, upstream=None):
    """Gradients of the excitation loss for the last caching forward pass.

    Returns the ordered gradient dict; lambda entries include the
    ``-beta * d||lam||_2`` penalty term. `upstream` replaces the
    cross-entropy gradient with respect to the logits when given.
    """
    if upstream is None:
        g = cross_entropy_grad(np.asarray(logits, dtype=np.float64), np.asarray(labels))
    else:
        g = np.asarray(upstream, dtype=np.float64)
    net.backward(g)
    layers = net.csc_layers()
    if layers and beta:
        pen = lambda_penalty_grad(net.lambda_vector(), squared)
        for layer, pg in zip(layers, pen):
            layer.grads["lam"] = layer.grads["lam"] - beta * pg
    return net.gradients()


def loss_and_grads(net: Network, batch, labels, beta: float, mode="train", squared: bool = False):
    """Forward, excitation loss and backward in one call."""
    logits = network_forward(net, batch, mode)
    loss = ib_loss(logits, labels, net.lambda_vector(), beta, squared)
    grads = network_backward(net, logits, labels, beta, squared)
    return loss, logits, grads


# ---------------------------------------------------------------------------
# presets

PRESET_WIDTHS = {
    "toy": (4, 6),
    "micro": (16, 32),
    "resnet18": (64, 128, 256, 512),
}


def _make_layer(kind, cin, cout, spatial, rng, relu=True, steps=2, lam=1e-3, k=3, threshold="inverse"):
    if kind == "csc":
        return CscLayer(cin, cout, spatial, k=k, steps=steps, lam=lam, relu=relu, rng=rng,
                        threshold=threshold)
    if kind == "conv":
        return ConvLayer(cin, cout, k=k, relu=relu, rng=rng)
    raise ValueError(f"unknown layer kind {kind!r}")


def _block(kind, cin, cout, spatial, rng, **kw):
    first = _make_layer(kind, cin, cout, spatial, rng, relu=True, **kw)
    second = _make_layer(kind, cout, cout, spatial, rng, relu=False, **kw)
    shortcut = None if cin == cout else ConvLayer(cin, cout, k=1, relu=False, rng=rng)
    return ResidualBlock(first, second, shortcut)


def build_network(preset="micro", in_channels=3, spatial=(32, 32), num_classes=10,
                  layer_kind="csc", steps=2, lam_init=1e-3, seed=0, blocks_per_stage=None,
                  threshold="inverse") -> Network:
    """Build a preset architecture.

    * ``toy`` / ``micro``: stem layer, one residual block, 2x2 average pool,
      a widening residual block, global pool, linear head.
    * ``resnet18``: stem plus four stages of two blocks (17 sparse-coding
      layers in total), pooling between stages.
    """
    if preset not in PRESET_WIDTHS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESET_WIDTHS)}")
    rng = np.random.default_rng(seed)
    widths = PRESET_WIDTHS[preset]
    if blocks_per_stage is None:
        blocks_per_stage = 2 if preset == "resnet18" else 1
    kw = dict(steps=steps, lam=lam_init, threshold=threshold)
    h, w = spatial
    layers: List[Module] = [_make_layer(layer_kind, in_channels, widths[0], (h, w), rng, **kw)]
    cin = widths[0]
    for stage, width in enumerate(widths):
        if stage > 0:
            layers.append(AvgPool2())
            h, w = h // 2, w // 2
        for _ in range(blocks_per_stage):
            layers.append(_block(layer_kind, cin, width, (h, w), rng, **kw))
            cin = width
    layers += [GlobalAvgPool(), Linear(cin, num_classes, rng=rng)]
    arch = dict(preset=preset, in_channels=in_channels, spatial=list(spatial), num_classes=num_classes,
                layer_kind=layer_kind, steps=steps, lam_init=lam_init, seed=seed,
                blocks_per_stage=blocks_per_stage, threshold=threshold)
    return Network(layers, (in_channels,) + tuple(spatial), num_classes, arch=arch)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, net: Network, extra: Optional[dict] = None):
    """Write an ``.npz`` container: ``param/*``, ``buffer/*`` arrays plus JSON ``meta``."""
    meta = {
        "format": "ibcsc-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "lambda_vector": net.lambda_vector().tolist(),
        "lipschitz": [layer.cfg.lipschitz for layer in net.csc_layers()],
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in net.named_parameters()}
    arrays.update({f"buffer/{k}": v for k, v in net.named_buffers()})
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect_preset: Optional[str] = None):
    """Rebuild the network stored at `path`; returns (net, meta)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "ibcsc-checkpoint":
            raise ValueError(f"{path}: not an ibcsc checkpoint")
        arch = dict(meta["arch"])
        if expect_preset is not None and arch["preset"] != expect_preset:
            raise ValueError(f"{path}: checkpoint preset {arch['preset']!r} != expected {expect_preset!r}")
        arch["spatial"] = tuple(arch["spatial"])
        net = build_network(**arch)
        for name, p in net.named_parameters():
            p[...] = data[f"param/{name}"]
        for name, b in net.named_buffers():
            b[...] = data[f"buffer/{name}"]
    for layer, L in zip(net.csc_layers(), meta["lipschitz"]):
        layer.set_lipschitz(L)
    return net, meta


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


__all__ = [
    "AvgPool2", "BatchNorm2d", "ConvLayer", "CscLayer", "GlobalAvgPool", "Linear",
    "MissingCacheError", "Module", "Network", "ResidualBlock", "accuracy", "build_network",
    "cross_entropy", "load_checkpoint", "loss_and_grads", "network_backward", "network_forward",
    "save_checkpoint",
]
