"""Test-time sparsity correction: re-learn the layer lambdas on a small
labeled corrupted subset with all weights frozen, and recalibrate BN."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import LabeledDataset
from .loss import ib_loss
from .network import Network, network_backward, network_forward
from .tensor_ops import NonFiniteError
from .training import DivergenceError, cosine_lr, evaluate, iterate_batches, is_lambda, project_network_lambdas, sgd_step

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    subset_size: int = 100
    adapt_epochs: int = 30
    adapt_lr0: float = 0.1
    beta: float = 0.001
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: Optional[int] = None  # None: the whole subset per step
    seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ValueError("AdaptConfig.subset_size must be >= 1")
        if self.adapt_epochs < 1:
            raise ValueError("AdaptConfig.adapt_epochs must be >= 1")
        if self.adapt_lr0 < 0:
            raise ValueError("AdaptConfig.adapt_lr0 must be >= 0")


@dataclass
class AdaptLog:
    """Per-epoch record of an adaptation run (``stage`` is "epoch" or "final")."""

    rows: List[dict] = field(default_factory=list)


def frozen_param_hash(net: Network) -> str:
    """SHA-256 over every parameter except the lambdas (BN stats are buffers)."""
    h = hashlib.sha256()
    for name, p in net.named_parameters():
        if is_lambda(name):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def bn_stats(net: Network) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in net.named_buffers()}


def recompute_bn_stats(net: Network, images) -> Network:
    """Replace every BN running mean/variance with statistics of `images`.

    One forward pass over all of `images` in batch-statistics mode; each BN
    stores the exact (biased) per-channel moments of the activations it
    saw. The data goes through as a single batch so every layer's
    statistics are consistent with the normalization applied upstream.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("recompute_bn_stats: empty data")
    bns = net.batchnorms()
    for bn in bns:
        bn.collector = {}
    try:
        network_forward(net, images, "batch")
        for bn in bns:
            bn.buffers["running_mean"][...] = bn.collector["mean"]
            bn.buffers["running_var"][...] = bn.collector["var"]
    finally:
        for bn in bns:
            bn.collector = None
    return net


def sample_subset(pool: LabeledDataset, size: int, seed: int = 0):
    """Seeded split of a corrupted pool into (adaptation subset, held-out rest)."""
    if size > len(pool):
        raise ValueError(f"subset size {size} exceeds pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    return pool.subset(np.sort(perm[:size])), pool.subset(np.sort(perm[size:]))


def adapt_lambda(net: Network, subset: LabeledDataset, cfg: AdaptConfig,
                 eval_set: Optional[LabeledDataset] = None, copy_net: bool = True):
    """Re-learn lambda on `subset` with every other parameter frozen.

    Each epoch: SGD on the lambdas only (excitation loss, cosine schedule,
    ReLU projection after every step), then BN statistics are recomputed on
    the subset. A final recalibration follows the loop. Returns
    ``(adapted_net, log)``.
    """
    if len(subset) == 0:
        raise ValueError("adapt_lambda: empty subset")
    if copy_net:
        net = copy.deepcopy(net)
    params = net.parameters()
    lam_names = [n for n in params if is_lambda(n)]
    velocity: Dict[str, np.ndarray] = {}
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size or len(subset)
    record = AdaptLog()

    def snapshot(epoch, stage):
        row = {"epoch": epoch, "stage": stage, "mean_lambda": net.mean_lambda(),
               "eval_accuracy": evaluate(net, eval_set) if eval_set is not None else None}
        record.rows.append(row)
        log.info("adapt %s %d mean_lambda %.4f acc %s", stage, epoch, row["mean_lambda"], row["eval_accuracy"])

    for epoch in range(cfg.adapt_epochs):
        lr = cosine_lr(epoch, cfg.adapt_epochs, cfg.adapt_lr0)
        for idx in iterate_batches(len(subset), bs, rng):
            x, y = subset.images[idx], subset.labels[idx]
            try:
                logits = network_forward(net, x, "batch")
            except NonFiniteError as exc:
                raise DivergenceError(f"{exc} during adaptation epoch {epoch + 1}") from None
            loss = ib_loss(logits, y, net.lambda_vector(), cfg.beta)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite adaptation loss {loss} at epoch {epoch + 1}")
            grads = network_backward(net, logits, y, cfg.beta)
            sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.nesterov, 0.0, names=lam_names)
            project_network_lambdas(net)
        recompute_bn_stats(net, subset.images)
        snapshot(epoch + 1, "epoch")
    recompute_bn_stats(net, subset.images)
    snapshot(cfg.adapt_epochs, "final")
    return net, record


def bn_only_adapt(net: Network, subset: LabeledDataset, copy_net: bool = True) -> Network:
    """Label-free fallback: recalibrate BN on the subset, lambdas untouched."""
    if copy_net:
        net = copy.deepcopy(net)
    return recompute_bn_stats(net, subset.images)
