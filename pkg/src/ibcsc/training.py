"""SGD training with the compression-excitation loss and lambda logging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import LabeledDataset
from .loss import ib_loss, project_lambda
from .network import Network, network_backward, network_forward
from .tensor_ops import NonFiniteError

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    beta: float = 0.001
    lr0: float = 0.1
    epochs: int = 280
    batch_size: int = 256
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    seed: int = 0
    squared_penalty: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("TrainConfig.beta must be >= 0")
        if not self.lr0 > 0:
            raise ValueError("TrainConfig.lr0 must be > 0")
        if self.epochs < 1:
            raise ValueError("TrainConfig.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")


@dataclass
class LambdaTrajectory:
    lambdas: List[List[float]] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    test_acc: List[Optional[float]] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    step_min_lambda: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.lambdas)

    def mean_lambda(self) -> np.ndarray:
        return np.array([np.mean(v) if len(v) else 0.0 for v in self.lambdas])

    def write_csv(self, path):
        """Long format: one row per (epoch, layer)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "layer_index", "lambda", "train_acc", "test_acc"])
            for e, lams in enumerate(self.lambdas):
                for i, lam in enumerate(lams):
                    w.writerow([e + 1, i, _fmt(lam), _fmt(self.train_acc[e]), _fmt(self.test_acc[e])])

    def write_metrics_csv(self, path):
        """One row per epoch."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "loss", "train_acc", "test_acc", "mean_lambda"])
            for e in range(len(self)):
                w.writerow([e + 1, _fmt(self.lr[e]), _fmt(self.loss[e]), _fmt(self.train_acc[e]),
                            _fmt(self.test_acc[e]), _fmt(self.mean_lambda()[e])])


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def cosine_lr(epoch: float, total_epochs: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * epoch / total)) / 2``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def is_lambda(name: str) -> bool:
    return name.rsplit(".", 1)[-1] == "lam"


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocity: Dict[str, np.ndarray], lr: float, momentum: float = 0.9,
             nesterov: bool = True, weight_decay: float = 0.0,
             exempt: Callable[[str], bool] = is_lambda, names=None):
    """In-place SGD with (Nesterov) momentum and coupled weight decay.

    ``v <- mu*v + d`` with ``d = grad + wd*param``; the Nesterov update is
    ``param -= lr*(d + mu*v)``, otherwise ``param -= lr*v``. Parameters for
    which ``exempt(name)`` holds get no weight decay.
    """
    if lr < 0:
        raise ValueError("sgd_step: lr must be >= 0")
    for name in (names if names is not None else params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"sgd_step: {name} param {p.shape} vs grad {g.shape}")
        d = g if (weight_decay == 0 or exempt(name)) else g + weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += d
        if nesterov:
            p -= lr * (d + momentum * v)
        else:
            p -= lr * v
    return params


def _first_nonfinite(params) -> Optional[str]:
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            return name
    return None


def project_network_lambdas(net: Network) -> float:
    """Apply the ReLU projection to every layer lambda; return the new minimum."""
    layers = net.csc_layers()
    if not layers:
        return 0.0
    net.set_lambda_vector(project_lambda(net.lambda_vector()))
    return float(net.lambda_vector().min())


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(net: Network, ds: LabeledDataset, batch_size: int = 256) -> float:
    """Eval-mode accuracy."""
    if len(ds) == 0:
        raise ValueError("evaluate: empty dataset")
    correct = 0
    for idx in iterate_batches(len(ds), batch_size, None):
        logits = network_forward(net, ds.images[idx], "eval")
        correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels[idx]))
    return correct / len(ds)


def train(net: Network, dataset: LabeledDataset, cfg: TrainConfig,
          test: Optional[LabeledDataset] = None, on_step=None):
    """Epoch loop: shuffle, forward, loss, backward, SGD step, lambda projection.

    Layer Lipschitz constants are refreshed at the end of every epoch.
    `on_step(net, epoch, step)` is called after each projected update.
    Returns ``(net, trajectory)``; `net` is modified in place.
    """
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    if dataset.sample_shape != net.input_shape:
        raise ValueError(f"train: dataset samples {dataset.sample_shape} vs net input {net.input_shape}")
    rng = np.random.default_rng(cfg.seed)
    velocity: Dict[str, np.ndarray] = {}
    params = net.parameters()
    traj = LambdaTrajectory()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        loss_sum, correct = 0.0, 0
        for step, idx in enumerate(iterate_batches(len(dataset), cfg.batch_size, rng)):
            x, y = dataset.images[idx], dataset.labels[idx]
            where = f"epoch {epoch + 1}, step {step + 1}"
            try:
                logits = network_forward(net, x, "train")
            except NonFiniteError as exc:
                raise DivergenceError(f"{exc} at {where}") from None
            loss = ib_loss(logits, y, net.lambda_vector(), cfg.beta, cfg.squared_penalty)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at {where}")
            grads = network_backward(net, logits, y, cfg.beta, cfg.squared_penalty)
            sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
            bad = _first_nonfinite(params)
            if bad is not None:
                raise DivergenceError(f"parameter {bad} became non-finite at {where}")
            traj.step_min_lambda.append(project_network_lambdas(net))
            if on_step is not None:
                on_step(net, epoch, step)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        try:
            net.refresh_lipschitz()
        except NonFiniteError as exc:
            raise DivergenceError(f"{exc} at end of epoch {epoch + 1}") from None
        traj.lambdas.append(net.lambda_vector().tolist())
        traj.train_acc.append(correct / len(dataset))
        traj.test_acc.append(evaluate(net, test) if test is not None else None)
        traj.loss.append(loss_sum / len(dataset))
        traj.lr.append(lr)
        log.info("epoch %d lr %.4g loss %.4f train_acc %.4f mean_lambda %.4g", epoch + 1, lr,
                 traj.loss[-1], traj.train_acc[-1], traj.mean_lambda()[-1])
    return net, traj


__all__ = ["DivergenceError", "LambdaTrajectory", "TrainConfig", "cosine_lr", "evaluate",
           "project_network_lambdas", "sgd_step", "train"]
