"""Compression-excitation objective and the lambda projection."""
from __future__ import annotations

import numpy as np


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean cross-entropy of integer `labels` under softmax(`logits`)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy: empty batch")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    n = logits.shape[0]
    p = np.exp(log_softmax(logits))
    p[np.arange(n), labels] -= 1.0
    return p / n


def lambda_penalty(lambda_vector, squared: bool = False) -> float:
    lam = np.asarray(lambda_vector, dtype=np.float64)
    sq = float(np.dot(lam, lam))
    return sq if squared else float(np.sqrt(sq))


def lambda_penalty_grad(lambda_vector, squared: bool = False) -> np.ndarray:
    """Gradient of ||lam||_2 (or ||lam||_2^2); the subgradient 0 is used at lam = 0."""
    lam = np.asarray(lambda_vector, dtype=np.float64)
    if squared:
        return 2.0 * lam
    nrm = np.linalg.norm(lam)
    if nrm == 0.0:
        return np.zeros_like(lam)
    return lam / nrm


def ib_loss(logits, labels, lambda_vector, beta: float, squared: bool = False) -> float:
    """Mean cross-entropy minus ``beta * ||lambda||_2``."""
    if beta < 0:
        raise ValueError(f"ib_loss: beta must be >= 0, got {beta}")
    lam = np.asarray(lambda_vector, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("ib_loss: lambda entries must be >= 0")
    return cross_entropy(logits, labels) - beta * lambda_penalty(lam, squared)


def project_lambda(lambda_vector) -> np.ndarray:
    """ReLU projection onto lam >= 0."""
    return np.maximum(np.asarray(lambda_vector, dtype=np.float64), 0.0)
