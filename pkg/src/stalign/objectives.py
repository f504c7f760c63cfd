"""Contrastive alignment losses and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor, l2_normalize, log_softmax, matmul, scale


@dataclass
class ObjectiveConfig:
    temperature: float = 0.1
    lambda_spot: float = 1.0 / 3.0
    lambda_niche: float = 1.0 / 3.0
    normalize: bool = True

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        check_lambdas(self.lambda_spot, self.lambda_niche)


def check_lambdas(lambda_spot: float, lambda_niche: float) -> None:
    if lambda_spot < 0 or lambda_niche < 0 or lambda_spot + lambda_niche > 1 + 1e-12:
        raise ConfigError(
            f"need lambda_spot, lambda_niche >= 0 and sum <= 1, got {lambda_spot}, {lambda_niche}"
        )


def _logits(a: Tensor, b: Tensor, tau: float, normalize: bool) -> Tensor:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"contrastive inputs must be matching (u, d) matrices, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ConfigError(f"contrastive loss needs a batch of at least 2 pairs, got {a.shape[0]}")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if normalize:
        a, b = l2_normalize(a, axis=1), l2_normalize(b, axis=1)
    return scale(matmul(a, b.T), 1.0 / tau)


def _diagonal_mean(log_probs: Tensor) -> Tensor:
    u = log_probs.shape[0]
    eye = np.eye(u, dtype=log_probs.dtype)
    return scale((log_probs * eye).sum(), 1.0 / u)


def symmetric_infonce(a: Tensor, b: Tensor, tau: float = 0.1, normalize: bool = True) -> Tensor:
    """Two-directional InfoNCE with in-batch negatives; row i of a and b are positives."""
    logits = _logits(a, b, tau, normalize)
    rows = _diagonal_mean(log_softmax(logits, axis=1))
    cols = _diagonal_mean(log_softmax(logits, axis=0))
    return scale(rows + cols, -0.5)


def niche_infonce(niche_image: Tensor, niche_gene: Tensor, tau: float = 0.1, normalize: bool = True) -> Tensor:
    return symmetric_infonce(niche_image, niche_gene, tau, normalize)


def spot_niche_loss(fused_spot: Tensor, fused_niche: Tensor, tau: float = 0.1, normalize: bool = True) -> Tensor:
    """One-directional InfoNCE: fused spots query their own fused niches."""
    logits = _logits(fused_spot, fused_niche, tau, normalize)
    return scale(_diagonal_mean(log_softmax(logits, axis=1)), -1.0)


def total_loss(l_spot, l_niche, l_ns, lambda_spot: float, lambda_niche: float):
    check_lambdas(lambda_spot, lambda_niche)
    w_ns = 1.0 - lambda_spot - lambda_niche
    if isinstance(l_spot, Tensor):
        return scale(l_spot, lambda_spot) + scale(l_niche, lambda_niche) + scale(l_ns, w_ns)
    return lambda_spot * l_spot + lambda_niche * l_niche + w_ns * l_ns


def effective_lambdas(cfg: ObjectiveConfig, use_lns: bool) -> tuple[float, float]:
    """Loss weights after the spot-niche term is optionally switched off.

    Dropping the term renormalizes the two contrastive weights to sum to 1,
    which sets the spot-niche weight to exactly zero.
    """
    if use_lns:
        return cfg.lambda_spot, cfg.lambda_niche
    total = cfg.lambda_spot + cfg.lambda_niche
    if total <= 0:
        raise ConfigError("cannot drop the spot-niche loss when both other weights are zero")
    lam_s = cfg.lambda_spot / total
    return lam_s, 1.0 - lam_s

