import logging
from dataclasses import dataclass

import numpy as np

from utils.errors import LossError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Margin m and mixing weight lambda of the Hinge+SD objective"""

    margin: float = 100.0
    lam: float = 0.8

    def __post_init__(self):
        if not self.margin > 0:
            raise LossError(f"Margin must be positive, got {self.margin}")
        if not 0.0 <= self.lam <= 1.0:
            raise LossError(f"Lambda must be within [0,1], got {self.lam}")


def _as_distances(d_match, d_nonmatch):
    d_match = np.asarray(d_match, dtype=np.float64).ravel()
    d_nonmatch = np.asarray(d_nonmatch, dtype=np.float64).ravel()
    if d_match.size == 0 or d_nonmatch.size == 0:
        raise LossError("Distance arrays must not be empty")
    if d_match.size != d_nonmatch.size:
        raise LossError(f"Distance arrays differ in length: {d_match.size} vs {d_nonmatch.size}")
    if np.any(d_match < 0) or np.any(d_nonmatch < 0):
        raise LossError("Distances must be non-negative")
    return d_match, d_nonmatch


def hinge_terms(d_match, d_nonmatch, m):
    """Per-pair hinge values max(0, m + d_match - d_nonmatch)"""
    d_match, d_nonmatch = _as_distances(d_match, d_nonmatch)
    return np.maximum(0.0, m + d_match - d_nonmatch)


def hinge_loss(d_match, d_nonmatch, m):
    """
    Mean hinge loss over a batch of (match, non-match) distance pairs

    Args:
        d_match (array-like): Distances to the true matches
        d_nonmatch (array-like): Distances to the negatives
        m (float): Margin

    Returns:
        float: (1/n) * sum(max(0, m + d_match - d_nonmatch))
    """
    return float(hinge_terms(d_match, d_nonmatch, m).mean())


def batch_sd(values):
    """Population standard deviation of a batch (0 for a singleton)"""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise LossError("Cannot take the standard deviation of an empty batch")
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def hinge_sd_loss(d_match, d_nonmatch, cfg):
    """
    Hinge loss mixed with the batch spread of both distance sets

    Args:
        d_match (array-like): Distances to the true matches
        d_nonmatch (array-like): Distances to the negatives
        cfg (LossConfig): Margin and mixing weight

    Returns:
        float: lam * hinge + (1 - lam) * (sd(d_match) + sd(d_nonmatch))
    """
    hinge = hinge_loss(d_match, d_nonmatch, cfg.margin)
    spread = batch_sd(d_match) + batch_sd(d_nonmatch)
    return cfg.lam * hinge + (1.0 - cfg.lam) * spread


def per_triplet_loss(d_match, d_nonmatch, cfg):
    """Hinge+SD loss of each triplet on its own (the spread term vanishes)"""
    return cfg.lam * hinge_terms(d_match, d_nonmatch, cfg.margin)


def _sd_grad(values):
    n = values.size
    sd = batch_sd(values)
    if sd == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / (n * sd)


def hinge_sd_grad(d_match, d_nonmatch, cfg):
    """
    Derivatives of hinge_sd_loss with respect to both distance arrays

    The hinge kink takes the zero (inactive) subgradient.

    Returns:
        tuple: (dL/dd_match, dL/dd_nonmatch)
    """
    d_match, d_nonmatch = _as_distances(d_match, d_nonmatch)
    n = d_match.size
    active = (cfg.margin + d_match - d_nonmatch) > 0.0
    hinge_part = cfg.lam * active.astype(np.float64) / n
    g_match = hinge_part + (1.0 - cfg.lam) * _sd_grad(d_match)
    g_nonmatch = -hinge_part + (1.0 - cfg.lam) * _sd_grad(d_nonmatch)
    return g_match, g_nonmatch
