"""Importance weights for target samples from their reconstruction losses."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .tensor import stable_sigmoid

DEFAULT_ETA = -1.0
DEFAULT_BETA = 1.0
LOSS_FLOOR = 1e-12


class WeightConfigError(ValueError):
    pass


@dataclass
class WeightConfig:
    eta: float = DEFAULT_ETA
    beta: float = DEFAULT_BETA
    auto_calibrate: bool = True
    normalize: bool = True

    def __post_init__(self):
        if not self.eta < 0:
            raise WeightConfigError(f"eta must be negative, got {self.eta}")
        if not self.beta > 0:
            raise WeightConfigError(f"beta must be positive, got {self.beta}")


@dataclass
class SampleWeights:
    raw: np.ndarray
    normalized: np.ndarray


def raw_weight(losses, cfg: WeightConfig) -> np.ndarray:
    """sigmoid(eta * loss + beta); a plain array, so nothing backpropagates through it."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0):
        raise ValueError("reconstruction losses must be nonnegative")
    if not (cfg.eta < 0 and cfg.beta > 0):
        raise WeightConfigError("need eta < 0 and beta > 0")
    return stable_sigmoid(cfg.eta * losses + cfg.beta)


def normalize_weights(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalize an empty batch of weights")
    return raw / raw.mean()


def compute_weights(losses, cfg: WeightConfig) -> SampleWeights:
    raw = raw_weight(losses, cfg)
    if not cfg.normalize:
        return SampleWeights(raw, raw.copy())
    # normalize in log space: every raw weight may underflow for very large losses
    log_raw = -np.logaddexp(0.0, -(cfg.eta * np.asarray(losses, dtype=np.float64) + cfg.beta))
    log_norm = log_raw - (logsumexp(log_raw) - np.log(log_raw.size))
    return SampleWeights(raw, np.exp(log_norm))


def calibrate(losses, floor: float = LOSS_FLOOR) -> tuple[float, float]:
    """Pick (eta, beta) so the median-loss sample gets raw weight 0.5.

    eta = -1/median and beta = 1, which makes the weight a function of
    loss/median only. All-zero losses fall back to (-1, 1).
    """
    losses = np.asarray(losses, dtype=np.float64)
    med = float(np.median(losses)) if losses.size else 0.0
    if med <= floor:
        return DEFAULT_ETA, DEFAULT_BETA
    eta = -1.0 / med
    return eta, -eta * med


def dump_weights_csv(path: str | Path, losses, weights: SampleWeights, sample_ids=None) -> None:
    losses = np.asarray(losses)
    ids = range(len(losses)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "recon_loss", "raw_weight", "normalized_weight"])
        for i, l, r, n in zip(ids, losses, weights.raw, weights.normalized):
            w.writerow([i, repr(float(l)), repr(float(r)), repr(float(n))])
