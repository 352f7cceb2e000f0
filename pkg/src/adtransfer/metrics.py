"""Reconstruction-loss anomaly scores, ROC/AUC and loss-distribution summaries."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .networks import ModelBundle, forward_autoencode


def reconstruction_losses(bundle: ModelBundle, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Per-sample MSE of D(F(x)) against x in eval mode."""
    out = []
    for start in range(0, len(X), batch_size):
        x = T.Tensor(X[start:start + batch_size])
        _, recon = forward_autoencode(bundle, x, training=False)
        out.append(T.mse_per_sample(recon, x).values)
    return np.concatenate(out) if out else np.zeros(0)


def anomaly_scores(bundle: ModelBundle, samples: np.ndarray) -> np.ndarray:
    """Larger reconstruction loss means more likely anomalous."""
    return reconstruction_losses(bundle, samples)


def roc_auc(scores, labels) -> tuple[float, np.ndarray]:
    """Trapezoidal ROC area with points at every distinct score threshold.

    Labels are 1 for the positive (anomalous) class. Tied scores move along
    the diagonal, so each tied positive/negative pair counts one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # integer double-area keeps the sum exact until the final division
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2.0 * n_pos * n_neg)
    points = np.column_stack([fp / n_neg, tp / n_pos])
    return auc, points


def pairwise_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie) by enumerating every pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def separation_gap(normal_scores, anomaly_scores_) -> float:
    """Mean anomaly score minus mean normal score."""
    return float(np.mean(anomaly_scores_) - np.mean(normal_scores))


@dataclass
class LossHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "src", "tgt_normal", "tgt_anomaly"])
            for i in range(len(self.edges) - 1):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1]))]
                           + [int(self.counts[k][i]) for k in ("src", "tgt_normal", "tgt_anomaly")])


def histogram_populations(src: np.ndarray, tgt_normal: np.ndarray, tgt_anomaly: np.ndarray,
                          bins: int = 30) -> LossHistogram:
    pops = {"src": np.asarray(src), "tgt_normal": np.asarray(tgt_normal),
            "tgt_anomaly": np.asarray(tgt_anomaly)}
    everything = np.concatenate([p for p in pops.values() if p.size] or [np.zeros(1)])
    lo, hi = float(everything.min()), float(everything.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return LossHistogram(edges, {k: np.histogram(v, bins=edges)[0] for k, v in pops.items()})


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: Optional[np.ndarray]
    auc: Optional[float]
    roc_points: Optional[np.ndarray]
    histograms: dict[int, LossHistogram] = field(default_factory=dict)
    separation_gap: list[float] = field(default_factory=list)

    def write_roc_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            for f, t in self.roc_points:
                w.writerow([repr(float(f)), repr(float(t))])


def evaluate_scores(scores: np.ndarray, labels: Optional[np.ndarray]) -> EvalReport:
    if labels is None or len(np.unique(labels)) < 2:
        return EvalReport(scores, labels, None, None)
    auc, pts = roc_auc(scores, labels)
    return EvalReport(scores, labels, auc, pts)
