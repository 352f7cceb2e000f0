"""Scoring, baselines and parameter sweeps built on top of the trainer."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datasets import DomainDataset, split_holdout
from .metrics import (EvalReport, LossHistogram, anomaly_scores, evaluate_scores, histogram_populations,
                      pairwise_auc, reconstruction_losses, roc_auc, separation_gap)
from .networks import ModelBundle, build_model
from .trainer import (EpochMonitor, LossReport, TrainConfig, arch_config, make_state, run_pipeline,
                      single_domain_epoch)

__all__ = ["EvalReport", "LossHistogram", "anomaly_scores", "evaluate_scores", "roc_auc", "pairwise_auc",
           "separation_gap", "reconstruction_losses", "loss_histogram", "baseline_finetune", "METHODS",
           "SweepPoint", "sweep", "write_sweep_csv"]

log = logging.getLogger(__name__)

AXES = ("anomaly_rate", "w_adloss")


def loss_histogram(bundle: ModelBundle, data: DomainDataset, bins: int = 30) -> LossHistogram:
    """Shared-edge histograms of source, target-normal and target-anomaly reconstruction losses."""
    if data.target_eval_labels is None:
        raise ValueError("loss_histogram needs target evaluation labels")
    src = reconstruction_losses(bundle, data.X_s)
    tgt = reconstruction_losses(bundle, data.X_t)
    labels = data.target_eval_labels
    return histogram_populations(src, tgt[labels == 0], tgt[labels == 1], bins)


def baseline_finetune(cfg: TrainConfig, data: DomainDataset, finetune_epochs: Optional[int] = None):
    """Source-only training, then unweighted fine-tuning on the whole target mixture.

    Uses the same split, seed and epoch budget as the proposed pipeline
    (``pretrain_epochs`` on the source, ``adversarial_epochs`` on the target unless
    ``finetune_epochs`` is given). Zero fine-tune epochs scores the source-only model.
    Returns ``(bundle, loss_report, eval_report)``.
    """
    n_ft = cfg.adversarial_epochs if finetune_epochs is None else finetune_epochs
    if n_ft < 0:
        raise ValueError("finetune_epochs must be nonnegative")
    train_data, eval_data = split_holdout(data, cfg.seed, cfg.holdout_frac)
    bundle = build_model(arch_config(cfg, data.sample_shape), cfg.seed, 0.0)
    monitor = EpochMonitor(eval_data, cfg.hist_every, cfg.hist_bins)
    view = train_data.train_view()
    state = make_state(bundle, cfg)
    report = LossReport()
    for _ in range(cfg.pretrain_epochs):
        row = single_domain_epoch(bundle, view, cfg, state, "source", "source_only")
        monitor.observe(bundle, row)
        report.rows.append(row)
    for _ in range(n_ft):
        row = single_domain_epoch(bundle, view, cfg, state, "target", "finetune")
        monitor.observe(bundle, row)
        report.rows.append(row)
    ev = evaluate_scores(anomaly_scores(bundle, eval_data.X_t), eval_data.target_eval_labels)
    ev.histograms = monitor.histograms
    ev.separation_gap = monitor.gaps
    return bundle, report, ev


METHODS: dict[str, Callable] = {"proposed": run_pipeline, "finetune": baseline_finetune}


@dataclass
class SweepPoint:
    axis: str
    value: float
    method: str
    aucs: list[float]

    @property
    def median_auc(self) -> float:
        return float(np.median(self.aucs))

    @property
    def spread(self) -> float:
        return float(np.max(self.aucs) - np.min(self.aucs))


def _one_run(args) -> float:
    method, cfg, data_factory, rate, seed = args
    data = data_factory(rate, seed)
    _, _, ev = METHODS[method](replace(cfg, seed=seed), data)
    return float("nan") if ev.auc is None else float(ev.auc)


def sweep(cfg: TrainConfig, axis: str, grid: Sequence[float],
          data_factory: Callable[[float, int], DomainDataset], repeats: int = 5,
          method: str = "proposed", default_rate: float = 0.25, jobs: int = 1) -> list[SweepPoint]:
    """Median-of-``repeats`` AUC at each grid value.

    Repeat r uses seed ``cfg.seed + r`` at every grid point, so points differ only
    in the swept value. ``data_factory(rate, seed)`` builds each task.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    tasks = []
    for value in grid:
        point_cfg = replace(cfg, w_adloss=float(value)) if axis == "w_adloss" else cfg
        rate = float(value) if axis == "anomaly_rate" else default_rate
        tasks += [(method, point_cfg, data_factory, rate, cfg.seed + r) for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            aucs = list(pool.map(_one_run, tasks))
    else:
        aucs = [_one_run(t) for t in tasks]
    points = []
    for i, value in enumerate(grid):
        chunk = aucs[i * repeats:(i + 1) * repeats]
        points.append(SweepPoint(axis, float(value), method, chunk))
        log.info("%s=%g %s median AUC %.4f", axis, value, method, points[-1].median_auc)
    return points


def write_sweep_csv(path: str | Path, points: Sequence[SweepPoint]) -> None:
    repeats = max(len(p.aucs) for p in points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "method", "median_auc", "auc_spread"] + [f"auc_{r}" for r in range(repeats)])
        for p in points:
            w.writerow([p.axis, repr(p.value), p.method, repr(p.median_auc), repr(p.spread)]
                       + [repr(a) for a in p.aucs])
