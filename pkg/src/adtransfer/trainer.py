"""Two-stage training: unbalanced AE pretraining, then weighted adversarial alignment."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from . import tensor as T
from .datasets import DomainDataset, DomainView, minibatch_iter, split_holdout
from .networks import (ArchConfig, ModelBundle, build_model, domain_logits, forward_autoencode,
                       forward_domain, save_checkpoint)
from .optim import Adam
from .weighting import WeightConfig, calibrate, compute_weights

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; carries where it happened."""

    def __init__(self, stage: str, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss in {stage} epoch {epoch} batch {batch} {detail}".strip())
        self.stage, self.epoch, self.batch = stage, epoch, batch


@dataclass
class TrainConfig:
    lam: float = 0.5
    w_adloss: float = 1.0
    lr: float = 0.01
    classifier_lr: Optional[float] = None
    batch_size: int = 32
    pretrain_epochs: int = 20
    adversarial_epochs: int = 60
    seed: int = 0
    arch: str = "mlp"
    leaky_slope: float = 0.2
    dropout: float = 0.5
    weight_cfg: WeightConfig = field(default_factory=WeightConfig)
    recalibrate_every: int = 0  # 0: calibrate once at the stage boundary
    classifier_warmup: int = 0  # classifier-only epochs at the stage boundary
    holdout_frac: float = 0.5
    hist_every: int = 0
    hist_bins: int = 30
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.w_adloss < 0:
            raise ValueError("w_adloss must be nonnegative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")
        if min(self.pretrain_epochs, self.adversarial_epochs, self.recalibrate_every,
               self.classifier_warmup) < 0:
            raise ValueError("epoch counts must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_cfg"] = asdict(self.weight_cfg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weight_cfg"), dict):
            d["weight_cfg"] = WeightConfig(**d["weight_cfg"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRow:
    stage: str
    epoch: int
    source_recon: float
    target_recon: float
    adversarial_loss: float = float("nan")
    domain_accuracy: float = float("nan")
    target_normal_recon: float = float("nan")
    target_anomaly_recon: float = float("nan")
    heldout_domain_accuracy: float = float("nan")
    separation_gap: float = float("nan")
    auc: float = float("nan")


@dataclass
class LossReport:
    rows: list[EpochRow] = field(default_factory=list)
    eta: float = float("nan")
    beta: float = float("nan")
    boundary_domain_accuracy: float = float("nan")  # held-out, after any classifier warmup

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str, stage: Optional[str] = None) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if stage is None or r.stage == stage])

    def write_csv(self, path: str | Path) -> None:
        names = [f.name for f in fields(EpochRow)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, n) if isinstance(getattr(r, n), str) else repr(getattr(r, n))
                            for n in names])


@dataclass
class TrainState:
    """Optimizers and weight-function parameters that persist across epochs."""
    ae_opt: Adam
    clf_opt: Adam
    weight_cfg: WeightConfig
    global_epoch: int = 0


def make_state(bundle: ModelBundle, cfg: TrainConfig) -> TrainState:
    return TrainState(Adam(bundle.ae_params, lr=cfg.lr),
                      Adam(bundle.classifier_params, lr=cfg.classifier_lr or cfg.lr),
                      WeightConfig(**asdict(cfg.weight_cfg)))


def _check(loss: T.Tensor, stage: str, epoch: int, batch: int) -> None:
    if not np.isfinite(loss.values).all():
        raise DivergenceError(stage, epoch, batch)


def _ae_forward(bundle: ModelBundle, xs: np.ndarray, xt: np.ndarray):
    x = T.Tensor(np.concatenate([xs, xt]))
    feats, recon = forward_autoencode(bundle, x, training=True)
    losses = T.mse_per_sample(recon, x)
    b = len(xs)
    return feats, losses[:b], losses[b:]


def pretrain_epoch(bundle: ModelBundle, view: DomainView, cfg: TrainConfig, state: TrainState) -> EpochRow:
    """One pass minimizing E_s[L] + lam * E_t[L] over F and D; the classifier is not touched."""
    src, tgt = [], []
    epoch = state.global_epoch
    for b, (xs, xt) in enumerate(minibatch_iter(view, cfg.batch_size, cfg.seed, epoch)):
        state.ae_opt.zero_grad()
        try:
            _, ls, lt = _ae_forward(bundle, xs, xt)
            loss = ls.mean() + cfg.lam * lt.mean()
        except T.NonFiniteError as exc:
            raise DivergenceError("pretrain", epoch, b, str(exc)) from exc
        _check(loss, "pretrain", epoch, b)
        T.backward(loss)
        state.ae_opt.step()
        src.append(ls.values.mean())
        tgt.append(lt.values.mean())
    state.global_epoch += 1
    return EpochRow("pretrain", epoch, float(np.mean(src)), float(np.mean(tgt)))


def weighted_adversarial_loss(bundle: ModelBundle, src_features: T.Tensor, tgt_features: T.Tensor,
                              weights, training: bool = True):
    """Weighted domain objective and the classifier's loss.

    objective = mean_t[w log C(F(x))] + mean_s[log(1 - C(F(x)))]. The
    classifier minimizes ``-objective`` (weighted BCE, source 0, target 1);
    the encoder sees that gradient through the reversal layer. Returns
    ``(classifier_loss, objective, target_terms, source_terms, p_src, p_tgt)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (tgt_features.shape[0],):
        raise ValueError(f"{len(weights)} weights for a target batch of {tgt_features.shape[0]}")
    b = src_features.shape[0]
    z = domain_logits(bundle, T.concat([src_features, tgt_features]), training)
    z_s, z_t = z[:b], z[b:]
    # log C = log_sigmoid(z), log(1 - C) = log_sigmoid(-z); C clamped to [eps, 1 - eps]
    tgt_terms = T.log_sigmoid(z_t, LOG_CLAMP) * weights
    src_terms = T.log_sigmoid(-z_s, LOG_CLAMP)
    objective = tgt_terms.mean() + src_terms.mean()
    p_s, p_t = T.stable_sigmoid(z_s.values), T.stable_sigmoid(z_t.values)
    return -objective, objective, tgt_terms, src_terms, p_s, p_t


def adversarial_epoch(bundle: ModelBundle, view: DomainView, cfg: TrainConfig, state: TrainState) -> EpochRow:
    """Weighted reconstruction plus weighted minimax, one combined backward per batch."""
    src, tgt, adv, acc = [], [], [], []
    epoch = state.global_epoch
    bundle.grl_coefficient = cfg.w_adloss
    for b, (xs, xt) in enumerate(minibatch_iter(view, cfg.batch_size, cfg.seed, epoch)):
        state.ae_opt.zero_grad()
        state.clf_opt.zero_grad()
        try:
            feats, ls, lt = _ae_forward(bundle, xs, xt)
            # weights come from this forward pass as plain arrays: no gradient through them
            w = compute_weights(lt.values, state.weight_cfg).normalized
            recon = ls.mean() + cfg.lam * (lt * w).mean()
            n = len(xs)
            clf_loss, objective, _, _, p_s, p_t = weighted_adversarial_loss(
                bundle, feats[:n], feats[n:], w, training=True)
            loss = recon + clf_loss
        except T.NonFiniteError as exc:
            raise DivergenceError("adversarial", epoch, b, str(exc)) from exc
        _check(loss, "adversarial", epoch, b)
        T.backward(loss)
        state.ae_opt.step()
        state.clf_opt.step()
        src.append(ls.values.mean())
        tgt.append(lt.values.mean())
        adv.append(objective.item())
        acc.append(0.5 * ((p_s < 0.5).mean() + (p_t >= 0.5).mean()))
    state.global_epoch += 1
    return EpochRow("adversarial", epoch, float(np.mean(src)), float(np.mean(tgt)),
                    float(np.mean(adv)), float(np.mean(acc)))


def single_domain_epoch(bundle: ModelBundle, view: DomainView, cfg: TrainConfig, state: TrainState,
                        domain: str = "target", stage: str = "finetune") -> EpochRow:
    """Plain unweighted reconstruction on one domain; the other never enters the network."""
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    losses = []
    epoch = state.global_epoch
    pick = 0 if domain == "source" else 1
    for b, pair in enumerate(minibatch_iter(view, cfg.batch_size, cfg.seed, epoch)):
        state.ae_opt.zero_grad()
        x = T.Tensor(pair[pick])
        try:
            _, recon = forward_autoencode(bundle, x, training=True)
            loss = T.mse_per_sample(recon, x).mean()
        except T.NonFiniteError as exc:
            raise DivergenceError(stage, epoch, b, str(exc)) from exc
        _check(loss, stage, epoch, b)
        T.backward(loss)
        state.ae_opt.step()
        losses.append(loss.item())
    state.global_epoch += 1
    mean = float(np.mean(losses))
    if domain == "source":
        return EpochRow(stage, epoch, mean, float(metrics.reconstruction_losses(bundle, view.X_t).mean()))
    return EpochRow(stage, epoch, float(metrics.reconstruction_losses(bundle, view.X_s).mean()), mean)


def finetune_epoch(bundle: ModelBundle, view: DomainView, cfg: TrainConfig, state: TrainState) -> EpochRow:
    return single_domain_epoch(bundle, view, cfg, state, "target", "finetune")


def domain_accuracy(bundle: ModelBundle, X_s: np.ndarray, X_t: np.ndarray) -> float:
    """Balanced accuracy of the model's own classifier in eval mode (source 0, target 1)."""
    def probs(X):
        feats, _ = forward_autoencode(bundle, T.Tensor(X), training=False)
        return forward_domain(bundle, feats, training=False).values
    return float(0.5 * ((probs(X_s) < 0.5).mean() + (probs(X_t) >= 0.5).mean()))


def warmup_classifier(bundle: ModelBundle, view: DomainView, cfg: TrainConfig, state: TrainState,
                      epochs: int) -> None:
    """Train only the classifier on frozen encoder features (unweighted)."""
    for e in range(epochs):
        for xs, xt in minibatch_iter(view, cfg.batch_size, cfg.seed, 10_000 + e):
            state.clf_opt.zero_grad()
            x = T.Tensor(np.concatenate([xs, xt]))
            feats, _ = forward_autoencode(bundle, x, training=False)
            n = len(xs)
            clf_loss, *_ = weighted_adversarial_loss(
                bundle, feats[:n].detach(), feats[n:].detach(), np.ones(len(xt)), training=True)
            T.backward(clf_loss)
            state.clf_opt.step()


class EpochMonitor:
    """Per-epoch evaluation on a held-out split; the only place eval labels are read."""

    def __init__(self, eval_data: DomainDataset, hist_every: int = 0, hist_bins: int = 30):
        self.data = eval_data
        self.hist_every = hist_every
        self.hist_bins = hist_bins
        self.histograms: dict[int, metrics.LossHistogram] = {}
        self.gaps: list[float] = []

    def observe(self, bundle: ModelBundle, row: EpochRow) -> None:
        d = self.data
        src = metrics.reconstruction_losses(bundle, d.X_s)
        tgt = metrics.reconstruction_losses(bundle, d.X_t)
        row.heldout_domain_accuracy = domain_accuracy(bundle, d.X_s, d.X_t)
        labels = d.target_eval_labels
        if labels is None:
            return
        normal, anomal = tgt[labels == 0], tgt[labels == 1]
        row.target_normal_recon = float(normal.mean()) if normal.size else float("nan")
        if anomal.size:
            row.target_anomaly_recon = float(anomal.mean())
            row.separation_gap = metrics.separation_gap(normal, anomal)
            if normal.size:
                row.auc = metrics.roc_auc(tgt, labels)[0]
        self.gaps.append(row.separation_gap)
        if self.hist_every and (row.epoch % self.hist_every == 0):
            self.histograms[row.epoch] = metrics.histogram_populations(src, normal, anomal, self.hist_bins)


def arch_config(cfg: TrainConfig, sample_shape: tuple[int, ...]) -> ArchConfig:
    return ArchConfig(cfg.arch, tuple(sample_shape), cfg.leaky_slope, cfg.dropout)


def _calibrate(bundle: ModelBundle, view: DomainView, state: TrainState, report: LossReport) -> None:
    if not state.weight_cfg.auto_calibrate:
        return
    eta, beta = calibrate(metrics.reconstruction_losses(bundle, view.X_t))
    state.weight_cfg = WeightConfig(eta, beta, True, state.weight_cfg.normalize)
    report.eta, report.beta = eta, beta
    log.info("weights calibrated: eta=%.6g beta=%.6g", eta, beta)


def train(bundle: ModelBundle, train_data: DomainDataset, cfg: TrainConfig,
          monitor: Optional[EpochMonitor] = None, out_dir: Optional[Path] = None) -> LossReport:
    """Stage 1 then stage 2 on ``train_data``; labels are stripped before any update."""
    view = train_data.train_view()
    state = make_state(bundle, cfg)
    report = LossReport(eta=state.weight_cfg.eta, beta=state.weight_cfg.beta)

    def finish(row: EpochRow) -> None:
        if monitor is not None:
            monitor.observe(bundle, row)
        report.rows.append(row)
        if out_dir is not None and cfg.checkpoint_every and (row.epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(bundle, out_dir / f"checkpoint_epoch{row.epoch:03d}.npz")

    for _ in range(cfg.pretrain_epochs):
        finish(pretrain_epoch(bundle, view, cfg, state))
    if cfg.adversarial_epochs:
        _calibrate(bundle, view, state, report)
        if cfg.classifier_warmup:
            warmup_classifier(bundle, view, cfg, state, cfg.classifier_warmup)
        if monitor is not None:
            report.boundary_domain_accuracy = domain_accuracy(bundle, monitor.data.X_s, monitor.data.X_t)
    for e in range(cfg.adversarial_epochs):
        if cfg.recalibrate_every and e and e % cfg.recalibrate_every == 0:
            _calibrate(bundle, view, state, report)
        finish(adversarial_epoch(bundle, view, cfg, state))
    return report


def run_pipeline(cfg: TrainConfig, data: DomainDataset, out_dir: Optional[str | Path] = None):
    """Split, train both stages, and score the held-out target split.

    Returns ``(bundle, loss_report, eval_report)``.
    """
    train_data, eval_data = split_holdout(data, cfg.seed, cfg.holdout_frac)
    bundle = build_model(arch_config(cfg, data.sample_shape), cfg.seed, cfg.w_adloss)
    monitor = EpochMonitor(eval_data, cfg.hist_every, cfg.hist_bins)
    out = Path(out_dir) if out_dir is not None else None
    report = train(bundle, train_data, cfg, monitor, out)
    scores = metrics.anomaly_scores(bundle, eval_data.X_t)
    ev = metrics.evaluate_scores(scores, eval_data.target_eval_labels)
    ev.histograms = monitor.histograms
    ev.separation_gap = monitor.gaps
    return bundle, report, ev
