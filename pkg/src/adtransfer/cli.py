"""Command-line front end: gen-data, train, eval, sweep.

Exit codes: 0 success, 2 usage, 3 numeric divergence, 4 I/O or format error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, evaluation, presets
from .datasets import (AnomalyTaskSpec, FormatError, IdxTaskFactory, InsufficientSamples, idx_task,
                       load_dataset, save_dataset, split_holdout)
from .metrics import evaluate_scores, reconstruction_losses
from .networks import load_checkpoint, save_checkpoint
from .tensor import DimensionError
from .trainer import DivergenceError, TrainConfig, run_pipeline
from .weighting import WeightConfig, WeightConfigError, calibrate, compute_weights, dump_weights_csv

log = logging.getLogger("adtransfer")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config keys

# file/flag key -> (where, field, parser); "w" means WeightConfig
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    try:
        return _BOOL[str(v).strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {v!r}") from None


def _opt_float(v):
    return None if str(v).strip().lower() in ("", "none") else float(v)


CONFIG_KEYS = {
    "lambda": ("t", "lam", float),
    "eta": ("w", "eta", float),
    "beta": ("w", "beta", float),
    "auto_calibrate": ("w", "auto_calibrate", _parse_bool),
    "normalize_weights": ("w", "normalize", _parse_bool),
    "w_adloss": ("t", "w_adloss", float),
    "lr": ("t", "lr", float),
    "batch_size": ("t", "batch_size", int),
    "pretrain_epochs": ("t", "pretrain_epochs", int),
    "adversarial_epochs": ("t", "adversarial_epochs", int),
    "seed": ("t", "seed", int),
    "arch": ("t", "arch", str),
    "leaky_slope": ("t", "leaky_slope", float),
    "dropout": ("t", "dropout", float),
    # beyond the documented core set
    "classifier_lr": ("t", "classifier_lr", _opt_float),
    "classifier_warmup": ("t", "classifier_warmup", int),
    "recalibrate_every": ("t", "recalibrate_every", int),
    "holdout_frac": ("t", "holdout_frac", float),
    "hist_every": ("t", "hist_every", int),
    "hist_bins": ("t", "hist_bins", int),
    "checkpoint_every": ("t", "checkpoint_every", int),
}

PRESETS = {"default": TrainConfig, "synthetic": presets.synthetic_train_config}


def _flat(cfg: TrainConfig) -> dict:
    out = {}
    for key, (where, name, _) in CONFIG_KEYS.items():
        out[key] = getattr(cfg.weight_cfg if where == "w" else cfg, name)
    return out


def resolve_config(preset: str, path: Optional[str], overrides: dict) -> tuple[TrainConfig, dict]:
    """preset defaults < config file < flags. Returns the config and where each key came from."""
    base = PRESETS[preset]()
    values = _flat(base)
    origin = {k: f"default ({preset})" for k in values}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        section = parser["train"] if parser.has_section("train") else parser[parser.default_section]
        for key, raw in section.items():
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            try:
                values[key] = CONFIG_KEYS[key][2](raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r}: {exc}") from exc
            origin[key] = f"file {path}"
    for key, v in overrides.items():
        if v is not None:
            values[key] = v
            origin[key] = "flag"
    t_kw, w_kw = {}, {}
    for key, v in values.items():
        where, name, _ = CONFIG_KEYS[key]
        (w_kw if where == "w" else t_kw)[name] = v
    try:
        cfg = replace(base, weight_cfg=WeightConfig(**w_kw), **t_kw)
    except (ValueError, TypeError, WeightConfigError) as exc:
        raise UsageError(str(exc)) from exc
    if cfg.arch not in ("mlp", "conv"):
        raise UsageError(f"arch must be mlp or conv, got {cfg.arch!r}")
    return cfg, origin


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; keys in a [train] section")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="defaults before the config file and flags are applied")
    for key, (_, _, conv) in CONFIG_KEYS.items():
        kind = _parse_bool if conv is _parse_bool else conv
        p.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", type=kind, default=None)


def _config_from_args(args) -> tuple[TrainConfig, dict]:
    overrides = {k: getattr(args, f"cfg_{k}") for k in CONFIG_KEYS}
    cfg, origin = resolve_config(args.preset, args.config, overrides)
    for key, value in _flat(cfg).items():
        log.info("config %s = %r  [%s]", key, value, origin[key])
    return cfg, origin


# ---------------------------------------------------------------- manifest

def build_id() -> str:
    version = __version__
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{version}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    build_id: str
    inputs: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _outputs(out_dir: Path) -> list[str]:
    return sorted(p.name for p in out_dir.iterdir() if p.name != "manifest.json")


def _write_metrics(path: Path, ev, extra: dict) -> None:
    """Deterministic JSON: no timestamps, sorted keys, repr-exact floats."""
    body = dict(extra)
    body["n_scored"] = int(len(ev.scores))
    body["auc"] = ev.auc
    body["separation_gap"] = list(ev.separation_gap)
    if ev.labels is not None and ev.auc is not None:
        lab = np.asarray(ev.labels)
        body["final_gap"] = float(ev.scores[lab == 1].mean() - ev.scores[lab == 0].mean())
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")


_handlers: list[logging.Handler] = []


def _setup_logging(out_dir: Optional[Path], verbose: bool) -> None:
    # only our own handlers are replaced, so repeated in-process calls do not stack
    root = logging.getLogger()
    for h in _handlers:
        root.removeHandler(h)
        h.close()
    _handlers.clear()
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    _handlers.append(logging.StreamHandler(sys.stderr))
    if out_dir is not None:
        _handlers.append(logging.FileHandler(out_dir / "run.log", mode="w"))
    for h in _handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    logging.getLogger("adtransfer").setLevel(logging.INFO)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if not 0.0 <= args.anomaly_rate < 1.0:
        raise UsageError(f"--anomaly-rate must lie in [0, 1), got {args.anomaly_rate}")
    out = _out_dir(args.out)
    _setup_logging(out, args.verbose)
    t0 = time.perf_counter()
    if args.source == "synthetic":
        over = {k: v for k, v in (("n_s", args.n_s), ("n_t", args.n_t)) if v is not None}
        data = presets.synthetic_task(args.anomaly_rate, args.seed, **over)
    else:
        needed = (args.source_images, args.source_labels, args.target_images, args.target_labels)
        if not all(needed):
            raise UsageError("--source idx needs --source-images/--source-labels/--target-images/--target-labels")
        spec = AnomalyTaskSpec(args.normal_class, args.anomaly_rate, args.n_s or 2000, args.n_t or 2000, args.seed)
        data = idx_task((args.source_images, args.source_labels), (args.target_images, args.target_labels),
                        spec, args.channels)
    info = save_dataset(data, out)
    log.info("wrote %d source / %d target samples (%s anomalies) to %s",
             info["n_s"], info["n_t"], info["n_anomalies"], out)
    RunManifest("gen-data", {"source": args.source, "anomaly_rate": args.anomaly_rate,
                             "normal_class": args.normal_class, "n_s": info["n_s"], "n_t": info["n_t"],
                             "realized_anomalies": info["n_anomalies"]},
                args.seed, build_id(), {}, _outputs(out),
                {"wall_s": time.perf_counter() - t0}).write(out)
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    _setup_logging(out, args.verbose)
    cfg, origin = _config_from_args(args)
    data = load_dataset(args.data)
    t0 = time.perf_counter()
    bundle, report, ev = run_pipeline(cfg, data, out)
    t_train = time.perf_counter() - t0
    report.write_csv(out / "epochs.csv")
    for epoch, hist in sorted(ev.histograms.items()):
        hist.write_csv(out / f"hist_epoch{epoch:03d}.csv")
    # final importance weights over the training part of the target domain
    train_part, _ = split_holdout(data, cfg.seed, cfg.holdout_frac)
    losses = reconstruction_losses(bundle, train_part.X_t)
    w_cfg = cfg.weight_cfg
    if w_cfg.auto_calibrate:
        w_cfg = WeightConfig(*calibrate(losses), True, w_cfg.normalize)
    dump_weights_csv(out / "weights.csv", losses, compute_weights(losses, w_cfg))
    extra = {"train_config": cfg.to_dict(), "data": str(args.data), "eta": report.eta, "beta": report.beta}
    save_checkpoint(bundle, out / "checkpoint.npz", extra)
    _write_metrics(out / "metrics.json", ev, {"split": "heldout", "config": cfg.to_dict(),
                                              "boundary_domain_accuracy": report.boundary_domain_accuracy})
    if ev.auc is not None:
        log.info("held-out AUC %.4f", ev.auc)
    RunManifest("train", _flat(cfg), cfg.seed, build_id(), {"data": str(args.data), "config_sources": origin},
                _outputs(out), {"train_s": t_train, "wall_s": time.perf_counter() - t0}).write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    _setup_logging(out, args.verbose)
    t0 = time.perf_counter()
    bundle, extra = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    expected = tuple(bundle.config.input_shape)
    if tuple(data.sample_shape) != expected:
        raise DimensionError(f"checkpoint expects samples of shape {expected}, dataset has {tuple(data.sample_shape)}")
    split = args.split
    tcfg = extra.get("train_config")
    if split == "heldout" and tcfg is None:
        log.warning("checkpoint does not record its training split; scoring every target sample")
        split = "all"
    if split == "heldout":
        _, data = split_holdout(data, tcfg["seed"], tcfg["holdout_frac"])
    scores = reconstruction_losses(bundle, data.X_t)
    labels = data.target_eval_labels
    if labels is None:
        log.warning("dataset has no target labels: writing scores only, AUC omitted")
    ev = evaluate_scores(scores, labels)
    with open(out / "scores.csv", "w") as fh:
        fh.write("index,score\n")
        fh.writelines(f"{i},{s!r}\n" for i, s in enumerate(scores.tolist()))
    if ev.auc is not None:
        ev.write_roc_csv(out / "roc.csv")
        evaluation.loss_histogram(bundle, data, args.bins).write_csv(out / "hist_final.csv")
        log.info("AUC %.4f on %d target samples", ev.auc, len(scores))
    _write_metrics(out / "metrics.json", ev, {"split": split, "checkpoint_config": tcfg})
    RunManifest("eval", {"split": split, "bins": args.bins}, None if tcfg is None else tcfg.get("seed"),
                build_id(), {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                _outputs(out), {"wall_s": time.perf_counter() - t0}).write(out)
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --grid {text!r}") from exc
    if not grid:
        raise UsageError("--grid is empty")
    return grid


def cmd_sweep(args) -> int:
    out = _out_dir(args.out)
    _setup_logging(out, args.verbose)
    cfg, origin = _config_from_args(args)
    axis = args.axis.replace("-", "_")
    grid = _parse_grid(args.grid)
    if axis == "anomaly_rate" and any(not 0.0 <= g < 1.0 for g in grid):
        raise UsageError("anomaly rates must lie in [0, 1)")
    if axis == "w_adloss" and any(g < 0 for g in grid):
        raise UsageError("w_adloss values must be nonnegative")
    if args.repeats < 1 or args.jobs < 1:
        raise UsageError("--repeats and --jobs must be >= 1")
    if args.data_source == "synthetic":
        factory = presets.synthetic_factory
    else:
        needed = (args.source_images, args.source_labels, args.target_images, args.target_labels)
        if not all(needed):
            raise UsageError("--data-source idx needs the four IDX paths")
        factory = IdxTaskFactory((args.source_images, args.source_labels),
                                 (args.target_images, args.target_labels),
                                 args.normal_class, args.n_s or 2000, args.n_t or 2000, args.channels)
    methods = ["proposed", "finetune"] if args.method == "both" else [args.method]
    t0 = time.perf_counter()
    points = []
    for m in methods:
        points += evaluation.sweep(cfg, axis, grid, factory, args.repeats, m, args.anomaly_rate, args.jobs)
    evaluation.write_sweep_csv(out / "sweep.csv", points)
    for p in points:
        log.info("%s %s=%g median AUC %.4f spread %.4f", p.method, axis, p.value, p.median_auc, p.spread)
    RunManifest("sweep", {**_flat(cfg), "axis": axis, "grid": grid, "repeats": args.repeats,
                          "methods": methods, "data_source": args.data_source,
                          "anomaly_rate": args.anomaly_rate},
                cfg.seed, build_id(), {"config_sources": origin}, _outputs(out),
                {"wall_s": time.perf_counter() - t0, "jobs": args.jobs}).write(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_idx_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source-images")
    p.add_argument("--source-labels")
    p.add_argument("--target-images")
    p.add_argument("--target-labels")
    p.add_argument("--normal-class", type=int, default=0)
    p.add_argument("--n-s", type=int, default=None, help="source sample count")
    p.add_argument("--n-t", type=int, default=None, help="target sample count")
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a source/target task to a directory")
    g.add_argument("--source", choices=("synthetic", "idx"), default="synthetic")
    g.add_argument("--anomaly-rate", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    _add_idx_flags(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("heldout", "all"), default="heldout")
    e.add_argument("--bins", type=int, default=30)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="median AUC over repeats along one axis")
    s.add_argument("--axis", choices=("anomaly-rate", "w-adloss"), required=True)
    s.add_argument("--grid", required=True, help="comma separated values")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--method", choices=("proposed", "finetune", "both"), default="proposed")
    s.add_argument("--anomaly-rate", type=float, default=0.25, help="task rate when sweeping w-adloss")
    s.add_argument("--data-source", choices=("synthetic", "idx"), default="synthetic")
    s.add_argument("--out", required=True)
    _add_idx_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad usage
    args.verbose = getattr(args, "verbose", False)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adtransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (FormatError, DimensionError, InsufficientSamples, OSError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
