"""Anomaly-transfer tasks: source normals only, unlabeled target mixtures."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

IDX_IMAGES_U8 = 0x00000803
IDX_LABELS_U8 = 0x00000801
RATE_GRID = (0.05, 0.15, 0.25, 0.35, 0.45)


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class InsufficientSamples(ValueError):
    pass


# ---------------------------------------------------------------- IDX

def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (labels: 1-D, images: 3-D)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError("IDX writer only handles uint8 payloads")
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def read_idx(path: str | Path) -> np.ndarray:
    """Raw uint8 contents of an IDX file with its declared shape."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError("file shorter than the 4-byte magic", len(buf))
    zero0, zero1, dtype_code, ndim = struct.unpack_from(">BBBB", buf, 0)
    if zero0 != 0 or zero1 != 0 or dtype_code != 0x08 or ndim not in (1, 3):
        magic = struct.unpack_from(">I", buf, 0)[0]
        raise FormatError(f"bad magic 0x{magic:08x}", 0)
    dims_end = 4 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    expected = int(np.prod(dims))
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, found {payload}", len(buf))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", dims_end + expected)
    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=dims_end).reshape(dims)


def parse_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as (N, H, W) floats, plus integer labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"image file has magic for {images.ndim}-D data, expected 0x{IDX_IMAGES_U8:08x}", 3)
    if labels.ndim != 1:
        raise FormatError(f"label file has magic for {labels.ndim}-D data, expected 0x{IDX_LABELS_U8:08x}", 3)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def to_rgb28(images: np.ndarray, size: int = 28, channels: int = 3) -> np.ndarray:
    """(N, H, W) grayscale -> (N, channels, size, size), bilinear resize when needed."""
    n, h, w = images.shape
    if (h, w) != (size, size):
        images = ndimage.zoom(images, (1, size / h, size / w), order=1)
        images = np.clip(images, 0.0, 1.0)
    return np.repeat(images[:, None], channels, axis=1)


# ---------------------------------------------------------------- tabular CSV

def write_labeled_csv(path: str | Path, X: np.ndarray, labels) -> None:
    X = np.asarray(X).reshape(len(X), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"px{i}" for i in range(X.shape[1])])
        for lab, row in zip(labels, X):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_labeled_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError("CSV header must start with 'label'", 0)
        rows = list(reader)
    width = len(header) - 1
    for i, row in enumerate(rows):
        if len(row) != width + 1:
            raise FormatError(f"row {i + 1} has {len(row)} fields, header has {width + 1}", 0)
    if not rows:
        return np.zeros((0, width)), np.zeros(0, dtype=np.int64)
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 1:], arr[:, 0].astype(np.int64)


# ---------------------------------------------------------------- task construction

@dataclass(frozen=True)
class DomainView:
    """What the trainer may see: two sample matrices and nothing else."""
    X_s: np.ndarray
    X_t: np.ndarray


@dataclass
class DomainDataset:
    X_s: np.ndarray
    X_t: np.ndarray
    target_eval_labels: Optional[np.ndarray] = None  # 1 = anomaly
    sample_shape: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_shape:
            self.sample_shape = tuple(self.X_s.shape[1:])
        if self.target_eval_labels is not None and len(self.target_eval_labels) != len(self.X_t):
            raise ValueError("one eval label per target sample required")

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.sample_shape))

    def train_view(self) -> DomainView:
        return DomainView(self.X_s, self.X_t)

    @property
    def anomaly_rate(self) -> Optional[float]:
        if self.target_eval_labels is None or len(self.target_eval_labels) == 0:
            return None
        return float(np.mean(self.target_eval_labels))


@dataclass(frozen=True)
class AnomalyTaskSpec:
    normal_class: int = 0
    anomaly_rate: float = 0.25
    n_s: int = 500
    n_t: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise ValueError(f"anomaly_rate must lie in [0, 1), got {self.anomaly_rate}")
        if self.n_s < 1 or self.n_t < 1:
            raise ValueError("sample counts must be positive")


@dataclass
class TaskHalf:
    X: np.ndarray
    eval_labels: np.ndarray
    indices: np.ndarray


def _pick(pool: np.ndarray, n: int, rng, what: str) -> np.ndarray:
    if n > len(pool):
        raise InsufficientSamples(f"need {n} {what} samples, only {len(pool)} available "
                                  f"(short by {n - len(pool)})")
    return rng.choice(pool, size=n, replace=False)


def build_anomaly_task(images: np.ndarray, labels: np.ndarray, spec: AnomalyTaskSpec,
                       role: str) -> TaskHalf:
    """One domain of a task: ``role='source'`` keeps normals only, ``'target'`` mixes."""
    rng = np.random.default_rng([spec.seed, 0 if role == "source" else 1])
    normal_pool = np.flatnonzero(labels == spec.normal_class)
    other_pool = np.flatnonzero(labels != spec.normal_class)
    if role == "source":
        idx = _pick(normal_pool, spec.n_s, rng, "normal")
        flags = np.zeros(len(idx), dtype=np.int64)
    elif role == "target":
        n_anom = int(round(spec.anomaly_rate * spec.n_t))
        norm = _pick(normal_pool, spec.n_t - n_anom, rng, "normal")
        anom = _pick(other_pool, n_anom, rng, "anomalous")
        idx = np.concatenate([norm, anom])
        flags = np.concatenate([np.zeros(len(norm), np.int64), np.ones(n_anom, np.int64)])
        order = rng.permutation(len(idx))
        idx, flags = idx[order], flags[order]
    else:
        raise ValueError(f"role must be 'source' or 'target', got {role!r}")
    return TaskHalf(images[idx], flags, idx)


def combine_halves(source: TaskHalf, target: TaskHalf, provenance: Optional[dict] = None) -> DomainDataset:
    return DomainDataset(source.X, target.X, target.eval_labels,
                         tuple(source.X.shape[1:]), dict(provenance or {}))


def idx_task(source_files: tuple[str, str], target_files: tuple[str, str], spec: AnomalyTaskSpec,
             channels: int = 3) -> DomainDataset:
    """Source normals from one IDX pair, a target mixture from another.

    Both domains are resized to 28x28 with the gray channel repeated ``channels`` times.
    """
    halves = []
    for files, role in ((source_files, "source"), (target_files, "target")):
        images, labels = parse_idx(*files)
        halves.append(build_anomaly_task(to_rgb28(images, channels=channels), labels, spec, role))
    if halves[0].X.shape[1:] != halves[1].X.shape[1:]:
        raise FormatError(f"source samples {halves[0].X.shape[1:]} and target samples "
                          f"{halves[1].X.shape[1:]} differ in shape", 0)
    prov = {"generator": "idx", "source_files": list(source_files), "target_files": list(target_files),
            "normal_class": spec.normal_class, "anomaly_rate": spec.anomaly_rate, "seed": spec.seed,
            "n_anomalies": int(halves[1].eval_labels.sum()), "channels": channels}
    return combine_halves(halves[0], halves[1], prov)


@dataclass(frozen=True)
class IdxTaskFactory:
    """Picklable ``(rate, seed) -> DomainDataset`` for sweeps over IDX files."""
    source_files: tuple[str, str]
    target_files: tuple[str, str]
    normal_class: int = 0
    n_s: int = 2000
    n_t: int = 2000
    channels: int = 3

    def __call__(self, rate: float, seed: int) -> DomainDataset:
        spec = AnomalyTaskSpec(self.normal_class, rate, self.n_s, self.n_t, seed)
        return idx_task(self.source_files, self.target_files, spec, self.channels)


@dataclass
class SynthConfig:
    dim: int = 2
    sigma: float = 0.25
    aspect: float = 0.5  # std of the second axis relative to the first
    shift: float = 1.5
    rotation_deg: float = 30.0
    anomaly_distance: float = 6.0  # in units of sigma, from the target-normal mean
    anomaly_spread: float = 1.0  # anomaly cluster std relative to sigma
    anomaly_rate: float = 0.25
    n_s: int = 400
    n_t: int = 400
    source_mean: tuple[float, ...] = ()
    embed_dim: int = 0  # >0: observe the latent points through a fixed random sinusoid map
    embed_freq: float = 1.0
    embed_scale: float = 1.0
    embed_seed: int = 0


def embedding_map(cfg: SynthConfig):
    """Fixed map R^dim -> R^embed_dim, x = sin(z W + b), independent of the data seed."""
    rng = np.random.default_rng([cfg.embed_seed, 0xE3BED])
    W = cfg.embed_freq * rng.standard_normal((cfg.dim, cfg.embed_dim))
    b = rng.uniform(0, 2 * np.pi, cfg.embed_dim)
    return lambda z: cfg.embed_scale * np.sin(z @ W + b)


def _rotation(dim: int, degrees: float) -> np.ndarray:
    R = np.eye(dim)
    th = np.deg2rad(degrees)
    R[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    return R


def synth_domain_pair(cfg: SynthConfig, seed: int) -> DomainDataset:
    """Gaussian source cluster, affinely shifted target normals, a distant anomaly cluster.

    Target normals are source draws pushed through a rotation about the source
    mean followed by a translation of length ``shift`` along the first axis.
    Anomalies sit ``anomaly_distance`` sigmas beyond the target mean, on the
    far side from the source.
    """
    rng = np.random.default_rng(seed)
    d = cfg.dim
    mu_s = np.zeros(d) if not cfg.source_mean else np.asarray(cfg.source_mean, float)
    shift_dir = np.zeros(d)
    shift_dir[0] = 1.0
    R = _rotation(d, cfg.rotation_deg)
    mu_t = mu_s + cfg.shift * shift_dir
    n_anom = int(round(cfg.anomaly_rate * cfg.n_t))
    n_norm = cfg.n_t - n_anom

    scale = np.full(d, cfg.sigma)
    scale[1:] *= cfg.aspect
    X_s = mu_s + scale * rng.standard_normal((cfg.n_s, d))
    base = scale * rng.standard_normal((n_norm, d))
    X_tn = mu_t + base @ R.T
    away = shift_dir if cfg.shift > 0 else np.eye(d)[min(1, d - 1)]
    mu_a = mu_t + cfg.anomaly_distance * cfg.sigma * away
    X_ta = mu_a + cfg.anomaly_spread * cfg.sigma * rng.standard_normal((n_anom, d))
    X_t = np.concatenate([X_tn, X_ta])
    if cfg.embed_dim:
        phi = embedding_map(cfg)
        X_s, X_t = phi(X_s), phi(X_t)
    flags = np.concatenate([np.zeros(n_norm, np.int64), np.ones(n_anom, np.int64)])
    order = rng.permutation(cfg.n_t)
    prov = {"generator": "synthetic", "seed": seed, "anomaly_rate": cfg.anomaly_rate,
            "n_anomalies": n_anom, **{k: v for k, v in vars(cfg).items() if k != "anomaly_rate"}}
    prov["source_mean"] = list(mu_s)
    return DomainDataset(X_s, X_t[order], flags[order], (X_s.shape[1],), prov)


def split_holdout(data: DomainDataset, seed: int, frac: float = 0.5) -> tuple[DomainDataset, DomainDataset]:
    """Split both domains into (train, eval) parts; the target split is stratified."""
    rng = np.random.default_rng([seed, 7])
    s_perm = rng.permutation(len(data.X_s))
    n_s_tr = int(round(len(data.X_s) * frac))
    labels = data.target_eval_labels
    if labels is None:
        t_perm = rng.permutation(len(data.X_t))
        n_t_tr = int(round(len(data.X_t) * frac))
        t_tr, t_ev = t_perm[:n_t_tr], t_perm[n_t_tr:]
    else:
        t_tr, t_ev = [], []
        for flag in (0, 1):
            pool = rng.permutation(np.flatnonzero(labels == flag))
            cut = int(round(len(pool) * frac))
            t_tr.append(pool[:cut])
            t_ev.append(pool[cut:])
        t_tr, t_ev = np.sort(np.concatenate(t_tr)), np.sort(np.concatenate(t_ev))

    def part(s_idx, t_idx):
        lab = None if labels is None else labels[t_idx]
        return DomainDataset(data.X_s[s_idx], data.X_t[t_idx], lab, data.sample_shape, dict(data.provenance))

    return part(s_perm[:n_s_tr], t_tr), part(s_perm[n_s_tr:], t_ev)


def minibatch_iter(view: DomainView, batch_size: int, seed: int, epoch: int
                   ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Paired (source, target) batches from independent per-domain shuffles.

    The longer domain sets the batch count; the shorter one recycles through
    fresh permutations. Partial trailing batches are dropped.
    """
    n_s, n_t = len(view.X_s), len(view.X_t)
    if batch_size < 1 or batch_size > min(n_s, n_t):
        raise ValueError(f"batch_size {batch_size} invalid for domains of size {n_s} and {n_t}")
    n_batches = max(n_s, n_t) // batch_size
    rng_s = np.random.default_rng([seed, epoch, 0])
    rng_t = np.random.default_rng([seed, epoch, 1])

    def order(n, rng):
        need = n_batches * batch_size
        reps = -(-need // n)
        return np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]

    s_idx, t_idx = order(n_s, rng_s), order(n_t, rng_t)
    for b in range(n_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        yield view.X_s[s_idx[sl]], view.X_t[t_idx[sl]]


# ---------------------------------------------------------------- dataset directories

def save_dataset(data: DomainDataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labeled_csv(out / "source.csv", data.X_s, np.zeros(len(data.X_s), np.int64))
    t_labels = data.target_eval_labels if data.target_eval_labels is not None else -np.ones(len(data.X_t))
    write_labeled_csv(out / "target.csv", data.X_t, t_labels)
    manifest = {
        "sample_shape": list(data.sample_shape),
        "n_s": int(len(data.X_s)),
        "n_t": int(len(data.X_t)),
        "n_anomalies": None if data.target_eval_labels is None else int(data.target_eval_labels.sum()),
        "realized_anomaly_rate": data.anomaly_rate,
        "provenance": data.provenance,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return manifest


def load_dataset(in_dir: str | Path) -> DomainDataset:
    src = Path(in_dir)
    manifest = json.loads((src / "dataset.json").read_text())
    X_s, _ = read_labeled_csv(src / "source.csv")
    X_t, t_labels = read_labeled_csv(src / "target.csv")
    shape = tuple(manifest["sample_shape"])
    labels = None if np.any(t_labels < 0) else t_labels
    return DomainDataset(X_s.reshape((-1,) + shape), X_t.reshape((-1,) + shape), labels, shape,
                         manifest.get("provenance", {}))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
