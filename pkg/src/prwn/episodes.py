"""Datasets, labeled/unlabeled splits and semi-supervised episode sampling.

On-disk dataset layout (``save_dataset`` / ``load_dataset``)::

    <dir>/manifest.json          {"format": "prwn-dataset", "version": 1, "dim": d,
                                  "dtype": "<f4", "classes": [{"id", "file", "n_points"}]}
    <dir>/class_<id>.bin         little-endian float32, row-major [n_points x d]
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DataError, StorageError

DATASET_FORMAT = "prwn-dataset"
DATASET_VERSION = 1


@dataclass
class ClassRecord:
    id: int
    points: np.ndarray  # [n_points x d], float32


@dataclass
class Dataset:
    classes: list[ClassRecord]

    def __post_init__(self):
        if not self.classes:
            raise DataError("dataset has no classes")
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DataError("class ids are not unique")
        dims = {c.points.shape[1] for c in self.classes if c.points.ndim == 2}
        if len(dims) != 1 or any(c.points.ndim != 2 for c in self.classes):
            raise DataError(f"all points must share one dimension, found {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.classes[0].points.shape[1]

    @property
    def class_ids(self) -> list[int]:
        return [c.id for c in self.classes]

    def points(self, class_id: int) -> np.ndarray:
        return self._by_id[class_id].points

    @cached_property
    def _by_id(self) -> dict[int, ClassRecord]:
        return {c.id: c for c in self.classes}

    def subset(self, class_ids: Sequence[int]) -> Dataset:
        by_id = self._by_id
        return Dataset([by_id[i] for i in class_ids])

    def partition(self, *counts: int) -> list[Dataset]:
        """Split classes, in stored order, into consecutive disjoint groups."""
        if sum(counts) > len(self.classes):
            raise CapacityError(
                f"partition needs {sum(counts)} classes, dataset has {len(self.classes)}")
        out, start = [], 0
        for n in counts:
            out.append(Dataset(self.classes[start:start + n]))
            start += n
        return out


@dataclass
class DatasetSplit:
    dataset: Dataset
    labeled: dict[int, np.ndarray]
    unlabeled: dict[int, np.ndarray]
    label_fraction: float
    seed: int

    @property
    def class_ids(self) -> list[int]:
        return self.dataset.class_ids


@dataclass(frozen=True)
class EpisodeSpec:
    n_classes: int = 5
    shots: int = 1
    unlabeled_per_class: int = 10
    queries_per_class: int = 5
    distractor_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        counts = dict(n_classes=self.n_classes, shots=self.shots,
                      unlabeled_per_class=self.unlabeled_per_class,
                      queries_per_class=self.queries_per_class,
                      distractor_classes=self.distractor_classes)
        for name, v in counts.items():
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.queries_per_class < 1:
            raise ConfigError("queries_per_class must be >= 1")

    def replace(self, **changes) -> EpisodeSpec:
        return EpisodeSpec(**{**self.__dict__, **changes})


@dataclass
class Episode:
    class_ids: tuple[int, ...]
    support_x: np.ndarray
    support_y: np.ndarray
    unlabeled_x: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    # provenance; only analysis code may look at these
    unlabeled_distractor: np.ndarray = field(repr=False)
    unlabeled_source: np.ndarray = field(repr=False)
    support_source: np.ndarray = field(repr=False)
    query_source: np.ndarray = field(repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def without_unlabeled(self) -> Episode:
        d = self.unlabeled_x.shape[1]
        return Episode(
            class_ids=self.class_ids, support_x=self.support_x, support_y=self.support_y,
            unlabeled_x=np.zeros((0, d), self.unlabeled_x.dtype),
            query_x=self.query_x, query_y=self.query_y,
            unlabeled_distractor=np.zeros(0, bool),
            unlabeled_source=np.zeros((0, 2), np.int64),
            support_source=self.support_source, query_source=self.query_source,
        )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def n_labeled(size: int, fraction: float) -> int:
    """Nearest integer to ``fraction * size`` (halves round up), at least 1."""
    return max(1, min(size, math.floor(fraction * size + 0.5)))


def split_dataset(ds: Dataset, fraction: float, seed: int = 0) -> DatasetSplit:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    labeled, unlabeled = {}, {}
    for c in ds.classes:
        size = c.points.shape[0]
        if size == 0:
            raise DataError(f"class {c.id} is empty")
        if size < 2:
            raise DataError(f"class {c.id} has {size} point(s); at least 2 are required")
        perm = rng.permutation(size)
        k = n_labeled(size, fraction)
        labeled[c.id] = np.sort(perm[:k])
        unlabeled[c.id] = np.sort(perm[k:])
    return DatasetSplit(ds, labeled, unlabeled, fraction, seed)


def sample_episode(split: DatasetSplit, spec: EpisodeSpec, rng=None) -> Episode:
    """Draw one N_c-way episode, plus N_d distractor classes, from ``split``.

    Support and query come from the labeled pool of each class (disjoint);
    unlabeled points come from the unlabeled pool and are shuffled together
    with the distractor points.
    """
    rng = _as_rng(spec.seed if rng is None else rng)
    ids = split.class_ids
    need = spec.n_classes + spec.distractor_classes
    if len(ids) < need:
        raise CapacityError(
            f"episode needs {need} classes ({spec.n_classes} way + {spec.distractor_classes} "
            f"distractor), split has {len(ids)}")
    order = rng.permutation(len(ids))
    chosen = [ids[i] for i in order[:spec.n_classes]]
    distract = [ids[i] for i in order[spec.n_classes:need]]
    ds = split.dataset

    sup_x, sup_y, sup_src = [], [], []
    qry_x, qry_y, qry_src = [], [], []
    unl_x, unl_flag, unl_src = [], [], []
    for label, cid in enumerate(chosen):
        lab = split.labeled[cid]
        if lab.size < spec.shots + spec.queries_per_class:
            raise CapacityError(
                f"class {cid}: {lab.size} labeled points, need "
                f"{spec.shots + spec.queries_per_class} (shots + queries)")
        if split.unlabeled[cid].size < spec.unlabeled_per_class:
            raise CapacityError(
                f"class {cid}: {split.unlabeled[cid].size} unlabeled points, "
                f"need {spec.unlabeled_per_class}")
        pts = ds.points(cid)
        perm = rng.permutation(lab)
        s_idx = perm[:spec.shots]
        q_idx = perm[spec.shots:spec.shots + spec.queries_per_class]
        u_idx = rng.choice(split.unlabeled[cid], spec.unlabeled_per_class, replace=False)
        sup_x.append(pts[s_idx]), sup_y.append(np.full(s_idx.size, label))
        qry_x.append(pts[q_idx]), qry_y.append(np.full(q_idx.size, label))
        unl_x.append(pts[u_idx]), unl_flag.append(np.zeros(u_idx.size, bool))
        sup_src.append(np.column_stack([np.full(s_idx.size, cid), s_idx]))
        qry_src.append(np.column_stack([np.full(q_idx.size, cid), q_idx]))
        unl_src.append(np.column_stack([np.full(u_idx.size, cid), u_idx]))
    for cid in distract:
        pool = split.unlabeled[cid]
        if pool.size < spec.unlabeled_per_class:
            raise CapacityError(
                f"distractor class {cid}: {pool.size} unlabeled points, "
                f"need {spec.unlabeled_per_class}")
        u_idx = rng.choice(pool, spec.unlabeled_per_class, replace=False)
        unl_x.append(ds.points(cid)[u_idx]), unl_flag.append(np.ones(u_idx.size, bool))
        unl_src.append(np.column_stack([np.full(u_idx.size, cid), u_idx]))

    d = ds.dim
    dtype = ds.classes[0].points.dtype
    ux = np.concatenate(unl_x) if unl_x else np.zeros((0, d), dtype)
    uf = np.concatenate(unl_flag) if unl_flag else np.zeros(0, bool)
    us = np.concatenate(unl_src).astype(np.int64) if unl_src else np.zeros((0, 2), np.int64)
    shuffle = rng.permutation(ux.shape[0])
    return Episode(
        class_ids=tuple(chosen),
        support_x=np.concatenate(sup_x), support_y=np.concatenate(sup_y),
        unlabeled_x=ux[shuffle].reshape(-1, d),
        query_x=np.concatenate(qry_x), query_y=np.concatenate(qry_y),
        unlabeled_distractor=uf[shuffle],
        unlabeled_source=us[shuffle].reshape(-1, 2),
        support_source=np.concatenate(sup_src).astype(np.int64),
        query_source=np.concatenate(qry_src).astype(np.int64),
    )


def episode_stream(split: DatasetSplit, spec: EpisodeSpec, n: int, seed: int | None = None
                   ) -> Iterator[Episode]:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    for _ in range(n):
        yield sample_episode(split, spec, rng)


def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def generate_synthetic_dataset(n_classes: int, points_per_class: int, latent_dim: int,
                               input_dim: int, warp_depth: int, seed: int, *,
                               cluster_std: float = 0.25, separation: float = 1.0,
                               nuisance_std: float = 0.0) -> Dataset:
    """Gaussian class blobs in a latent space pushed through a random invertible warp.

    Class means are drawn at random and rescaled so the closest pair sits
    exactly ``separation`` apart. Points are padded to ``input_dim`` with
    class-independent Gaussian nuisance coordinates (std ``nuisance_std``;
    zero gives plain zero padding) and then passed through ``warp_depth`` layers of (random rotation,
    coordinatewise ``x + a * tanh(b * x)``), which is strictly monotone per
    coordinate and therefore invertible.
    """
    if not input_dim >= latent_dim >= 2:
        raise ConfigError(f"need input_dim >= latent_dim >= 2, got {input_dim}, {latent_dim}")
    if n_classes < 1 or points_per_class < 1 or warp_depth < 0:
        raise ConfigError("n_classes and points_per_class must be >= 1, warp_depth >= 0")
    if separation < 1.0:
        raise ConfigError("class means must be at least unit-separated")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, latent_dim))
    if n_classes > 1:
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(n_classes)] = np.inf
        means *= separation / dist.min()
    labels = np.repeat(np.arange(n_classes), points_per_class)
    z = means[labels] + cluster_std * rng.standard_normal((labels.size, latent_dim))
    x = np.zeros((labels.size, input_dim))
    x[:, :latent_dim] = z
    if input_dim > latent_dim and nuisance_std > 0:
        x[:, latent_dim:] = nuisance_std * rng.standard_normal((labels.size, input_dim - latent_dim))
    for _ in range(warp_depth):
        x = x @ _random_rotation(rng, input_dim)
        a = rng.uniform(0.5, 1.5, input_dim)
        b = rng.uniform(0.5, 2.0, input_dim)
        x = x + a * np.tanh(b * x)
    x = x.astype(np.float32)
    return Dataset([ClassRecord(c, x[labels == c].copy()) for c in range(n_classes)])


def save_dataset(ds: Dataset, out_dir: str | Path, force: bool = False) -> Path:
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise StorageError(f"{manifest_path} exists; pass force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for c in ds.classes:
            name = f"class_{c.id}.bin"
            (out / name).write_bytes(np.ascontiguousarray(c.points, dtype="<f4").tobytes())
            entries.append({"id": int(c.id), "file": name, "n_points": int(c.points.shape[0])})
        manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "dim": ds.dim,
                    "dtype": "<f4", "classes": entries}
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(str(e)) from e
    return manifest_path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise StorageError(f"cannot read dataset manifest {manifest_path}: {e}") from e
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{manifest_path}: not a {DATASET_FORMAT} v{DATASET_VERSION} manifest")
    d = int(manifest["dim"])
    classes = []
    for entry in manifest["classes"]:
        try:
            raw = (manifest_path.parent / entry["file"]).read_bytes()
        except OSError as e:
            raise StorageError(str(e)) from e
        pts = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if pts.size != entry["n_points"] * d:
            raise DataError(f"class {entry['id']}: expected {entry['n_points']}x{d} floats, "
                            f"file holds {pts.size}")
        classes.append(ClassRecord(int(entry["id"]), pts.reshape(entry["n_points"], d)))
    return Dataset(classes)
