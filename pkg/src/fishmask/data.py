"""Datasets: synthetic generators, IDX/CSV loaders, splitting and sharding.

Everything here is a pure function of its arguments and seed.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# The named task every cross-module experiment is anchored to.
REFERENCE_BLOBS = dict(classes=4, per_class=500, feature_dim=20, center_separation=3.0,
                       noise_sigma=1.0, seed=0)


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"{self.X.shape[0]} feature rows but {self.y.size} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def feature_dim(self) -> int:
        return int(self.X.shape[1])

    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(t)) for x, t in zip(self.X, self.y)]

    def subset(self, idx, note: str | None = None) -> Dataset:
        prov = dict(self.provenance)
        if note:
            prov["subset"] = note
        return Dataset(self.X[idx], self.y[idx], self.class_count, prov)


def blob_centers(classes: int, feature_dim: int, separation: float) -> np.ndarray:
    """Class c sits ``separation`` along axis c (wrapping to larger radii past feature_dim)."""
    centers = np.zeros((classes, feature_dim))
    for c in range(classes):
        centers[c, c % feature_dim] = separation * (1 + c // feature_dim)
    return centers


def gen_blobs(classes: int, per_class: int, feature_dim: int, center_separation: float,
              noise_sigma: float, seed: int) -> Dataset:
    if min(classes, per_class, feature_dim) < 1 or center_separation <= 0 or noise_sigma <= 0:
        raise ValueError("gen_blobs parameters must be positive")
    rng = np.random.default_rng(seed)
    centers = blob_centers(classes, feature_dim, center_separation)
    y = np.repeat(np.arange(classes), per_class)
    X = centers[y] + rng.normal(0.0, noise_sigma, size=(y.size, feature_dim))
    prov = {"kind": "blobs", "classes": classes, "per_class": per_class,
            "feature_dim": feature_dim, "center_separation": center_separation,
            "noise_sigma": noise_sigma, "seed": seed}
    return Dataset(X, y, classes, prov)


def gen_moons(per_class: int, noise_sigma: float, seed: int, feature_dim: int = 2) -> Dataset:
    """Two interleaved half circles; extra dimensions (if any) are pure noise."""
    if per_class < 1 or noise_sigma < 0 or feature_dim < 2:
        raise ValueError("invalid gen_moons parameters")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, np.pi, size=2 * per_class)
    y = np.repeat([0, 1], per_class)
    X = np.zeros((2 * per_class, feature_dim))
    X[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
    X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
    X += rng.normal(0.0, noise_sigma, size=X.shape)
    prov = {"kind": "moons", "per_class": per_class, "noise_sigma": noise_sigma,
            "feature_dim": feature_dim, "seed": seed}
    return Dataset(X, y, 2, prov)


def shuffle(dataset: Dataset, seed) -> Dataset:
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(perm)


def train_eval_split(dataset: Dataset, seed: int, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(train_fraction * len(dataset)))
    return dataset.subset(perm[:cut], "train"), dataset.subset(perm[cut:], "eval")


def shard_iid(dataset: Dataset, n_shards: int, seed) -> list[Dataset]:
    """Seed-shuffle then deal round-robin; shard sizes differ by at most one."""
    if n_shards < 1:
        raise ValueError("need at least one shard")
    if n_shards > len(dataset):
        raise DataError(f"cannot split {len(dataset)} examples into {n_shards} shards")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(perm[i::n_shards], f"shard{i}/{n_shards}") for i in range(n_shards)]


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for IDX magic at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0 "
                        f"(expected 0x{expected_magic:08x})")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError(f"{path}: truncated IDX header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[header_len:]
    if len(body) != count:
        raise DataError(f"{path}: expected {count} data bytes after offset {header_len}, "
                        f"found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
             limit: int | None = None, class_count: int | None = None) -> Dataset:
    """MNIST-style IDX pair; pixels scaled to [0, 1] and flattened."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    classes = class_count if class_count is not None else max(2, int(y.max()) + 1 if y.size else 2)
    prov = {"kind": "idx", "images": str(images_path), "labels": str(labels_path), "limit": limit}
    return Dataset(X, y, classes, prov)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path: str | os.PathLike, label_column: int | str = -1,
             header: bool | None = None, class_count: int | None = None) -> Dataset:
    """Numeric CSV with one integer label column.

    ``header=None`` treats the first row as a header only when none of its
    cells parse as numbers.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty CSV")
    names = None
    if header is None:
        header = not any(_is_number(c) for c in rows[0])
    if header:
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    width = len(names) if names else len(rows[0]) if rows else 0
    if isinstance(label_column, str):
        if not names or label_column not in names:
            raise DataError(f"{path}: no column named {label_column!r}")
        label_idx = names.index(label_column)
    else:
        label_idx = label_column % width if width else 0
    X, y = [], []
    first_line = 2 if header else 1
    for line_no, row in enumerate(rows, start=first_line):
        if len(row) != width:
            raise DataError(f"{path}: row {line_no} has {len(row)} cells, expected {width}")
        feats = []
        for col, cell in enumerate(row):
            if col == label_idx:
                try:
                    label = int(cell)
                except ValueError:
                    raise DataError(f"{path}: row {line_no}, column {col}: label {cell!r} "
                                    "is not an integer") from None
                if label < 0:
                    raise DataError(f"{path}: row {line_no}, column {col}: negative label")
                continue
            try:
                feats.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {line_no}, column {col}: non-numeric "
                                f"feature {cell!r}") from None
        X.append(feats)
        y.append(label)
    if not X:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(y, dtype=np.int64)
    classes = class_count if class_count is not None else max(2, int(y.max()) + 1)
    return Dataset(np.asarray(X), y, classes, {"kind": "csv", "path": str(path),
                                               "label_column": label_column})


def dataset_from_dict(d: dict) -> Dataset:
    """Build a dataset from a task JSON ``dataset`` block."""
    d = dict(d)
    kind = d.pop("kind", "blobs")
    if kind == "blobs":
        return gen_blobs(**d)
    if kind == "moons":
        return gen_moons(**d)
    if kind == "idx":
        return load_idx(d["images"], d["labels"], d.get("limit"), d.get("class_count"))
    if kind == "csv":
        return load_csv(d["path"], d.get("label_column", -1), d.get("header"), d.get("class_count"))
    raise DataError(f"unknown dataset kind {kind!r}")
