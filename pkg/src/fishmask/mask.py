"""Fixed sparse update masks.

A mask is a sorted set of exactly ``k`` parameter indices. Forced inclusions
(e.g. a freshly added classifier layer) count toward ``k``. When several
scores tie at the cut-off, lower indices win so that ``|mask| == k`` always.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._io import atomic_write
from .fisher import FisherDiag, top_k_order

ORIGINS = ("fish", "random", "segment", "full")

MASK_MAGIC = b"FSHM"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sHBxQQII")


@dataclass
class SparseMask:
    indices: np.ndarray
    n_params: int
    origin: str = "fish"
    worker_id: int = 0
    n_workers: int = 1

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n_params):
            raise ValueError(f"mask indices must lie in [0, {self.n_params})")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown mask origin {self.origin!r}")
        self.indices = idx

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @property
    def sparsity(self) -> float:
        return self.k / self.n_params

    def to_bool(self) -> np.ndarray:
        out = np.zeros(self.n_params, dtype=bool)
        out[self.indices] = True
        return out

    def to_dict(self) -> dict:
        return {"n_params": self.n_params, "k": self.k, "origin": self.origin,
                "worker_id": self.worker_id, "n_workers": self.n_workers,
                "indices": self.indices.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> SparseMask:
        return cls(np.asarray(d["indices"], dtype=np.int64), d["n_params"], d.get("origin", "fish"),
                   d.get("worker_id", 0), d.get("n_workers", 1))


@dataclass
class SparseDelta:
    """(index, value) pairs over a flat parameter vector."""

    indices: np.ndarray
    values: np.ndarray
    n_params: int = field(default=0)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values must have equal length")

    def __len__(self) -> int:
        return int(self.indices.size)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))


def full_mask(n_params: int) -> SparseMask:
    return SparseMask(np.arange(n_params), n_params, "full")


def sparsity_to_k(total_params: int, sparsity: float) -> int:
    """Round-half-up of ``sparsity * total_params``, at least 1."""
    if not 0.0 < sparsity <= 1.0:
        raise ValueError(f"mask sparsity must lie in (0, 1], got {sparsity}")
    return max(1, int(math.floor(sparsity * total_params + 0.5)))


def _forced(always_include: Iterable[int] | range | None, n_params: int) -> np.ndarray:
    if always_include is None:
        return np.empty(0, dtype=np.int64)
    forced = np.unique(np.asarray(list(always_include), dtype=np.int64))
    if forced.size and (forced[0] < 0 or forced[-1] >= n_params):
        raise ValueError("forced indices out of range")
    return forced


def _top_k_excluding(scores: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
    order = top_k_order(scores)
    if exclude.size:
        order = order[~np.isin(order, exclude)]
    return order[:k]


def build_fish_mask(fisher: FisherDiag | np.ndarray, k: int,
                    always_include: Iterable[int] | range | None = None) -> SparseMask:
    scores = fisher.scores if isinstance(fisher, FisherDiag) else np.asarray(fisher, dtype=np.float64)
    n = scores.size
    forced = _forced(always_include, n)
    if not max(1, forced.size) <= k <= n:
        raise ValueError(f"k={k} out of range [{max(1, forced.size)}, {n}]")
    chosen = _top_k_excluding(scores, k - forced.size, forced)
    return SparseMask(np.sort(np.concatenate([forced, chosen])), n, "fish")


def build_random_mask(total_params: int, k: int, seed: int,
                      always_include: Iterable[int] | range | None = None) -> SparseMask:
    forced = _forced(always_include, total_params)
    if not max(1, forced.size) <= k <= total_params:
        raise ValueError(f"k={k} out of range [{max(1, forced.size)}, {total_params}]")
    pool = np.setdiff1d(np.arange(total_params), forced, assume_unique=True)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=k - forced.size, replace=False)
    return SparseMask(np.sort(np.concatenate([forced, chosen])), total_params, "random")


def segment_fisher_strided(fisher: FisherDiag | np.ndarray | int, n_workers: int) -> list[np.ndarray]:
    """Pool i holds indices M*n + i, so pools interleave and partition the vector."""
    if n_workers < 2:
        raise ValueError("segmentation needs at least 2 workers")
    if isinstance(fisher, (int, np.integer)):
        n = int(fisher)
    elif isinstance(fisher, FisherDiag):
        n = fisher.scores.size
    else:
        n = np.asarray(fisher).size
    return [np.arange(i, n, n_workers) for i in range(n_workers)]


def build_segmented_masks(fisher: FisherDiag | np.ndarray, k_per_worker: int, n_workers: int,
                          always_include: Iterable[int] | range | None = None) -> list[SparseMask]:
    """Top-k within each strided pool; forced indices stay with the pool that owns them."""
    scores = fisher.scores if isinstance(fisher, FisherDiag) else np.asarray(fisher, dtype=np.float64)
    pools = segment_fisher_strided(scores, n_workers)
    if not 1 <= k_per_worker <= min(p.size for p in pools):
        raise ValueError(f"k_per_worker={k_per_worker} does not fit the smallest pool "
                         f"({min(p.size for p in pools)})")
    forced_all = _forced(always_include, scores.size)
    masks = []
    for i, pool in enumerate(pools):
        forced = forced_all[forced_all % n_workers == i]
        if forced.size > k_per_worker:
            raise ValueError(f"worker {i} has {forced.size} forced indices > k_per_worker")
        local = _top_k_excluding(scores[pool], k_per_worker - forced.size, (forced - i) // n_workers)
        idx = np.sort(np.concatenate([forced, pool[local]]))
        masks.append(SparseMask(idx, scores.size, "segment", i, n_workers))
    return masks


def apply_mask(grad: np.ndarray, mask: SparseMask) -> SparseDelta:
    """Values of ``grad`` at the mask's indices, in index order."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (mask.n_params,):
        raise ValueError(f"vector has length {grad.size}, mask expects {mask.n_params}")
    return SparseDelta(mask.indices.copy(), grad[mask.indices], mask.n_params)


def save_mask(path: str | os.PathLike, mask: SparseMask) -> None:
    header = _HEADER.pack(MASK_MAGIC, MASK_VERSION, ORIGINS.index(mask.origin), mask.n_params,
                          mask.k, mask.worker_id, mask.n_workers)
    atomic_write(path, header + mask.indices.astype("<u8").tobytes())


def load_mask(path: str | os.PathLike) -> SparseMask:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated mask file")
    magic, version, tag, n, k, worker, workers = _HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if tag >= len(ORIGINS):
        raise ValueError(f"{path}: unknown origin tag {tag}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * k:
        raise ValueError(f"{path}: expected {k} indices, found {len(body)} bytes")
    idx = np.frombuffer(body, dtype="<u8").astype(np.int64)
    return SparseMask(idx, n, ORIGINS[tag], worker, workers)


def mask_to_json(mask: SparseMask) -> str:
    return json.dumps(mask.to_dict())
