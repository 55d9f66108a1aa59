"""Diagonal Fisher information estimators.

All three estimators average, over the first ``n_samples`` examples, a
squared score vector (gradient of log p(y|x)):

* ``empirical``: y is the ground-truth label.
* ``true_exact``: expectation over y ~ p(y|x), enumerating every class.
* ``true_sampled``: the same expectation estimated with ``draws`` samples.

Scores are computed at the parameters passed in; callers decide when (before
training, at a mask refresh) that happens.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write, write_json
from .model import ModelSpec, forward_cache, squared_grad_sum

VARIANTS = ("empirical", "true_exact", "true_sampled")
DEFAULT_SAMPLES = 1024
DISTRIBUTED_SAMPLES = 256
MAX_ENUMERATED_CLASSES = 1000

FISHER_MAGIC = b"FSHF"
FISHER_VERSION = 1
_HEADER = struct.Struct("<4sHBxQQQ")


@dataclass
class FisherDiag:
    scores: np.ndarray
    sample_count: int
    variant: str = "empirical"
    draws: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Fisher variant {self.variant!r}")

    def __len__(self) -> int:
        return self.scores.size

    def summary(self, top: int = 20) -> dict:
        top = min(top, self.scores.size)
        return {
            "variant": self.variant,
            "draws": self.draws,
            "sample_count": self.sample_count,
            "n_params": int(self.scores.size),
            "min": float(self.scores.min()),
            "max": float(self.scores.max()),
            "mean": float(self.scores.mean()),
            "top_indices": top_k_order(self.scores)[:top].tolist(),
        }


def top_k_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _first_n(X, y, n_samples: int):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1; N=0 corresponds to a random mask")
    if n_samples > X.shape[0]:
        raise ValueError(f"n_samples={n_samples} exceeds the {X.shape[0]} available examples")
    return X[:n_samples], y[:n_samples]


# Per-example arrays are (chunk, width); keep them modest for large N.
_CHUNK = 4096


def _chunks(n: int):
    for start in range(0, n, _CHUNK):
        yield slice(start, min(n, start + _CHUNK))


def empirical_fisher(spec: ModelSpec, params: np.ndarray, X, y, n_samples: int) -> FisherDiag:
    X, y = _first_n(X, y, n_samples)
    total = np.zeros(spec.n_params)
    for sl in _chunks(n_samples):
        cache = forward_cache(spec, params, X[sl])
        score = -np.exp(cache.log_probs)
        score[np.arange(score.shape[0]), y[sl]] += 1.0
        total += squared_grad_sum(spec, params, cache, score)
    return FisherDiag(total / n_samples, n_samples, "empirical")


def _class_weighted(spec, params, X, weights_fn) -> np.ndarray:
    total = np.zeros(spec.n_params)
    for sl in _chunks(X.shape[0]):
        cache = forward_cache(spec, params, X[sl])
        probs = np.exp(cache.log_probs)
        weights = weights_fn(sl, probs)
        for c in range(spec.n_classes):
            w = weights[:, c]
            if not np.any(w):
                continue
            score = -probs.copy()
            score[:, c] += 1.0
            total += squared_grad_sum(spec, params, cache, score, w)
    return total


def true_fisher_exact(spec: ModelSpec, params: np.ndarray, X, y, n_samples: int) -> FisherDiag:
    if spec.n_classes > MAX_ENUMERATED_CLASSES:
        raise ValueError(f"{spec.n_classes} classes is too many to enumerate; use true_fisher_sampled")
    X, _ = _first_n(X, y, n_samples)
    total = _class_weighted(spec, params, X, lambda sl, probs: probs)
    return FisherDiag(total / n_samples, n_samples, "true_exact")


def true_fisher_sampled(spec: ModelSpec, params: np.ndarray, X, y, n_samples: int,
                        draws: int, seed: int) -> FisherDiag:
    """Monte-Carlo estimate with ``draws`` labels sampled from the model per example.

    Averaging squared scores over the sampled labels equals weighting each
    class by its empirical draw frequency, which is how it is computed here.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    X, _ = _first_n(X, y, n_samples)
    rng = np.random.default_rng(seed)
    u = rng.random((n_samples, draws))

    def weights(sl, probs):
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = np.inf
        counts = np.zeros_like(probs)
        for row, (c, uu) in enumerate(zip(cdf, u[sl])):
            labels = np.searchsorted(c, uu, side="right")
            counts[row] = np.bincount(labels, minlength=probs.shape[1])
        return counts / draws

    total = _class_weighted(spec, params, X, weights)
    return FisherDiag(total / n_samples, n_samples, "true_sampled", draws)


def compute_fisher(spec: ModelSpec, params: np.ndarray, X, y, n_samples: int,
                   variant: str = "empirical", draws: int = 1, seed: int = 0) -> FisherDiag:
    if variant == "empirical":
        return empirical_fisher(spec, params, X, y, n_samples)
    if variant == "true_exact":
        return true_fisher_exact(spec, params, X, y, n_samples)
    if variant == "true_sampled":
        return true_fisher_sampled(spec, params, X, y, n_samples, draws, seed)
    raise ValueError(f"unknown Fisher variant {variant!r}")


def fisher_rank_overlap(a: FisherDiag | np.ndarray, b: FisherDiag | np.ndarray, k: int) -> float:
    """Fraction of shared indices between the two top-k sets."""
    sa = a.scores if isinstance(a, FisherDiag) else np.asarray(a, dtype=np.float64)
    sb = b.scores if isinstance(b, FisherDiag) else np.asarray(b, dtype=np.float64)
    if sa.shape != sb.shape:
        raise ValueError(f"length mismatch: {sa.size} vs {sb.size}")
    if not 1 <= k <= sa.size:
        raise ValueError(f"k={k} out of range [1, {sa.size}]")
    shared = np.intersect1d(top_k_order(sa)[:k], top_k_order(sb)[:k], assume_unique=True)
    return shared.size / k


def save_fisher(path: str | os.PathLike, fisher: FisherDiag) -> None:
    header = _HEADER.pack(FISHER_MAGIC, FISHER_VERSION, VARIANTS.index(fisher.variant),
                          fisher.scores.size, fisher.sample_count, fisher.draws or 0)
    atomic_write(path, header + fisher.scores.astype("<f8").tobytes())


def load_fisher(path: str | os.PathLike) -> FisherDiag:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated Fisher file")
    magic, version, tag, n, count, draws = _HEADER.unpack_from(raw)
    if magic != FISHER_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FISHER_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if tag >= len(VARIANTS):
        raise ValueError(f"{path}: unknown variant tag {tag}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {n} scores, found {len(body)} bytes")
    variant = VARIANTS[tag]
    return FisherDiag(np.frombuffer(body, dtype="<f8").astype(np.float64), count, variant,
                      draws if variant == "true_sampled" else None)


def write_summary(path: str | os.PathLike, fisher: FisherDiag, top: int = 20) -> None:
    write_json(path, fisher.summary(top))


__all__ = [
    "FisherDiag", "empirical_fisher", "true_fisher_exact", "true_fisher_sampled",
    "compute_fisher", "fisher_rank_overlap", "top_k_order", "save_fisher", "load_fisher",
    "write_summary", "DEFAULT_SAMPLES", "DISTRIBUTED_SAMPLES",
]
