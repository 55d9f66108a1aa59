"""Minibatch SGD where only masked coordinates move.

The full gradient is computed and then restricted to the mask; every
coordinate outside the mask is left bit-for-bit untouched.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write
from .data import Dataset
from .errors import NumericError
from .mask import SparseMask
from .model import ModelSpec, loss_and_grad, predict
from .seeding import rng_for


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    eval_every: int | None = None  # steps; None records once per epoch

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid training config {self}")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be positive")


@dataclass
class MetricRecord:
    step: int
    train_loss: float
    eval_accuracy: float
    params_changed_count: int


@dataclass
class TrainMetrics:
    records: list[MetricRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].eval_accuracy if self.records else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "accuracy", "changed_count"])
        for r in self.records:
            writer.writerow([r.step, repr(r.train_loss), repr(r.eval_accuracy), r.params_changed_count])
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_csv().encode())

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def evaluate(spec: ModelSpec, params: np.ndarray, data: Dataset) -> float:
    """Accuracy of the argmax prediction (ties resolve to the lowest class)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(spec, params, data.X) == data.y))


def sgd_step_masked(spec: ModelSpec, params: np.ndarray, X, y, mask: SparseMask | None,
                    learning_rate: float) -> tuple[np.ndarray, float]:
    """One SGD step on a batch; returns (new params, batch loss).

    ``mask=None`` is a dense step. Coordinates outside the mask are copied,
    never recomputed.
    """
    loss, grad = loss_and_grad(spec, params, X, y)
    if mask is None:
        return params - learning_rate * grad, loss
    if mask.n_params != params.size:
        raise ValueError(f"mask covers {mask.n_params} parameters, model has {params.size}")
    out = params.copy()
    idx = mask.indices
    out[idx] = params[idx] - learning_rate * grad[idx]
    return out, loss


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


class BatchStream:
    """Endless minibatches over a dataset, reshuffled at each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._batches = iter(())
        self.passes = 0

    def __next__(self) -> np.ndarray:
        for batch in self._batches:
            return batch
        self.passes += 1
        self._batches = epoch_batches(self.n, self.batch_size, self.rng)
        return next(self._batches)

    def __iter__(self):
        return self


class MetricRecorder:
    def __init__(self, spec, params0, eval_data, metrics: TrainMetrics):
        self.spec, self.params0, self.eval_data, self.metrics = spec, params0, eval_data, metrics
        self.losses: list[float] = []

    def add_loss(self, loss: float, step: int) -> None:
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        self.losses.append(loss)

    def record(self, step: int, params: np.ndarray) -> None:
        loss = float(np.mean(self.losses)) if self.losses else float("nan")
        self.losses = []
        acc = evaluate(self.spec, params, self.eval_data) if self.eval_data is not None else float("nan")
        changed = int(np.count_nonzero(params != self.params0))
        self.metrics.records.append(MetricRecord(step, loss, acc, changed))


def run_epochs(spec: ModelSpec, params: np.ndarray, data: Dataset, mask: SparseMask | None,
               config: TrainConfig, rng: np.random.Generator, epochs: int,
               recorder: MetricRecorder | None = None, step: int = 0) -> tuple[np.ndarray, int]:
    """Train for ``epochs`` passes; returns (params, global step)."""
    for _ in range(epochs):
        for batch in epoch_batches(len(data), config.batch_size, rng):
            params, loss = sgd_step_masked(spec, params, data.X[batch], data.y[batch], mask,
                                           config.learning_rate)
            step += 1
            if recorder is not None:
                recorder.add_loss(loss, step)
                if config.eval_every and step % config.eval_every == 0:
                    recorder.record(step, params)
        if recorder is not None and not config.eval_every:
            recorder.record(step, params)
    if not np.all(np.isfinite(params)):
        raise NumericError("non-finite parameters after training")
    return params, step


def train(spec: ModelSpec, params0: np.ndarray, train_data: Dataset, eval_data: Dataset | None,
          mask: SparseMask | None = None, config: TrainConfig | None = None
          ) -> tuple[np.ndarray, TrainMetrics]:
    """Seed-shuffled minibatch SGD; dense when ``mask`` is None."""
    config = config or TrainConfig()
    if len(train_data) == 0:
        raise ValueError("empty training data")
    params0 = np.asarray(params0, dtype=np.float64)
    if params0.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params0.shape}")
    metrics = TrainMetrics()
    recorder = MetricRecorder(spec, params0, eval_data, metrics)
    rng = rng_for(config.seed, "train-shuffle")
    params, _ = run_epochs(spec, params0.copy(), train_data, mask, config, rng, config.epochs, recorder)
    return params, metrics
