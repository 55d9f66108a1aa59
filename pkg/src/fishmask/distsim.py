"""Simulated synchronous data-parallel training with sparse deltas.

Each round every worker copies the server vector, takes ``local_updates``
masked SGD steps on its own shard, and sends back its parameter change
restricted to its mask. The server adds all deltas (in worker order) to its
vector. Traffic is counted in scalar units: a dense parameter costs 1, a
sparse (index, value) pair costs 2.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, shard_iid, shuffle
from .errors import ConfigError, DataError, NumericError
from .fisher import DISTRIBUTED_SAMPLES, compute_fisher
from .mask import (SparseDelta, SparseMask, build_fish_mask, build_random_mask,
                   build_segmented_masks)
from .model import ModelSpec
from .seeding import derive_seed, int_seed, rng_for
from .trainer import (BatchStream, MetricRecord, TrainConfig, TrainMetrics, evaluate,
                      run_epochs, sgd_step_masked)

log = logging.getLogger(__name__)

STRATEGIES = ("dense", "shared_fish", "shared_random", "segmented_fish")
BROADCASTS = ("full_vector", "peer_deltas", "auto_min")
AGGREGATIONS = ("sum", "mean")


@dataclass
class DistConfig:
    n_workers: int = 2
    local_updates: int = 10
    rounds: int = 10
    strategy: str = "dense"
    k: int | None = None  # shared strategies: mask size; segmented: per worker
    warmup_epochs: int = 0
    server_broadcast: str = "auto_min"
    aggregation: str = "sum"
    fisher_samples: int = DISTRIBUTED_SAMPLES
    fisher_variant: str = "empirical"

    def __post_init__(self):
        if self.n_workers < 2:
            raise ConfigError("distributed runs need at least 2 workers")
        if self.local_updates < 1 or self.rounds < 1:
            raise ConfigError("local_updates and rounds must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.strategy!r}")
        if self.strategy != "dense" and (self.k is None or self.k < 1):
            raise ConfigError(f"strategy {self.strategy!r} needs k >= 1")
        if self.server_broadcast not in BROADCASTS:
            raise ConfigError(f"unknown server broadcast mode {self.server_broadcast!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundRecord:
    round: int
    w2s_units: float
    s2w_units: float
    eval_accuracy: float


@dataclass
class CommLedger:
    n_params: int
    n_workers: int
    worker_to_server_units: float = 0.0
    server_to_worker_units: float = 0.0
    rounds: list[RoundRecord] = field(default_factory=list)

    def add_round(self, w2s: float, s2w: float, eval_accuracy: float = float("nan")) -> None:
        self.worker_to_server_units += w2s
        self.server_to_worker_units += s2w
        self.rounds.append(RoundRecord(len(self.rounds) + 1, w2s, s2w, eval_accuracy))

    @property
    def total_units(self) -> float:
        return self.worker_to_server_units + self.server_to_worker_units

    @property
    def full_model_equivalents(self) -> float:
        return self.total_units / self.n_params

    @property
    def worker_model_equivalents(self) -> float:
        """Upload traffic of a single worker, in full-model units."""
        return self.worker_to_server_units / self.n_workers / self.n_params

    def to_dict(self) -> dict:
        return {
            "n_params": self.n_params,
            "n_workers": self.n_workers,
            "worker_to_server_units": self.worker_to_server_units,
            "server_to_worker_units": self.server_to_worker_units,
            "full_model_equivalents": self.full_model_equivalents,
            "worker_model_equivalents": self.worker_model_equivalents,
        }


@dataclass
class DistRun:
    params: np.ndarray
    ledger: CommLedger
    metrics: TrainMetrics
    masks: list[SparseMask | None]

    def __iter__(self):
        return iter((self.params, self.ledger, self.metrics))

    def to_report(self, config: DistConfig, train_config: TrainConfig) -> dict:
        return {
            "config": {"dist": config.to_dict(), "train": asdict(train_config)},
            "ledger_convention": {
                "unit": "one dense parameter = 1, one sparse (index, value) pair = 2",
                "worker_budget": "cumulative worker-to-server units of one worker / n_params",
                "total_budget": "cumulative all traffic (both directions, all workers) / n_params",
            },
            "ledger": self.ledger.to_dict(),
            "per_round": [asdict(r) for r in self.ledger.rounds],
            "budget_curve": [{"worker_budget": w, "total_budget": t, "eval_accuracy": a}
                             for (w, a), (t, _) in zip(accuracy_vs_budget(self.ledger),
                                                       accuracy_vs_budget(self.ledger, "total"))],
            "final_accuracy": self.metrics.final_accuracy,
        }


def delta_cost(mask: SparseMask | None, n_params: int) -> int:
    return n_params if mask is None else 2 * mask.k


def comm_cost_round(config: DistConfig, masks: list[SparseMask | None], n_params: int
                    ) -> tuple[int, int]:
    """(worker-to-server, server-to-worker) units for one round."""
    if len(masks) != config.n_workers:
        raise ValueError(f"{len(masks)} masks for {config.n_workers} workers")
    costs = [delta_cost(m, n_params) for m in masks]
    w2s = sum(costs)
    full = config.n_workers * n_params
    peers = sum(w2s - c for c in costs)
    if config.server_broadcast == "full_vector":
        s2w = full
    elif config.server_broadcast == "peer_deltas":
        s2w = peers
    else:
        s2w = min(full, peers)
    return w2s, s2w


def accuracy_vs_budget(ledger: CommLedger, convention: str = "worker") -> list[tuple[float, float]]:
    """(cumulative budget in full-model units, eval accuracy) after each round."""
    out, units = [], 0.0
    for r in ledger.rounds:
        if convention == "worker":
            units += r.w2s_units / ledger.n_workers
        elif convention == "total":
            units += r.w2s_units + r.s2w_units
        else:
            raise ValueError(f"unknown budget convention {convention!r}")
        out.append((units / ledger.n_params, r.eval_accuracy))
    return out


def apply_deltas(server: np.ndarray, deltas: list[SparseDelta], aggregation: str = "sum") -> np.ndarray:
    """Server update; deltas are added one worker at a time, in list order."""
    out = server.copy()
    scale = 1.0 if aggregation == "sum" else 1.0 / len(deltas)
    for d in deltas:
        vals = d.values if scale == 1.0 else d.values * scale
        out[d.indices] += vals
    return out


def build_worker_masks(config: DistConfig, spec: ModelSpec, params: np.ndarray, data: Dataset,
                       seed: int) -> list[SparseMask | None]:
    n = spec.n_params
    M = config.n_workers
    if config.strategy == "dense":
        return [None] * M
    if config.strategy == "shared_random":
        mask = build_random_mask(n, config.k, int_seed(seed, "random-mask"))
        return [mask] * M
    N = min(config.fisher_samples, len(data))
    fdata = shuffle(data, int_seed(seed, "fisher"))
    fisher = compute_fisher(spec, params, fdata.X, fdata.y, N, config.fisher_variant,
                            seed=int_seed(seed, "fisher-draws"))
    if config.strategy == "shared_fish":
        return [build_fish_mask(fisher, config.k)] * M
    return build_segmented_masks(fisher, config.k, M)


RoundHook = Callable[[int, np.ndarray, list[SparseDelta], np.ndarray], None]


def run_distributed(spec: ModelSpec, params0: np.ndarray, data: Dataset, eval_data: Dataset | None,
                    config: DistConfig, train_config: TrainConfig,
                    on_round: RoundHook | None = None) -> DistRun:
    """Simulate ``config.rounds`` communication rounds; see module docstring.

    ``on_round(round, server_before, deltas, server_after)`` is called after
    each aggregation, for inspection.
    """
    n = spec.n_params
    seed = train_config.seed
    server = np.asarray(params0, dtype=np.float64).copy()
    if config.warmup_epochs:
        wcfg = TrainConfig(train_config.learning_rate, train_config.batch_size,
                           config.warmup_epochs, seed)
        server, _ = run_epochs(spec, server, data, None, wcfg, rng_for(seed, "warmup"),
                               config.warmup_epochs)
    masks = build_worker_masks(config, spec, server, data, seed)
    shards = shard_iid(data, config.n_workers, derive_seed(seed, "shard"))
    for i, shard in enumerate(shards):
        if len(shard) < train_config.batch_size:
            raise DataError(f"shard {i} has {len(shard)} examples, fewer than batch size "
                            f"{train_config.batch_size}")
    streams = [BatchStream(len(s), train_config.batch_size, rng_for(seed, "worker", i))
               for i, s in enumerate(shards)]
    ledger = CommLedger(n, config.n_workers)
    metrics = TrainMetrics()
    start = server.copy()
    w2s, s2w = comm_cost_round(config, masks, n)
    for rnd in range(1, config.rounds + 1):
        deltas, losses = [], []
        for shard, stream, mask in zip(shards, streams, masks):
            local = server
            for _ in range(config.local_updates):
                b = next(stream)
                local, loss = sgd_step_masked(spec, local, shard.X[b], shard.y[b], mask,
                                              train_config.learning_rate)
                losses.append(loss)
            idx = np.arange(n) if mask is None else mask.indices
            deltas.append(SparseDelta(idx, local[idx] - server[idx], n))
        new_server = apply_deltas(server, deltas, config.aggregation)
        if not np.all(np.isfinite(new_server)):
            raise NumericError(f"non-finite server parameters after round {rnd}")
        if on_round is not None:
            on_round(rnd, server, deltas, new_server)
        server = new_server
        acc = evaluate(spec, server, eval_data) if eval_data is not None else float("nan")
        ledger.add_round(w2s, s2w, acc)
        metrics.records.append(MetricRecord(rnd * config.local_updates, float(np.mean(losses)), acc,
                                            int(np.count_nonzero(server != start))))
    return DistRun(server, ledger, metrics, masks)


def closed_form_units(config: DistConfig, n_params: int) -> float:
    """Total traffic predicted for a whole run, without simulating it."""
    M, R = config.n_workers, config.rounds
    if config.strategy == "dense":
        per_worker = n_params
    else:
        per_worker = 2 * config.k
    w2s = M * per_worker
    full, peers = M * n_params, M * (M - 1) * per_worker
    s2w = {"full_vector": full, "peer_deltas": peers, "auto_min": min(full, peers)}[config.server_broadcast]
    return float((w2s + s2w) * R)
