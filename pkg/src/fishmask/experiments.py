"""Multi-seed experiment drivers behind the CLI subcommands.

Every experiment expands into independent jobs (one per grid cell and
seed). Jobs are pure functions of their description, so they may run in a
process pool; results are always assembled in job order, which makes the
report independent of the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write, write_json
from .checkpoint import (RefreshSchedule, chain_disk_bytes, load_chain, reconstruct,
                         reduction_factor, storage_cost, train_with_sparse_checkpoints)
from .data import REFERENCE_BLOBS, Dataset, dataset_from_dict, shuffle, train_eval_split
from .distsim import DistConfig, accuracy_vs_budget, run_distributed
from .errors import ConfigError
from .fisher import DEFAULT_SAMPLES, compute_fisher, fisher_rank_overlap
from .mask import build_fish_mask, build_random_mask, sparsity_to_k
from .model import ModelSpec, init_params
from .seeding import int_seed
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Task:
    name: str
    dataset: dict
    model: dict
    learning_rate: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    split_seed: int = 0
    train_fraction: float = 0.8
    fisher_samples: int = DEFAULT_SAMPLES
    include_classifier: bool = False
    dist_learning_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Task:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        if "dataset" not in d or "model" not in d:
            raise ConfigError("a task needs 'dataset' and 'model' blocks")
        return cls(**{k: v for k, v in d.items()})

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# Hidden width 128 puts |theta| at 3204, large enough that rounding k at the
# studied sparsities moves the realized sparsity by well under 0.1%.
# Summing M worker deltas scales the step by about M, so distributed runs use
# their own rate, picked by a search on the dense distributed baseline.
REFERENCE_TASK = Task(
    name="reference",
    dataset={"kind": "blobs", **REFERENCE_BLOBS},
    model={"layer_sizes": [20, 128, 4], "activation": "relu"},
    dist_learning_rate=0.02,
)

SMOKE_TASK = Task(
    name="smoke",
    dataset={"kind": "blobs", "classes": 3, "per_class": 60, "feature_dim": 6,
             "center_separation": 3.0, "noise_sigma": 1.0, "seed": 0},
    model={"layer_sizes": [6, 16, 3], "activation": "relu"},
    epochs=5,
    fisher_samples=64,
)

BUILTIN_TASKS = {"reference": REFERENCE_TASK, "smoke": SMOKE_TASK}


def load_task(name_or_path: str) -> Task:
    if name_or_path in BUILTIN_TASKS:
        return BUILTIN_TASKS[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"no builtin task or task file named {name_or_path!r}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    d.setdefault("name", path.stem)
    return Task.from_dict(d)


@dataclass
class Prepared:
    spec: ModelSpec
    train: Dataset
    eval: Dataset

    def init(self, seed: int) -> np.ndarray:
        return init_params(self.spec, int_seed(seed, "init"))

    def always_include(self, task: Task):
        return self.spec.classifier_slice if task.include_classifier else None


@lru_cache(maxsize=8)
def _prepare(task_key: str) -> Prepared:
    task = Task.from_dict(json.loads(task_key))
    spec = ModelSpec.from_dict(task.model)
    data = dataset_from_dict(task.dataset)
    if data.feature_dim != spec.input_dim:
        raise ConfigError(f"dataset has {data.feature_dim} features, model expects {spec.input_dim}")
    if data.class_count != spec.n_classes:
        raise ConfigError(f"dataset has {data.class_count} classes, model expects {spec.n_classes}")
    tr, ev = train_eval_split(data, task.split_seed, task.train_fraction)
    return Prepared(spec, tr, ev)


def prepare(task: Task) -> Prepared:
    return _prepare(task.key())


def train_config(task: Task, seed: int, learning_rate: float | None = None) -> TrainConfig:
    return TrainConfig(learning_rate or task.learning_rate, task.batch_size, task.epochs, seed)


def fisher_for(task: Task, prep: Prepared, params: np.ndarray, seed: int, n_samples: int,
               variant: str = "empirical", draws: int = 1):
    fdata = shuffle(prep.train, int_seed(seed, "fisher"))
    n = min(n_samples, len(fdata))
    return compute_fisher(prep.spec, params, fdata.X, fdata.y, n, variant, draws,
                          int_seed(seed, "fisher-draws"))


def make_mask(task: Task, prep: Prepared, params: np.ndarray, seed: int, kind: str, sparsity: float,
              n_samples: int | None = None, variant: str = "empirical", draws: int = 1):
    """Mask for a single-machine run. ``kind='fish'`` with ``n_samples=0`` is the random mask."""
    n = prep.spec.n_params
    k = sparsity_to_k(n, sparsity)
    forced = prep.always_include(task)
    if kind == "dense":
        return None
    n_samples = task.fisher_samples if n_samples is None else n_samples
    if kind == "random" or (kind == "fish" and n_samples == 0):
        return build_random_mask(n, k, int_seed(seed, "random-mask"), forced)
    if kind != "fish":
        raise ConfigError(f"unknown mask kind {kind!r}")
    fisher = fisher_for(task, prep, params, seed, n_samples, variant, draws)
    return build_fish_mask(fisher, k, forced)


# ---------------------------------------------------------------- jobs


def job_masked(job: dict) -> dict:
    task = Task.from_dict(job["task"])
    prep = prepare(task)
    seed = job["seed"]
    p0 = prep.init(seed)
    mask = make_mask(task, prep, p0, seed, job["mask_kind"], job.get("sparsity", 1.0),
                     job.get("n_samples"), job.get("variant", "empirical"), job.get("draws", 1))
    params, metrics = train(prep.spec, p0, prep.train, prep.eval, mask, train_config(task, seed))
    out = {"accuracy": metrics.final_accuracy, "k": None if mask is None else mask.k,
           "changed": metrics.records[-1].params_changed_count}
    if job.get("overlap_with") and mask is not None and mask.origin == "fish":
        ref = fisher_for(task, prep, p0, seed, job["overlap_with"]["n_samples"],
                         job["overlap_with"].get("variant", "empirical"))
        out["overlap"] = float(np.isin(mask.indices, build_fish_mask(ref, mask.k).indices).mean())
    if job.get("return_params"):
        out["params"] = params
    return out


def job_distributed(job: dict) -> dict:
    task = Task.from_dict(job["task"])
    prep = prepare(task)
    seed = job["seed"]
    cfg = DistConfig(**job["dist"])
    tcfg = train_config(task, seed, task.dist_learning_rate)
    run = run_distributed(prep.spec, prep.init(seed), prep.train, prep.eval, cfg, tcfg)
    return {
        "accuracy": run.metrics.final_accuracy,
        "worker_budget": run.ledger.worker_model_equivalents,
        "total_budget": run.ledger.full_model_equivalents,
        "w2s_units": run.ledger.worker_to_server_units,
        "s2w_units": run.ledger.server_to_worker_units,
        "curve": accuracy_vs_budget(run.ledger),
    }


def job_checkpoint(job: dict) -> dict:
    task = Task.from_dict(job["task"])
    prep = prepare(task)
    seed = job["seed"]
    p0 = prep.init(seed)
    out_dir = job.get("out_dir")
    run = train_with_sparse_checkpoints(
        prep.spec, p0, prep.train, prep.eval, job["sparsity"],
        RefreshSchedule.parse(job["schedule"]), train_config(task, seed),
        mask_kind=job["mask_kind"], fisher_samples=task.fisher_samples, out_dir=out_dir)
    rebuilt = reconstruct(p0, run.chain)
    ok = bool(np.array_equal(rebuilt.view(np.uint64), run.params.view(np.uint64)))
    disk_bytes = None
    if out_dir is not None:
        base, chain = load_chain(Path(out_dir) / "manifest.json")
        ok = ok and bool(np.array_equal(reconstruct(base, chain).view(np.uint64),
                                        run.params.view(np.uint64)))
        disk_bytes = chain_disk_bytes(Path(out_dir) / "manifest.json")
    n = prep.spec.n_params
    return {
        "accuracy": run.metrics.final_accuracy,
        "k": run.chain[0].k,
        "n_checkpoints": len(run.chain),
        "n_masks": len(run.masks),
        "reconstruct_ok": ok,
        "reduction_factor_32bit": reduction_factor(run.chain, n),
        "sparse_bytes_32bit": sum(storage_cost(c, 4, 4, 0) for c in run.chain),
        "dense_bytes_32bit": len(run.chain) * 4 * n,
        "disk_bytes": disk_bytes,
    }


JOBS = {"masked": job_masked, "distributed": job_distributed, "checkpoint": job_checkpoint}


def run_job(job: dict) -> dict:
    return JOBS[job["type"]](job)


def run_jobs(jobs: list[dict], threads: int = 1) -> list[dict]:
    if threads <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_job, jobs))


# ---------------------------------------------------------------- reports


def mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


@dataclass
class Cell:
    key: dict
    per_seed: list[dict] = field(default_factory=list)

    def summary(self, metrics: list[str]) -> dict:
        out = dict(self.key)
        stats = {}
        for m in metrics:
            vals = [r[m] for r in self.per_seed if r.get(m) is not None]
            if vals and all(isinstance(v, (int, float, np.floating)) for v in vals):
                mu, sd = mean_std(vals)
                stats[m] = {"per_seed": [float(v) for v in vals], "mean": mu, "std": sd}
        out["metrics"] = stats
        return out


def seeds_from(base_seed: int, n_seeds: int) -> list[int]:
    if n_seeds < 1:
        raise ConfigError("need at least one seed")
    return [base_seed + i for i in range(n_seeds)]


def _grid(task: Task, type_: str, keys: list[dict], seeds: list[int], extra=None
          ) -> tuple[list[Cell], list[dict]]:
    cells, jobs = [], []
    for key in keys:
        cells.append(Cell(dict(key)))
        for seed in seeds:
            job = {"type": type_, "task": task.to_dict(), "seed": seed, **key}
            if extra:
                job.update(extra(key, seed))
            jobs.append(job)
    return cells, jobs


def _collect(cells: list[Cell], results: list[dict], seeds: list[int]) -> None:
    it = iter(results)
    for cell in cells:
        for seed in seeds:
            r = next(it)
            cell.per_seed.append({"seed": seed, **{k: v for k, v in r.items() if k != "params"}})


def make_report(kind: str, task: Task, config: dict, seeds: list[int], cells: list[Cell],
                metrics: list[str], started: float, extra: dict | None = None) -> dict:
    report = {
        "kind": kind,
        "version": __version__,
        "config": {"task": task.to_dict(), "seeds": seeds, **config},
        "cells": [c.summary(metrics) for c in cells],
        "per_seed": [{**c.key, **r} for c in cells for r in c.per_seed],
        "wall_clock_seconds": time.time() - started,
    }
    if extra:
        report.update(extra)
    return report


def report_csv(report: dict) -> str:
    """One row per cell: key columns then mean/std per metric."""
    rows = report["cells"]
    if not rows:
        return ""
    key_cols = [k for k in rows[0] if k != "metrics"]
    metric_names = list(rows[0]["metrics"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(key_cols + [f"{m}_{s}" for m in metric_names for s in ("mean", "std")] + ["n_seeds"])
    for row in rows:
        vals = []
        for m in metric_names:
            st = row["metrics"].get(m)
            vals += [repr(st["mean"]), repr(st["std"])] if st else ["", ""]
        n = len(next(iter(row["metrics"].values()))["per_seed"]) if row["metrics"] else 0
        w.writerow([row[k] for k in key_cols] + vals + [n])
    return buf.getvalue()


def write_report(out_dir: str | os.PathLike | None, report: dict, stem: str | None = None) -> None:
    if out_dir is None:
        return
    stem = stem or report["kind"]
    out_dir = Path(out_dir)
    write_json(out_dir / f"{stem}.json", _jsonable(report))
    atomic_write(out_dir / f"{stem}.csv", report_csv(report).encode())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- experiments


def sweep_sparsity(task: Task, sparsities=(0.001, 0.005, 0.02, 0.1), kinds=("fish", "random"),
                   seeds=(0, 1, 2, 3, 4), threads: int = 1, include_dense: bool = True,
                   out_dir=None) -> dict:
    started = time.time()
    seeds = list(seeds)
    for s in sparsities:
        if not 0 < s <= 1:
            raise ConfigError(f"sparsity {s} outside (0, 1]")
    keys = [{"mask_kind": kind, "sparsity": float(s)} for kind in kinds for s in sparsities]
    if include_dense:
        keys.append({"mask_kind": "dense", "sparsity": 1.0})
    cells, jobs = _grid(task, "masked", keys, seeds)
    _collect(cells, run_jobs(jobs, threads), seeds)
    report = make_report("sweep-sparsity", task, {"sparsities": list(sparsities), "kinds": list(kinds)},
                         seeds, cells, ["accuracy", "k"], started)
    write_report(out_dir, report)
    return report


def ablate_samples(task: Task, n_values=(0, 1, 8, 32, 256, 1024), sparsity: float = 0.1,
                   seeds=(0, 1, 2, 3, 4), threads: int = 1, reference_n: int | None = None,
                   out_dir=None) -> dict:
    started = time.time()
    seeds = list(seeds)
    if list(n_values) != sorted(n_values):
        raise ConfigError("sample counts must be sorted")
    reference_n = reference_n or max(n_values)
    keys = [{"mask_kind": "fish", "sparsity": float(sparsity), "n_samples": int(n)} for n in n_values]
    cells, jobs = _grid(task, "masked", keys, seeds,
                        lambda key, seed: {"overlap_with": {"n_samples": reference_n}})
    _collect(cells, run_jobs(jobs, threads), seeds)
    report = make_report("ablate-samples", task,
                         {"n_values": list(n_values), "sparsity": sparsity, "reference_n": reference_n},
                         seeds, cells, ["accuracy", "overlap"], started)
    write_report(out_dir, report)
    return report


def ablate_fisher_type(task: Task, variants=("empirical", "true_exact"), sparsities=(0.1,),
                       seeds=(0, 1, 2, 3, 4), threads: int = 1, draws: int = 1, out_dir=None) -> dict:
    started = time.time()
    seeds = list(seeds)
    keys = [{"mask_kind": "fish", "sparsity": float(s), "variant": v, "draws": draws}
            for s in sparsities for v in variants]
    cells, jobs = _grid(task, "masked", keys, seeds,
                        lambda key, seed: {"overlap_with": {"n_samples": task.fisher_samples,
                                                            "variant": "empirical"}})
    _collect(cells, run_jobs(jobs, threads), seeds)
    report = make_report("ablate-fisher-type", task,
                         {"variants": list(variants), "sparsities": list(sparsities), "draws": draws},
                         seeds, cells, ["accuracy", "overlap"], started)
    write_report(out_dir, report)
    return report


def default_dist_grid(task: Task, sparsity: float = 0.1, local_updates=(10,), n_workers: int = 2,
                      strategies=("dense", "shared_fish", "shared_random", "segmented_fish"),
                      server_broadcast: str = "auto_min", warmup_epochs: int = 0,
                      aggregation: str = "sum") -> list[dict]:
    """Configs with total-batch parity: each worker runs 1/M of the single-machine steps."""
    prep = prepare(task)
    n = prep.spec.n_params
    steps_per_epoch = math.ceil(len(prep.train) / task.batch_size)
    worker_steps = (task.epochs - warmup_epochs) * steps_per_epoch // n_workers
    k = sparsity_to_k(n, sparsity)
    grid = []
    for lu in local_updates:
        rounds = worker_steps // lu
        if rounds < 1:
            raise ConfigError(f"local_updates={lu} exceeds the {worker_steps} steps per worker")
        for strat in strategies:
            kk = None if strat == "dense" else (k // n_workers if strat == "segmented_fish" else k)
            grid.append(asdict(DistConfig(n_workers, lu, rounds, strat, kk, warmup_epochs,
                                          server_broadcast, aggregation)))
    return grid


def distributed(task: Task, grid: list[dict] | None = None, seeds=(0, 1, 2, 3, 4), threads: int = 1,
                out_dir=None) -> dict:
    started = time.time()
    seeds = list(seeds)
    grid = grid or default_dist_grid(task)
    for g in grid:
        DistConfig(**g)
    keys = [{"strategy": g["strategy"], "local_updates": g["local_updates"], "dist": g} for g in grid]
    cells, jobs = _grid(task, "distributed", keys, seeds)
    results = run_jobs(jobs, threads)
    _collect(cells, results, seeds)
    curves = []
    for cell in cells:
        per_seed = [r["curve"] for r in cell.per_seed]
        budgets = [b for b, _ in per_seed[0]]
        accs = np.asarray([[a for _, a in c] for c in per_seed])
        curves.append({"strategy": cell.key["strategy"], "local_updates": cell.key["local_updates"],
                       "budget_convention": "worker-side upload, full-model units per worker",
                       "points": [{"worker_budget": b, "mean_accuracy": float(m),
                                   "std_accuracy": float(s)}
                                  for b, m, s in zip(budgets, accs.mean(0),
                                                     accs.std(0, ddof=1) if len(seeds) > 1
                                                     else np.zeros(len(budgets)))]})
        for r in cell.per_seed:
            del r["curve"]
        del cell.key["dist"]
    report = make_report("distributed", task, {"grid": grid}, seeds, cells,
                         ["accuracy", "worker_budget", "total_budget", "w2s_units", "s2w_units"],
                         started, {"curves": curves})
    if out_dir is not None:
        write_report(out_dir, report)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "local_updates", "worker_budget", "mean_accuracy", "std_accuracy"])
        for c in curves:
            for p in c["points"]:
                w.writerow([c["strategy"], c["local_updates"], repr(p["worker_budget"]),
                            repr(p["mean_accuracy"]), repr(p["std_accuracy"])])
        atomic_write(Path(out_dir) / "distributed_curves.csv", buf.getvalue().encode())
    return report


def checkpoint_experiment(task: Task, sparsities=(0.005, 0.02, 0.1),
                          schedules=("1", "2", "4", "fixed"), random_schedules=("1",),
                          seeds=(0, 1, 2, 3, 4), threads: int = 1, out_dir=None) -> dict:
    started = time.time()
    seeds = list(seeds)
    keys = []
    for s in sparsities:
        keys += [{"mask_kind": "random", "sparsity": float(s), "schedule": str(sc)} for sc in random_schedules]
        keys += [{"mask_kind": "fish", "sparsity": float(s), "schedule": str(sc)} for sc in schedules]

    def chain_dir(key, seed):
        if out_dir is None:
            return {}
        name = f"{key['mask_kind']}_s{key['sparsity']}_r{key['schedule']}_seed{seed}"
        return {"out_dir": str(Path(out_dir) / "chains" / name)}

    cells, jobs = _grid(task, "checkpoint", keys, seeds, chain_dir)
    _collect(cells, run_jobs(jobs, threads), seeds)
    report = make_report("checkpoint", task, {"sparsities": list(sparsities), "schedules": list(schedules),
                                              "random_schedules": list(random_schedules)},
                         seeds, cells, ["accuracy", "reduction_factor_32bit", "disk_bytes", "k"], started,
                         {"all_chains_reconstruct": all(r["reconstruct_ok"]
                                                        for c in cells for r in c.per_seed)})
    write_report(out_dir, report)
    return report


def fisher_command(task: Task, seed: int, variant: str = "empirical", n_samples: int | None = None,
                   draws: int = 1, out_dir=None, top: int = 20):
    """Fisher at the seed's initial parameters; returns (FisherDiag, summary)."""
    from .fisher import save_fisher

    prep = prepare(task)
    n = task.fisher_samples if n_samples is None else n_samples
    if n < 1:
        raise ConfigError("n_samples must be >= 1 (use a random mask for N=0)")
    if n > len(prep.train):
        log.warning("n_samples=%d exceeds the %d training examples; clamping", n, len(prep.train))
        n = len(prep.train)
    fisher = fisher_for(task, prep, prep.init(seed), seed, n, variant, draws)
    summary = {**fisher.summary(top), "task": task.name, "seed": seed, "version": __version__}
    if out_dir is not None:
        save_fisher(Path(out_dir) / "fisher.bin", fisher)
        write_json(Path(out_dir) / "fisher_summary.json", summary)
    return fisher, summary


def with_overrides(task: Task, **kw) -> Task:
    return replace(task, **{k: v for k, v in kw.items() if v is not None})
