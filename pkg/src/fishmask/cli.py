"""Command-line driver: ``fishmask <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error (including a
corrupt checkpoint chain), 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .checkpoint import load_chain, reconstruct
from .errors import ChainError, ConfigError, DataError, NumericError
from .model import load_params, save_params

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fishmask")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; keep the message format
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _common(p: argparse.ArgumentParser, seeds: int = 5) -> None:
    p.add_argument("--task", default="reference", help="builtin task name or task JSON path")
    p.add_argument("--seeds", type=int, default=seeds, help="number of seeds (consecutive from --seed)")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out-dir", type=Path, default=None, help="directory for reports and artifacts")
    p.add_argument("--threads", type=int, default=1, help="parallel runs (results do not depend on it)")
    p.add_argument("--lr", type=float, default=None, help="override the task learning rate")
    p.add_argument("--epochs", type=int, default=None, help="override the task epoch count")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fishmask", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fisher", help="estimate the diagonal Fisher at initialization")
    _common(p, seeds=1)
    p.add_argument("--variant", default="empirical", choices=["empirical", "true_exact", "true_sampled"])
    p.add_argument("--samples", type=int, default=None, help="N examples (default: task setting)")
    p.add_argument("--draws", type=int, default=1, help="label draws per example for true_sampled")
    p.add_argument("--top", type=int, default=20)

    p = sub.add_parser("sweep-sparsity", help="FISH vs random masks across sparsities")
    _common(p)
    p.add_argument("--sparsities", type=_floats, default=[0.001, 0.005, 0.02, 0.1])
    p.add_argument("--kinds", type=_words, default=["fish", "random"])
    p.add_argument("--no-dense", action="store_true", help="skip the dense baseline cell")

    p = sub.add_parser("ablate-samples", help="accuracy and mask overlap versus Fisher sample count")
    _common(p)
    p.add_argument("--n-values", type=_ints, default=[0, 1, 8, 32, 256, 1024])
    p.add_argument("--sparsity", type=float, default=0.1)

    p = sub.add_parser("ablate-fisher-type", help="empirical versus true Fisher masks")
    _common(p)
    p.add_argument("--variants", type=_words, default=["empirical", "true_exact"])
    p.add_argument("--sparsities", type=_floats, default=[0.1])
    p.add_argument("--draws", type=int, default=1)

    p = sub.add_parser("distributed", help="simulated data-parallel training with sparse deltas")
    _common(p)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--local-updates", type=_ints, default=[10])
    p.add_argument("--sparsity", type=float, default=0.1)
    p.add_argument("--strategies", type=_words,
                   default=["dense", "shared_fish", "shared_random", "segmented_fish"])
    p.add_argument("--broadcast", default="auto_min", choices=["full_vector", "peer_deltas", "auto_min"])
    p.add_argument("--aggregation", default="sum", choices=["sum", "mean"])
    p.add_argument("--warmup-epochs", type=int, default=0)

    p = sub.add_parser("checkpoint", help="sparse checkpoint chains under mask refresh schedules")
    _common(p)
    p.add_argument("--sparsities", type=_floats, default=[0.005, 0.02, 0.1])
    p.add_argument("--schedules", type=_words, default=["1", "2", "4", "fixed"])
    p.add_argument("--random-schedules", type=_words, default=["1"])

    p = sub.add_parser("reconstruct", help="rebuild parameters from a checkpoint chain")
    p.add_argument("manifest", type=Path, help="chain manifest.json")
    p.add_argument("--out", type=Path, default=None, help="write the rebuilt parameter file here")
    p.add_argument("--expect", type=Path, default=None, help="parameter file to compare bit-exactly")
    return parser


def _task(args) -> ex.Task:
    task = ex.load_task(args.task)
    if args.lr is not None:
        task = ex.with_overrides(task, learning_rate=args.lr, dist_learning_rate=args.lr)
    return ex.with_overrides(task, epochs=args.epochs)


def _print_cells(report: dict, metric: str = "accuracy") -> None:
    for cell in report["cells"]:
        key = ", ".join(f"{k}={v}" for k, v in cell.items() if k != "metrics")
        st = cell["metrics"].get(metric)
        if st:
            print(f"{key}: {metric} {st['mean']:.4f} ± {st['std']:.4f}")


def cmd_fisher(args) -> int:
    task = _task(args)
    _, summary = ex.fisher_command(task, args.seed, args.variant, args.samples, args.draws,
                                   args.out_dir, args.top)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_sweep_sparsity(args) -> int:
    report = ex.sweep_sparsity(_task(args), args.sparsities, args.kinds,
                               ex.seeds_from(args.seed, args.seeds), args.threads,
                               not args.no_dense, args.out_dir)
    _print_cells(report)
    return EXIT_OK


def cmd_ablate_samples(args) -> int:
    report = ex.ablate_samples(_task(args), args.n_values, args.sparsity,
                               ex.seeds_from(args.seed, args.seeds), args.threads,
                               out_dir=args.out_dir)
    _print_cells(report)
    _print_cells(report, "overlap")
    return EXIT_OK


def cmd_ablate_fisher_type(args) -> int:
    report = ex.ablate_fisher_type(_task(args), args.variants, args.sparsities,
                                   ex.seeds_from(args.seed, args.seeds), args.threads, args.draws,
                                   args.out_dir)
    _print_cells(report)
    return EXIT_OK


def cmd_distributed(args) -> int:
    task = _task(args)
    grid = ex.default_dist_grid(task, args.sparsity, args.local_updates, args.workers,
                                args.strategies, args.broadcast, args.warmup_epochs, args.aggregation)
    report = ex.distributed(task, grid, ex.seeds_from(args.seed, args.seeds), args.threads,
                            args.out_dir)
    _print_cells(report)
    return EXIT_OK


def cmd_checkpoint(args) -> int:
    report = ex.checkpoint_experiment(_task(args), args.sparsities, args.schedules,
                                      args.random_schedules, ex.seeds_from(args.seed, args.seeds),
                                      args.threads, args.out_dir)
    _print_cells(report)
    _print_cells(report, "reduction_factor_32bit")
    if not report["all_chains_reconstruct"]:
        print("error: a checkpoint chain failed to reconstruct", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    base, chain = load_chain(args.manifest)
    params = reconstruct(base, chain)
    print(f"reconstructed {params.size} parameters from {len(chain)} checkpoints")
    if args.out is not None:
        save_params(args.out, params)
    if args.expect is not None:
        expected = load_params(args.expect)
        if expected.shape != params.shape or not np.array_equal(expected.view(np.uint64),
                                                                params.view(np.uint64)):
            print("error: reconstruction differs from the expected parameters", file=sys.stderr)
            return EXIT_DATA
        print("matches expected parameters bit-exactly")
    return EXIT_OK


COMMANDS = {
    "fisher": cmd_fisher,
    "sweep-sparsity": cmd_sweep_sparsity,
    "ablate-samples": cmd_ablate_samples,
    "ablate-fisher-type": cmd_ablate_fisher_type,
    "distributed": cmd_distributed,
    "checkpoint": cmd_checkpoint,
    "reconstruct": cmd_reconstruct,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ChainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
