"""Command-line driver: run experiments and recompute metrics from a matrix.

``protodrift run --config cfg.json --seed 7 --out results/`` writes
``accuracy_matrix.csv``, ``metrics.json``, ``curves.csv`` and ``drift.csv``
into the output directory, plus per-run logs, prototype dumps and model
checkpoints. ``protodrift metrics --matrix m.csv`` prints the metric suite
for a standalone accuracy matrix.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ContractError, DataFormatError, UsageError
from .metrics import (
    AccuracyMatrix,
    RunReport,
    avg_accuracy,
    avg_forgetting,
    avg_learning_accuracy,
)
from .protocol import METHODS, RunLogger, run_stream
from .prototypes import save_prototypes


def _aggregate(per_seed: dict[int, RunReport]) -> dict[str, dict]:
    """Mean/min/max over seeds; F_T aggregates skip absent values."""
    keys = ("A_T", "F_T", "A_cur")
    out: dict[str, dict] = {"seeds": {}}
    for seed, report in sorted(per_seed.items()):
        out["seeds"][str(seed)] = report.metrics_dict()
    for stat, fn in (("mean", lambda v: sum(v) / len(v)), ("min", min), ("max", max)):
        entry = {}
        for key in keys:
            vals = [out["seeds"][s][key] for s in out["seeds"]
                    if out["seeds"][s][key] is not None]
            entry[key] = fn(vals) if vals else None
        curves = [out["seeds"][s]["per_task_A_i"] for s in out["seeds"]]
        entry["per_task_A_i"] = [fn([c[i] for c in curves]) for i in range(len(curves[0]))]
        out[stat] = entry
    return out


def _write_outputs(out_dir: Path, config: ExperimentConfig,
                   results: dict[str, dict[int, RunReport]]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = list(results)
    seeds = sorted(next(iter(results.values())))
    n_tasks = next(iter(results.values()))[seeds[0]].matrix.n_tasks

    single = len(methods) == 1 and len(seeds) == 1
    matrix_path = out_dir / "accuracy_matrix.csv"
    if single:
        results[methods[0]][seeds[0]].matrix.to_csv(matrix_path)
    else:
        with open(matrix_path, "w", newline="\n", encoding="utf-8") as fh:
            for method in methods:
                for seed in seeds:
                    for i, row in enumerate(results[method][seed].matrix.rows, start=1):
                        cells = [method, str(seed), str(i)] + [repr(v) for v in row]
                        fh.write(",".join(cells) + "\n")

    metrics = {
        "config": config.echo(),
        "methods": {m: _aggregate(results[m]) for m in methods},
        "wall_clock": {
            m: {str(s): results[m][s].stage_seconds for s in seeds} for m in methods
        },
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    with open(out_dir / "curves.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["task"] + methods) + "\n")
        for i in range(n_tasks):
            cells = [str(i + 1)]
            for method in methods:
                vals = [avg_accuracy(results[method][s].matrix, i + 1) for s in seeds]
                cells.append(repr(sum(vals) / len(vals)))
            fh.write(",".join(cells) + "\n")

    with open(out_dir / "drift.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["task"] + methods) + "\n")
        for t in range(2, n_tasks + 1):
            cells = [str(t)]
            for method in methods:
                vals = [results[method][s].drift.get(t) for s in seeds]
                vals = [v for v in vals if v is not None]
                cells.append(repr(sum(vals) / len(vals)) if vals else "")
            fh.write(",".join(cells) + "\n")


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.method is not None:
        if args.method != "ALL" and args.method not in METHODS:
            raise UsageError(
                f"unknown method {args.method!r}; valid values: "
                f"{', '.join(list(METHODS) + ['ALL'])}"
            )
        config.method = args.method
    seeds = [args.seed] if args.seed is not None else config.seeds
    out_dir = Path(args.out)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    results: dict[str, dict[int, RunReport]] = {}
    for method in config.methods():
        results[method] = {}
        for seed in seeds:
            stream = config.build_stream(seed)
            log_path = out_dir / "logs" / f"run_{method}_s{seed}.jsonl"
            with open(log_path, "w", encoding="utf-8") as log_fh:
                logger = RunLogger(log_fh)
                report, state = run_stream(stream, config.strategy(method), seed, logger)
            results[method][seed] = report
            if len(state.store) > 0:
                proto_dir = out_dir / "prototypes"
                proto_dir.mkdir(exist_ok=True)
                save_prototypes(state.store,
                                proto_dir / f"{method}_s{seed}.csv",
                                proto_dir / f"{method}_s{seed}.cov.bin")
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(state.model, ckpt_dir / f"{method}_s{seed}.bin",
                            compensator=state.dcn)
            print(f"[{method} seed={seed}] A_T={report.final_accuracy:.4f} "
                  f"F_T={'n/a' if report.final_forgetting is None else f'{report.final_forgetting:.4f}'} "
                  f"A_cur={report.learning_accuracy:.4f}")

    _write_outputs(out_dir, config, results)
    print(f"wrote outputs to {out_dir} ({time.perf_counter() - started:.1f}s)")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    matrix = AccuracyMatrix.from_csv(args.matrix)
    payload = {
        "A_T": avg_accuracy(matrix, matrix.n_tasks),
        "F_T": avg_forgetting(matrix, matrix.n_tasks),
        "A_cur": avg_learning_accuracy(matrix),
        "per_task_A_i": [avg_accuracy(matrix, i) for i in range(1, matrix.n_tasks + 1)],
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodrift",
        description="Class-incremental learning experiments for time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the config JSON")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--method", default=None,
                       help=f"override method; one of {', '.join(METHODS)} or ALL")
    run_p.set_defaults(func=_cmd_run)

    met_p = sub.add_parser("metrics", help="recompute metrics from a matrix CSV")
    met_p.add_argument("--matrix", required=True, help="accuracy matrix CSV")
    met_p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
