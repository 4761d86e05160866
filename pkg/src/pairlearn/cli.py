"""Command line experiment runner.

``run`` executes one configuration file and leaves behind a metrics CSV,
a final checkpoint, and a per-branch summary on stdout. ``sweep``
enumerates a Cartesian grid of config overrides, runs every cell for
every listed seed, and aggregates final accuracies as mean and sample
standard deviation per cell, reading the numbers back from the per-run
CSV files so the aggregate always matches the persisted artifacts.

The data root may come from the PAIRLEARN_DATA_ROOT environment variable
when a config file does not set data.root.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from .config import build_run_config, parse_config_file
from .data import FormatError
from .nn import ConfigError
from .trainer import TrainingAborted, read_metrics_csv, run_experiment


def _build_config(mapping: dict[str, str]):
    return build_run_config(mapping, data_root=os.environ.get("PAIRLEARN_DATA_ROOT"))


def _print_summary(rows, config) -> None:
    last = rows[-1] if rows else None
    if last is None:
        print("no epochs ran")
        return
    print(f"{'branch':<8}{'kind':<14}{'epochs':<8}{'top1':<8}{'top5':<8}")
    print(f"{'a':<8}{config.branch_a.kind:<14}{last.epoch + 1:<8}"
          f"{last.eval_top1_a:<8.4f}{last.eval_top5_a:<8.4f}")
    print(f"{'b':<8}{config.branch_b.kind:<14}{last.epoch + 1:<8}"
          f"{last.eval_top1_b:<8.4f}{last.eval_top5_b:<8.4f}")


def cmd_run(args) -> int:
    try:
        mapping = parse_config_file(args.config)
        config = _build_config(mapping)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out_dir = args.out or os.path.join(
        "runs", os.path.splitext(os.path.basename(args.config))[0]
    )
    try:
        rows, ckpt_path = run_experiment(
            config, out_dir, resume_path=args.resume, stop_after=args.stop_after
        )
    except (ConfigError, FormatError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"run aborted: {e}", file=sys.stderr)
        if e.last_report:
            parts = ", ".join(f"{k}={v:.6g}" for k, v in e.last_report.items())
            print(f"last finite losses: {parts}", file=sys.stderr)
        print(f"partial metrics kept in {os.path.join(out_dir, 'metrics.csv')}",
              file=sys.stderr)
        return 3
    _print_summary(rows, config)
    print(f"metrics: {os.path.join(out_dir, 'metrics.csv')}")
    print(f"checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def parse_sweep_mapping(mapping: dict[str, str]):
    """Split a sweep file into (base config mapping, axes, seed list).

    Axes are ``sweep.axis.<name> = v1, v2, ...``. A value containing '='
    is a compound assignment like ``schedule.x=20&schedule.y=20``; a plain
    value assigns to <name> directly. Cells enumerate in sorted axis-name
    order, each axis in its listed value order.
    """
    base = {k: v for k, v in mapping.items() if not k.startswith("sweep.")}
    seeds_raw = mapping.get("sweep.seeds")
    if seeds_raw is None:
        raise ConfigError("missing required config field 'sweep.seeds'")
    try:
        seeds = [int(s.strip()) for s in seeds_raw.split(",")]
    except ValueError:
        raise ConfigError(f"sweep.seeds: expected integers, got {seeds_raw!r}") from None
    axes: list[tuple[str, list[str]]] = []
    for key in sorted(mapping):
        if not key.startswith("sweep.axis."):
            if key.startswith("sweep.") and key != "sweep.seeds":
                raise ConfigError(f"unknown sweep field {key!r}")
            continue
        name = key[len("sweep.axis."):]
        values = [v.strip() for v in mapping[key].split(",")]
        if not values or any(not v for v in values):
            raise ConfigError(f"{key}: empty value list")
        axes.append((name, values))
    if not axes:
        raise ConfigError("sweep needs at least one sweep.axis.<name> entry")
    return base, axes, seeds


def _apply_axis(mapping: dict[str, str], axis_name: str, value: str) -> None:
    if "=" in value:
        for part in value.split("&"):
            key, _, v = part.partition("=")
            mapping[key.strip()] = v.strip()
    else:
        mapping[axis_name] = value


def sweep_cells(axes: list[tuple[str, list[str]]]):
    names = [name for name, _ in axes]
    for combo in itertools.product(*(values for _, values in axes)):
        yield dict(zip(names, combo))


def _final_row(csv_path: str) -> dict[str, str]:
    rows = read_metrics_csv(csv_path)
    if not rows:
        raise ConfigError(f"{csv_path}: no metrics rows")
    return rows[-1]


def aggregate_cells(out_dir: str, cell_records: list[dict]) -> list[dict]:
    """Mean and sample std of final accuracies per cell, from the CSVs."""
    aggregated = []
    for record in cell_records:
        stats: dict[str, float] = {}
        finals = []
        for run in record["runs"]:
            if run["status"] != "ok":
                continue
            finals.append(_final_row(os.path.join(run["dir"], "metrics.csv")))
        for column in ("eval_top1_a", "eval_top5_a", "eval_top1_b", "eval_top5_b"):
            values = np.array([float(row[column]) for row in finals])
            short = column.replace("eval_", "")
            if values.size:
                stats[f"{short}_mean"] = float(values.mean())
                stats[f"{short}_std"] = float(values.std(ddof=1)) if values.size > 1 else 0.0
            else:
                stats[f"{short}_mean"] = float("nan")
                stats[f"{short}_std"] = float("nan")
        aggregated.append({
            "coords": record["coords"],
            "seeds_ok": sum(1 for run in record["runs"] if run["status"] == "ok"),
            "seeds_failed": sum(1 for run in record["runs"] if run["status"] != "ok"),
            **stats,
        })
    return aggregated


def write_sweep_summary(path: str, axis_names: list[str], aggregated: list[dict]) -> None:
    stat_cols = ["top1_a_mean", "top1_a_std", "top5_a_mean", "top5_a_std",
                 "top1_b_mean", "top1_b_std", "top5_b_mean", "top5_b_std"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(axis_names + ["seeds_ok", "seeds_failed"] + stat_cols) + "\n")
        for row in aggregated:
            cells = [row["coords"][name] for name in axis_names]
            cells += [str(row["seeds_ok"]), str(row["seeds_failed"])]
            cells += [repr(row[c]) for c in stat_cols]
            f.write(",".join(cells) + "\n")


def cmd_sweep(args) -> int:
    try:
        mapping = parse_config_file(args.config)
        base, axes, seeds = parse_sweep_mapping(mapping)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    axis_names = [name for name, _ in axes]
    os.makedirs(args.out, exist_ok=True)
    cell_records = []
    for i, coords in enumerate(sweep_cells(axes)):
        runs = []
        for seed in seeds:
            cell_mapping = dict(base)
            for name, value in coords.items():
                _apply_axis(cell_mapping, name, value)
            cell_mapping["seed"] = str(seed)
            run_dir = os.path.join(args.out, f"cell{i:03d}_seed{seed}")
            status = "ok"
            try:
                config = _build_config(cell_mapping)
                run_experiment(config, run_dir)
            except (ConfigError, FormatError, TrainingAborted) as e:
                status = "failed"
                print(f"cell {i} seed {seed} failed: {e}", file=sys.stderr)
            runs.append({"seed": seed, "dir": run_dir, "status": status})
        label = ", ".join(f"{k}={v}" for k, v in coords.items())
        ok = sum(1 for r in runs if r["status"] == "ok")
        print(f"cell {i} ({label}): {ok}/{len(runs)} runs ok")
        cell_records.append({"coords": coords, "runs": runs})
    aggregated = aggregate_cells(args.out, cell_records)
    summary_path = os.path.join(args.out, "summary.csv")
    write_sweep_summary(summary_path, axis_names, aggregated)
    print(f"summary: {summary_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairlearn",
        description="Train coupled backbone pairs and run ablation sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute one configuration file")
    run_p.add_argument("--config", required=True, help="key = value config file")
    run_p.add_argument("--resume", default=None, help="checkpoint to resume from")
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument("--stop-after", type=int, default=None,
                       help="stop after this epoch (checkpoint keeps full schedule)")
    run_p.set_defaults(func=cmd_run)
    sweep_p = sub.add_parser("sweep", help="run a grid of configurations")
    sweep_p.add_argument("--config", required=True, help="sweep file (base + sweep.axis.*)")
    sweep_p.add_argument("--out", required=True, help="output directory")
    sweep_p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
