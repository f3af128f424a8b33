"""Command-line entry point.

Subcommands: ``run`` (sensing-loop scenario), ``baseline`` (central join),
``sweep`` (node-count x target grid), ``multilat`` (localization demo).
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import yaml

from .config import ConfigError, load_scenario, load_sweep
from .harness import (
    run_baseline,
    run_scenario,
    run_sweep,
    write_baseline_csv,
    write_baseline_summary,
    write_sweep_csv,
)
from .multilat import NoSolutionError, Region, Scene, estimate_region, guarantee_region, locate

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cohloop",
        description="Time-coherent sensor acquisition over sensing loops (simulated).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("run", "run a sensing-loop scenario and write tuples.csv/reads.csv"),
        ("baseline", "run the central-join baseline over the same network model"),
        ("sweep", "run a node-count x coherence-target grid"),
        ("multilat", "localize a signal source and emit precision regions"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("config", help="path to the YAML config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default="out", help="output directory (default: out)")
        p.add_argument("--trace", action="store_true", help="write events.tsv")
    return parser


_MULTILAT_KEYS = {"sensors", "signal_speed", "locate", "guarantee", "estimate"}


def _multilat(raw: dict, out_dir: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    unknown = set(raw) - _MULTILAT_KEYS
    if unknown:
        raise ConfigError([f"unknown keys {sorted(unknown)}"])
    sensors = raw.get("sensors")
    if not (isinstance(sensors, list) and len(sensors) == 3):
        raise ConfigError(["sensors: expected exactly three [x, y] positions"])
    try:
        scene = Scene(
            sensors=tuple((float(x), float(y)) for x, y in sensors),
            signal_speed=float(raw.get("signal_speed", 343.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"sensors: {exc}"])
    os.makedirs(out_dir, exist_ok=True)

    def write_points(name: str, pts) -> None:
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_m", "y_m"])
            for x, y in pts:
                w.writerow([f"{x:.6f}", f"{y:.6f}"])

    did_anything = False
    if "locate" in raw:
        spec = raw["locate"]
        if not isinstance(spec, dict) or not {"d1", "d2"} <= set(spec):
            raise ConfigError(["locate: expected a mapping with d1 and d2 (meters)"])
        x, y, a = locate(scene, float(spec["d1"]), float(spec["d2"]))
        write_points("locate.csv", [(x, y)])
        print(f"locate: x={x:.3f} y={y:.3f} range={a:.3f}")
        did_anything = True
    if "guarantee" in raw:
        spec = raw["guarantee"]
        if not isinstance(spec, dict) or not {"l_s", "l_e", "ages"} <= set(spec):
            raise ConfigError(["guarantee: expected a mapping with l_s, l_e, ages"])
        region = guarantee_region(
            scene, float(spec["l_s"]), float(spec["l_e"]),
            [float(a) for a in spec["ages"]],
        )
        write_points("guarantee_region.csv", region.vertices)
        print(f"guarantee region: {len(region.vertices)} vertices"
              + (" (unbounded)" if region.unbounded else ""))
        did_anything = True
    if "estimate" in raw:
        spec = raw["estimate"]
        if not isinstance(spec, dict) or not {"t_min", "t_max"} <= set(spec):
            raise ConfigError(["estimate: expected a mapping with t_min, t_max"])
        region = estimate_region(
            scene,
            [float(v) for v in spec["t_min"]],
            [float(v) for v in spec["t_max"]],
        )
        write_points("estimate_region.csv", region.vertices)
        print(f"estimate region: {len(region.vertices)} vertices"
              + (" (unbounded)" if region.unbounded else ""))
        did_anything = True
    if not did_anything:
        raise ConfigError(["need at least one of: locate, guarantee, estimate"])


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            scenario = load_scenario(args.config, seed_override=args.seed)
            scenario.trace = args.trace
            sim = run_scenario(scenario, out_dir=args.out_dir)
            print(
                f"{scenario.name}: {len(sim.results)} tuples, "
                f"{sim.counters['sent']} messages -> {args.out_dir}/tuples.csv"
            )
        elif args.command == "baseline":
            scenario = load_scenario(args.config, seed_override=args.seed)
            run = run_baseline(scenario)
            os.makedirs(args.out_dir, exist_ok=True)
            write_baseline_csv(os.path.join(args.out_dir, "baseline.csv"), run)
            write_baseline_summary(
                os.path.join(args.out_dir, "baseline_summary.csv"), run
            )
            print(
                f"baseline: {len(run.slots)} slots, {run.inbound_messages} inbound "
                f"messages -> {args.out_dir}/baseline.csv"
            )
        elif args.command == "sweep":
            grid = load_sweep(args.config)
            rows = run_sweep(grid, seed=args.seed)
            os.makedirs(args.out_dir, exist_ok=True)
            write_sweep_csv(os.path.join(args.out_dir, "sweep.csv"), rows)
            print(f"sweep: {len(rows)} cells -> {args.out_dir}/sweep.csv")
        elif args.command == "multilat":
            with open(args.config) as fh:
                raw = yaml.safe_load(fh)
            _multilat(raw, args.out_dir)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
