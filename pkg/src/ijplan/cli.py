"""Command-line entry points: run scenarios (single or batch, either planner
mode), emit logs/metrics/timings/SVG artifacts, and summarize metric CSVs.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .planner import PlannerConfig
from .scenarios import load_scenario, scenario_from_json
from .sim import SimLog, compute_metrics, run_closed_loop

ENV_PREFIX = "IJPLAN_"


class SchemaMismatchError(ValueError):
    pass


@dataclass
class RunConfig:
    scenarios: list[str]
    planner_config: str | None = None
    out_dir: str = "out"
    seed: int = 0
    mode: str = "ijp"  # ijp | non_ec | both
    plot: bool = False
    plot_every: int = 10


def parse_planner_config(path: str | None, overrides: dict | None = None) -> dict:
    """Flat TOML-style ``key = value`` file; values are JSON literals
    (numbers, true/false, strings, arrays). An empty or missing body keeps
    every default."""
    raw: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise SchemaMismatchError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                key = key.strip()
                value = value.strip()
                try:
                    raw[key] = json.loads(value)
                except json.JSONDecodeError:
                    raw[key] = value.strip("\"'")
    if overrides:
        raw.update(overrides)
    return raw


def _env_overrides() -> dict:
    """Environment overrides: IJPLAN_<FIELD>=json-value."""
    out = {}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX) :].lower()
        try:
            out[name] = json.loads(value)
        except json.JSONDecodeError:
            out[name] = value
    return out


METRIC_COLUMNS = [
    "scenario",
    "mode",
    "drivable_area_compliance",
    "progress",
    "no_at_fault_collision",
    "final_score",
]


def _svg_snapshot(log: SimLog, step_idx: int) -> str:
    """Minimal overhead view: lanes, route, ego plan, agent predictions as
    planned by the chosen candidate."""
    header = log.header
    rec = log.records[step_idx]
    scenario = header["scenario"]

    route = np.array(header["route"])
    lo = route.min(axis=0) - 20.0
    hi = route.max(axis=0) + 20.0
    span = np.maximum(hi - lo, 1.0)
    width = 900.0
    scale = width / span[0]
    height = max(span[1] * scale, 120.0)

    def pt(x, y) -> str:
        return f"{(x - lo[0]) * scale:.1f},{height - (y - lo[1]) * scale:.1f}"

    def poly(points, color, dash="", w=1.5) -> str:
        p = " ".join(pt(x, y) for x, y in points)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        return (
            f'<polyline points="{p}" fill="none" stroke="{color}"'
            f' stroke-width="{w}"{dash_attr}/>'
        )

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="100%" height="100%" fill="#fafafa"/>',
    ]
    for lane in scenario["lanes"]:
        for b in ("left_boundary", "right_boundary"):
            parts.append(poly(lane[b]["xy"], "#999999"))
        parts.append(poly(lane["centerline"]["xy"], "#cccccc", dash="6,6", w=1.0))
    parts.append(poly(header["route"], "#2ca02c", dash="2,4", w=1.0))

    plan = rec["plan"]
    parts.append(poly(plan["ego_xy"], "#d62728", w=2.5))
    for agent_id, xy in plan.get("agents_xy", {}).items():
        parts.append(poly(xy, "#1f77b4", w=2.0))
    ex, ey = rec["ego"][0], rec["ego"][1]
    parts.append(f'<circle cx="{pt(ex, ey).split(",")[0]}" cy="{pt(ex, ey).split(",")[1]}" r="4" fill="#d62728"/>')
    for agent_id, state in rec["agents"].items():
        cx, cy = pt(state[0], state[1]).split(",")
        parts.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="#1f77b4"/>')
    parts.append(
        f'<text x="8" y="16" font-size="12" fill="#333">{scenario["name"]} '
        f'step={rec["step"]} t={rec["t"]:.2f}s</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts)


def run(config: RunConfig) -> int:
    """Run every scenario in every requested mode; write logs, metrics, a CSV
    of one row per (scenario, mode), timing breakdowns, and optional SVGs."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths: list[str] = []
    for pattern in config.scenarios:
        if os.path.isdir(pattern):
            paths.extend(sorted(glob.glob(os.path.join(pattern, "*.json"))))
        else:
            paths.append(pattern)
    missing = [p for p in paths if not os.path.exists(p)]
    if missing or not paths:
        record = {"error": "scenario path not found", "paths": missing or config.scenarios}
        (out_dir / "error.json").write_text(json.dumps(record, indent=1))
        print(json.dumps(record), file=sys.stderr)
        return 2

    overrides = _env_overrides()
    try:
        planner_raw = parse_planner_config(config.planner_config)
    except (OSError, SchemaMismatchError) as err:
        record = {"error": str(err), "path": config.planner_config}
        (out_dir / "error.json").write_text(json.dumps(record, indent=1))
        print(json.dumps(record), file=sys.stderr)
        return 2
    for key in ("seed", "mode"):
        planner_raw.pop(key, None)
    planner_raw.update({k: v for k, v in overrides.items() if k not in ("mode", "seed", "out")})

    modes = [config.mode] if config.mode != "both" else ["ijp", "non_ec"]
    rows = []
    for path in paths:
        scenario = load_scenario(path)
        for mode in modes:
            cfg = PlannerConfig.from_mapping(
                {**planner_raw, "mode": mode, "seed": config.seed}
            )
            log, timings = run_closed_loop(scenario, cfg)
            metrics = compute_metrics(log)

            subdir = out_dir / f"{scenario.name}__{mode}"
            subdir.mkdir(parents=True, exist_ok=True)
            (subdir / "log.jsonl").write_text(log.to_jsonl())
            (subdir / "metrics.json").write_text(
                json.dumps(metrics.to_dict(), indent=1, sort_keys=True)
            )
            (subdir / "timings.json").write_text(json.dumps(timings, indent=1))
            if config.plot:
                plots = subdir / "plots"
                plots.mkdir(exist_ok=True)
                for idx in range(0, len(log.records), config.plot_every):
                    (plots / f"step_{idx:04d}.svg").write_text(_svg_snapshot(log, idx))
            rows.append(
                {
                    "scenario": scenario.name,
                    "mode": mode,
                    **{k: f"{v:.6f}" for k, v in metrics.to_dict().items()},
                }
            )
            print(
                f"{scenario.name:<28s} {mode:<7s} "
                f"final_score={metrics.final_score:.3f} "
                f"collision_free={metrics.no_at_fault_collision:.0f} "
                f"progress={metrics.progress:.2f}"
            )

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return 0


def report(csv_paths: list[str], out_path: str | None = None) -> dict:
    """Per-mode means per metric across one or more metric CSVs."""
    rows = []
    for path in csv_paths:
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(METRIC_COLUMNS) - set(reader.fieldnames):
                raise SchemaMismatchError(f"{path}: unexpected columns {reader.fieldnames}")
            rows.extend(list(reader))
    if not rows:
        raise SchemaMismatchError("no data rows in the given CSVs")

    modes: dict[str, list[dict]] = {}
    for row in rows:
        modes.setdefault(row["mode"], []).append(row)
    table = {}
    for mode, group in modes.items():
        table[mode] = {
            metric: sum(float(r[metric]) for r in group) / len(group)
            for metric in METRIC_COLUMNS[2:]
        }
    order = sorted(table, key=lambda m: -table[m]["final_score"])

    header = f"{'mode':<8s}" + "".join(f"{m:>26s}" for m in METRIC_COLUMNS[2:])
    print(header)
    for mode in order:
        print(
            f"{mode:<8s}"
            + "".join(f"{table[mode][m]:>26.4f}" for m in METRIC_COLUMNS[2:])
        )
    result = {"means": table, "order": order, "n_rows": len(rows)}
    if out_path:
        Path(out_path).write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ijplan", description="Joint trajectory planner scenario runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run scenarios closed-loop")
    p_run.add_argument("--scenario", action="append", default=[], help="scenario JSON path")
    p_run.add_argument("--batch", default=None, help="directory of scenario JSONs")
    p_run.add_argument("--planner-config", default=None)
    p_run.add_argument("--mode", default="ijp", choices=["ijp", "non_ec", "both"])
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--plot", action="store_true")

    p_rep = sub.add_parser("report", help="summarize metric CSVs")
    p_rep.add_argument("csvs", nargs="+")
    p_rep.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    env = _env_overrides()

    if args.command == "run":
        scenarios = list(args.scenario)
        if args.batch:
            scenarios.append(args.batch)
        cfg = RunConfig(
            scenarios=scenarios,
            planner_config=args.planner_config,
            out_dir=str(env.get("out", args.out)),
            seed=int(env.get("seed", args.seed)),
            mode=str(env.get("mode", args.mode)),
            plot=bool(args.plot),
        )
        return run(cfg)

    try:
        report(args.csvs, out_path=args.out)
    except (SchemaMismatchError, OSError) as err:
        print(json.dumps({"error": str(err)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
