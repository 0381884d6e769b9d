"""Command-line interface.

Subcommands:
  simulate   closed-loop run -> trace.csv, metrics.csv, iterations.jsonl
  validate   parse and check a scenario file
  compare    metric deltas between two result directories
  partition  print the partition boundaries, passing table and dictator
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatnet",
                                description="district heating network simulation and control")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a closed-loop simulation")
    sim.add_argument("--scenario", required=True,
                     help="scenario file path or bundled name (two_user, nested, six_sub_18ish)")
    sim.add_argument("--mode", required=True, choices=("nominal", "centralized", "distributed"))
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--hours", type=float, default=None,
                     help="override simulation length [h]")
    sim.add_argument("--substeps", type=int, default=1,
                     help="truth-model integration substeps per sampling interval")
    sim.add_argument("--quiet", action="store_true")

    val = sub.add_parser("validate", help="validate a scenario file")
    val.add_argument("--scenario", required=True)

    cmp_ = sub.add_parser("compare", help="compare metrics of two runs")
    cmp_.add_argument("--out", default=None, help="write comparison.csv here")
    cmp_.add_argument("runs", nargs=2, help="two result directories")

    part = sub.add_parser("partition", help="print partition and passing report")
    part.add_argument("--scenario", required=True)
    return p


def _resolve_scenario(spec: str):
    from .harness import load_scenario, scenario_path

    p = Path(spec)
    if p.exists():
        return load_scenario(p)
    return load_scenario(scenario_path(spec))


def _cmd_simulate(args) -> int:
    from .harness import (run_closed_loop, write_iterations_jsonl,
                          write_metrics_csv, write_trace_csv)

    cfg = _resolve_scenario(args.scenario)
    if args.hours is not None:
        cfg.sim_steps = int(round(args.hours * 3600.0 / cfg.horizon.dt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()

    def progress(k, n, status):
        if not args.quiet and (k % 6 == 0 or k == n - 1):
            print(f"  step {k + 1}/{n} [{status}] {time.perf_counter() - t0:.0f}s",
                  flush=True)

    trace, metrics = run_closed_loop(cfg, args.mode, substeps=args.substeps,
                                     progress=progress)
    write_trace_csv(trace, cfg, out / "trace.csv")
    write_metrics_csv(metrics, out / "metrics.csv")
    write_iterations_jsonl(trace, out / "iterations.jsonl")
    if not args.quiet:
        print(f"{cfg.name} [{args.mode}]: {metrics.steps} steps in "
              f"{time.perf_counter() - t0:.1f}s")
        print(f"  cumulative losses  {metrics.cumulative_losses_j / 3.6e6:.3f} kWh")
        print(f"  avg return temp    {metrics.avg_return_temp:.2f} C")
        print(f"  avg plant flow     {metrics.plant_flow.mean():.3f} kg/s")
        print(f"  envelope breaches  {metrics.envelope_violations}")
        print(f"  results in {out}")
    return 0


def _cmd_validate(args) -> int:
    cfg = _resolve_scenario(args.scenario)
    g = cfg.graph
    print(f"{cfg.name}: OK")
    print(f"  {g.n_nodes} nodes, {g.n_edges} edges "
          f"({len(g.user_edges)} users, {len(g.bypass_edges)} bypasses)")
    print(f"  {len(cfg.partitions)} partition(s), horizon {cfg.horizon.N}x{cfg.horizon.dt:.0f}s, "
          f"{cfg.sim_steps} simulation steps")
    return 0


def _read_metrics(path: Path) -> dict:
    out = {}
    with open(path / "metrics.csv") as fh:
        next(fh)
        for line in fh:
            key, val = line.strip().split(",", 1)
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


def _cmd_compare(args) -> int:
    a, b = (Path(r) for r in args.runs)
    ma, mb = _read_metrics(a), _read_metrics(b)
    rows = []
    print(f"{'metric':28s} {str(ma.get('mode')):>12s} {str(mb.get('mode')):>12s} {'change':>9s}")
    for key in ("cumulative_losses_j", "avg_losses_w", "avg_return_temp_c",
                "avg_plant_flow_kg_s", "avg_bypass_flow_kg_s",
                "max_used_flexibility", "envelope_violations"):
        va, vb = ma.get(key), mb.get(key)
        if va is None or vb is None:
            continue
        rel = (vb - va) / va * 100.0 if va else float("nan")
        rows.append((key, va, vb, rel))
        print(f"{key:28s} {va:12.4g} {vb:12.4g} {rel:+8.1f}%")
    if args.out:
        outp = Path(args.out)
        outp.mkdir(parents=True, exist_ok=True)
        with open(outp / "comparison.csv", "w") as fh:
            fh.write(f"metric,{ma.get('mode')},{mb.get('mode')},change_pct\n")
            for key, va, vb, rel in rows:
                fh.write(f"{key},{va:.10g},{vb:.10g},{rel:.4f}\n")
    return 0


def _cmd_partition(args) -> int:
    from .dmpc import select_dictator
    from .net import CutKind

    cfg = _resolve_scenario(args.scenario)
    g = cfg.graph
    demand = {j: cfg.buildings[g.edges[j].name].qout_profile[:cfg.horizon.N]
              for j in g.user_edges}
    dictator = select_dictator(g, cfg.partitions, demand)
    print(f"{cfg.name}: {len(cfg.partitions)} partition(s); "
          f"plant pressure dictator: {dictator}")
    owner = {}
    for part in cfg.partitions:
        for j in part.edge_idx:
            owner[j] = part.pid
    for part in cfg.partitions:
        enames = [g.edges[j].name for j in part.edge_idx]
        users = [g.edges[j].name for j in part.edge_idx if g.edges[j].kind.is_user]
        print(f"  partition {part.pid}: edges {enames}")
        if users:
            print(f"    users: {users}")
        for v in part.roots:
            kind = part.cut_kind[v]
            if kind is CutKind.PLANT_ROOT:
                src = "dictated plant pressure" if part.pid != dictator else "own decision"
                print(f"    root {g.nodes[v]} (plant): pressure <- {src}; "
                      f"inlet flow -> plant aggregation")
            elif kind is CutKind.FEEDING:
                up = sorted({owner[j] for j in g.in_edges[v]})
                print(f"    root {g.nodes[v]} (feeding cut): pressure/temperature <- "
                      f"partition {up}; inlet flow -> partition {up}")
            elif kind is CutKind.RETURN:
                up = sorted({owner[j] for j in g.in_edges[v] if owner[j] != part.pid})
                print(f"    root {g.nodes[v]} (return cut): inflow/temperature <- "
                      f"partition {up}; pressure -> partition {up}")
        for v in part.terminals:
            kind = part.cut_kind[v]
            if kind is CutKind.PLANT_TERMINAL:
                print(f"    terminal {g.nodes[v]} (plant): pressure gauge 0")
            elif kind is CutKind.FEEDING:
                dn = sorted({owner[j] for j in g.out_edges[v] if owner[j] != part.pid})
                print(f"    terminal {g.nodes[v]} (feeding cut): pressure/temperature -> "
                      f"partition {dn}; outflow <- partition {dn}")
            elif kind is CutKind.RETURN:
                dn = sorted({owner[j] for j in g.out_edges[v]})
                print(f"    terminal {g.nodes[v]} (return cut): outflow/temperature -> "
                      f"partition {dn}; pressure <- partition {dn}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "partition":
            return _cmd_partition(args)
    except Exception as exc:  # surfaced as a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
