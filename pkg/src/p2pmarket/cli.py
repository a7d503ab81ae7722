"""Command-line entry point: ``p2pmarket <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import clearing, experiments, oracle
from .selection import SelectionConfig, apply_selection
from .serialization import load_instance, save_instance

log = logging.getLogger("p2pmarket")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instance", type=Path, help="instance JSON (default: generate from --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", choices=experiments.GRID_TEMPLATES, default="ieee15",
                   help="grid template when generating")
    p.add_argument("--n-p", type=int, default=7)
    p.add_argument("--n-c", type=int, default=7)
    p.add_argument("--eta", type=float, help="global step size (default per-edge 1/L)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iter", type=int)
    acc = p.add_mutually_exclusive_group()
    acc.add_argument("--accelerated", dest="accelerated", action="store_true", default=None)
    acc.add_argument("--plain", dest="accelerated", action="store_false")
    p.add_argument("--select", nargs="?", const=0.0, type=float, default=None, metavar="BENCHMARK",
                   help="prune partners before clearing (benchmark defaults to 0)")
    p.add_argument("--rho", type=float)
    p.add_argument("--prox", choices=clearing.PROX_MODES)
    p.add_argument("--network-mode", choices=clearing.NETWORK_MODES)
    p.add_argument("--out", type=Path, default=Path("."))


def _load(args):
    """Instance, clearing config (file section overridden by flags) and metadata."""
    if args.instance is not None:
        inst, cfg = load_instance(args.instance)
        meta = {"instance": str(args.instance)}
    else:
        n_p, n_c = args.n_p, args.n_c
        spec = experiments.ScenarioSpec(n_p=n_p, n_c=n_c, seed=args.seed, grid=args.grid)
        inst, cfg = experiments.gen_instance(spec), clearing.ClearingConfig()
        meta = {"spec": spec.to_dict(), "spec_hash": spec.digest()}
    over = {}
    for flag, key in (("eta", "eta"), ("epsilon", "epsilon"), ("max_iter", "max_iter"),
                      ("accelerated", "accelerated"), ("rho", "rho"), ("prox", "prox"),
                      ("network_mode", "network_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    cfg = replace(cfg, **over)
    return inst, cfg, meta


def _dump(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2))
    print(path)


def cmd_gen(args) -> int:
    spec = experiments.ScenarioSpec(n_p=args.n_p, n_c=args.n_c, seed=args.seed, grid=args.grid)
    inst = experiments.gen_instance(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "instance.json"
    save_instance(path, inst, clearing.ClearingConfig(),
                  {"spec": spec.to_dict(), "spec_hash": spec.digest()})
    print(path)
    return 0


def cmd_solve(args) -> int:
    inst, cfg, meta = _load(args)
    extra = dict(meta)
    if args.select is not None:
        sel = apply_selection(inst.graph, SelectionConfig(args.select))
        inst = inst.with_graph(sel.graph)
        extra["selection"] = {"benchmark": args.select, **sel.to_dict()}
    res = clearing.run(inst, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    clearing.write_trace_csv(res, args.out / "trace.csv")
    clearing.write_summary_json(res, args.out / "summary.json", extra)
    print(f"converged={res.converged} iterations={res.iterations} welfare={res.welfare:.6f}")
    return 0 if res.converged else 1


def cmd_oracle(args) -> int:
    inst, _, meta = _load(args)
    sol = oracle.solve_centralized(inst, with_network=args.network, tol=args.tol)
    args.out.mkdir(parents=True, exist_ok=True)
    _dump(args.out / "oracle.json", {**sol.to_dict(), **meta})
    return 0


def cmd_compare(args) -> int:
    inst, cfg, meta = _load(args)
    sel = SelectionConfig(args.select if args.select is not None else 0.0)
    rep = experiments.run_compare(inst, experiments.METHODS, cfg, sel)
    args.out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(args.out / "compare.csv")
    _dump(args.out / "compare.json", {"rows": [vars(r) for r in rep.rows], **meta})
    return 0


def cmd_montecarlo(args) -> int:
    inst, cfg, meta = _load(args)
    recs = experiments.run_montecarlo(inst, args.trials, args.seed, cfg)
    sel = inst.with_graph(apply_selection(inst.graph, SelectionConfig(
        args.select if args.select is not None else 0.0)).graph)
    res = clearing.run(sel, replace(cfg, track_dual=False))
    summary = experiments.summarize_montecarlo(recs, sel.graph.n_edges, res.welfare)
    args.out.mkdir(parents=True, exist_ok=True)
    experiments.write_trials_csv(recs, args.out / "montecarlo.csv")
    _dump(args.out / "montecarlo.json", {**vars(summary), **meta})
    return 0


def cmd_sweep(args) -> int:
    inst, cfg, meta = _load(args)
    rows = experiments.run_benchmark_sweep(inst, args.benchmarks, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    experiments.write_sweep_csv(rows, args.out / "sweep.csv")
    _dump(args.out / "sweep.json", {"rows": [vars(r) for r in rows], **meta})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p2pmarket", description="Peer-to-peer energy market clearing")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("gen", cmd_gen, "generate a seeded instance"),
        ("solve", cmd_solve, "clear the market"),
        ("oracle", cmd_oracle, "solve the centralized welfare program"),
        ("compare", cmd_compare, "plain vs accelerated vs accelerated+selection"),
        ("montecarlo", cmd_montecarlo, "random partner pruning trials"),
        ("sweep", cmd_sweep, "selection benchmark sweep"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=fn)
        if name == "oracle":
            p.add_argument("--network", action="store_true", help="impose voltage and flow limits")
            p.add_argument("--tol", type=float, default=1e-8)
        elif name == "montecarlo":
            p.add_argument("--trials", type=int, default=200)
        elif name == "sweep":
            p.add_argument("--benchmarks", type=float, nargs="+",
                           default=list(np.round(np.linspace(-1, 1, 21), 2)))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
