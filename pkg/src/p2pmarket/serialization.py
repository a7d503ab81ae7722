"""JSON round-trip for instances and clearing configurations."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .clearing import ClearingConfig
from .grid import GridModel, Line
from .model import ConsumerParams, Instance, ProducerParams, TradingGraph

FORMAT_VERSION = 1


def _num(v: float):
    # JSON has no infinity; unbounded limits are written as null
    return None if math.isinf(v) else float(v)


def _inf(v) -> float:
    return math.inf if v is None else float(v)


def grid_to_dict(grid: GridModel) -> dict:
    return {
        "n_buses": grid.n_buses,
        "base_kw": grid.base_kw,
        "v_min": grid.v_min.tolist(),
        "v_max": grid.v_max.tolist(),
        "producer_bus": list(grid.producer_bus),
        "consumer_bus": list(grid.consumer_bus),
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_pu": ln.r_pu, "x_pu": ln.x_pu,
             "f_max_kw": ln.f_max_kw}
            for ln in grid.lines
        ],
    }


def grid_from_dict(d: dict) -> GridModel:
    lines = tuple(Line(ln["from"], ln["to"], ln["r_pu"], ln["x_pu"], ln["f_max_kw"]) for ln in d["lines"])
    return GridModel(d["n_buses"], lines, np.asarray(d["v_min"]), np.asarray(d["v_max"]),
                     tuple(d["producer_bus"]), tuple(d["consumer_bus"]), d.get("base_kw", 100.0))


def instance_to_dict(inst: Instance, clearing: Optional[ClearingConfig] = None,
                     meta: Optional[dict] = None) -> dict:
    g = inst.graph
    d = {
        "version": FORMAT_VERSION,
        "producers": [
            {"a": p.a, "b": p.b, "c": p.c, "x_min": p.x_min, "x_max": _num(p.x_max)}
            for p in inst.producers
        ],
        "consumers": [
            {"omega": c.omega, "delta": c.delta, "y_min": c.y_min, "y_max": _num(c.y_max)}
            for c in inst.consumers
        ],
        "edges": [
            {"producer": i, "consumer": j, "alpha": float(a)} for (i, j), a in zip(g.edges, g.alpha)
        ],
        "grid": grid_to_dict(inst.grid) if inst.grid is not None else None,
    }
    if g.alpha_range is not None:
        d["alpha_range"] = g.alpha_range.tolist()
    if clearing is not None:
        d["clearing"] = clearing.to_dict()
    if meta:
        d["meta"] = meta
    return d


def instance_from_dict(d: dict) -> Instance:
    producers = [ProducerParams(p["a"], p["b"], p.get("c", 0.0), p.get("x_min", 0.0), _inf(p.get("x_max")))
                 for p in d["producers"]]
    consumers = [ConsumerParams(c["omega"], c["delta"], c.get("y_min", 0.0), _inf(c.get("y_max")))
                 for c in d["consumers"]]
    edges = [(e["producer"], e["consumer"]) for e in d["edges"]]
    alpha = np.array([e["alpha"] for e in d["edges"]], dtype=float)
    graph = TradingGraph(len(producers), len(consumers), tuple(edges), alpha, d.get("alpha_range"))
    grid = grid_from_dict(d["grid"]) if d.get("grid") else None
    return Instance(producers, consumers, graph, grid)


def clearing_from_dict(d: Optional[dict]) -> ClearingConfig:
    if not d:
        return ClearingConfig()
    known = ClearingConfig.__dataclass_fields__
    return ClearingConfig(**{k: v for k, v in d.items() if k in known})


def save_instance(path, inst: Instance, clearing: Optional[ClearingConfig] = None,
                  meta: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst, clearing, meta), indent=1))


def load_instance(path) -> tuple[Instance, ClearingConfig]:
    d = json.loads(Path(path).read_text())
    return instance_from_dict(d), clearing_from_dict(d.get("clearing"))
