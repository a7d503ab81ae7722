"""Instance generation and the comparison, Monte Carlo and benchmark-sweep studies."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .clearing import ClearingConfig, ClearingResult, run
from .grid import GridModel, Line
from .model import ConsumerParams, Instance, ProducerParams, TradingGraph
from .selection import SelectionConfig, apply_selection

log = logging.getLogger(__name__)

GRID_TEMPLATES = ("none", "chain", "ieee15")
METHODS = ("plain", "accelerated", "accelerated+selection")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Seeded recipe for a random market.

    Each consumer's ``delta`` is drawn as ``omega / (y_max * s)`` with
    ``s`` from ``knee_margin``, so its demand cap sits on the
    strictly concave part of the utility.
    """

    n_p: int = 7
    n_c: int = 7
    seed: int = 0
    a: tuple[float, float] = (0.05, 0.2)
    b: tuple[float, float] = (1.0, 4.0)
    c: tuple[float, float] = (0.0, 0.0)
    x_max: tuple[float, float] = (20.0, 60.0)
    omega: tuple[float, float] = (5.0, 12.0)
    y_max: tuple[float, float] = (10.0, 60.0)
    knee_margin: tuple[float, float] = (1.0, 1.5)
    alpha: tuple[float, float] = (0.0, 1.0)
    grid: str = "none"
    line_limit_kw: float = 60.0
    v_min: float = 0.9
    v_max: float = 1.1
    chain_r_pu: float = 1e-3
    base_kw: float = 100.0

    def __post_init__(self):
        if self.n_p < 1 or self.n_c < 1:
            raise ScenarioError("need at least one producer and one consumer")
        for name in ("a", "b", "c", "x_max", "omega", "y_max", "knee_margin", "alpha"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ScenarioError(f"range {name} is empty")
        if self.a[0] <= 0 or self.omega[0] <= 0 or self.y_max[0] <= 0 or self.knee_margin[0] < 1:
            raise ScenarioError("a, omega and y_max must be positive and knee_margin >= 1")
        if self.grid not in GRID_TEMPLATES:
            raise ScenarioError(f"unknown grid template {self.grid!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def ieee15_spec(seed: int = 0, **kw) -> ScenarioSpec:
    return ScenarioSpec(n_p=7, n_c=7, seed=seed, grid="ieee15", **kw)


def _ieee15_grid(spec: ScenarioSpec) -> GridModel:
    data = json.loads(resources.files("p2pmarket").joinpath("data/ieee15.json").read_text())
    if spec.n_p != len(data["producer_buses"]) or spec.n_c != len(data["consumer_buses"]):
        raise ScenarioError("the ieee15 template hosts exactly 7 producers and 7 consumers")
    z_base = (data["v_base_kv"] * 1e3) ** 2 / (spec.base_kw * 1e3)
    lines = tuple(Line(ln["from"], ln["to"], ln["r_ohm"] / z_base, ln["x_ohm"] / z_base, spec.line_limit_kw)
                  for ln in data["lines"])
    n = data["n_buses"]
    return GridModel(n, lines, np.full(n, spec.v_min), np.full(n, spec.v_max),
                     tuple(data["producer_buses"]), tuple(data["consumer_buses"]), spec.base_kw)


def _chain_grid(spec: ScenarioSpec) -> GridModel:
    # producers and consumers alternate along the feeder while both remain
    n = spec.n_p + spec.n_c + 1
    order = []
    p, c = list(range(spec.n_p)), list(range(spec.n_c))
    while p or c:
        if p:
            order.append(("p", p.pop(0)))
        if c:
            order.append(("c", c.pop(0)))
    pbus, cbus = [0] * spec.n_p, [0] * spec.n_c
    for bus, (kind, idx) in enumerate(order, start=1):
        (pbus if kind == "p" else cbus)[idx] = bus
    lines = tuple(Line(k, k + 1, spec.chain_r_pu, spec.chain_r_pu, spec.line_limit_kw) for k in range(n - 1))
    return GridModel(n, lines, np.full(n, spec.v_min), np.full(n, spec.v_max),
                     tuple(pbus), tuple(cbus), spec.base_kw)


def gen_instance(spec: ScenarioSpec) -> Instance:
    """Random market on the complete bipartite graph, reproducible from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    u = rng.uniform
    producers = [ProducerParams(u(*spec.a), u(*spec.b), u(*spec.c), 0.0, u(*spec.x_max))
                 for _ in range(spec.n_p)]
    consumers = []
    for _ in range(spec.n_c):
        om, ym = u(*spec.omega), u(*spec.y_max)
        consumers.append(ConsumerParams(om, om / (ym * u(*spec.knee_margin)), 0.0, ym))
    alpha = u(*spec.alpha, size=(spec.n_c, spec.n_p))
    graph = TradingGraph.complete(spec.n_p, spec.n_c, alpha)
    grid = None
    if spec.grid == "ieee15":
        grid = _ieee15_grid(spec)
    elif spec.grid == "chain":
        grid = _chain_grid(spec)
    return Instance(producers, consumers, graph, grid)


@dataclass
class MethodRow:
    method: str
    converged: bool
    iterations: int
    wall_ms: float
    welfare: float
    edges: int

    def as_list(self) -> list:
        return [self.method, int(self.converged), self.iterations, f"{self.wall_ms:.3f}",
                f"{self.welfare:.9g}", self.edges]


@dataclass
class ComparisonReport:
    rows: list[MethodRow] = field(default_factory=list)
    results: dict = field(default_factory=dict, repr=False)

    HEADER = ("method", "converged", "iterations", "wall_ms", "welfare", "edges")

    def row(self, method: str) -> MethodRow:
        return next(r for r in self.rows if r.method == method)

    def write_csv(self, path) -> None:
        _write_csv(path, self.HEADER, [r.as_list() for r in self.rows])


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _clear(inst: Instance, cfg: ClearingConfig) -> ClearingResult:
    res = run(inst, cfg)
    if not res.converged:
        log.warning("run did not converge (%d iterations)", res.iterations)
    return res


def run_compare(inst: Instance, methods: Sequence[str] = METHODS, cfg: ClearingConfig = ClearingConfig(),
                selection: SelectionConfig = SelectionConfig()) -> ComparisonReport:
    """Clear the same instance with each method under identical stopping rules."""
    if len(methods) < 2:
        raise ScenarioError("a comparison needs at least two methods")
    report = ComparisonReport()
    for m in methods:
        if m not in METHODS:
            raise ScenarioError(f"unknown method {m!r}")
        target = inst
        if m == "accelerated+selection":
            target = inst.with_graph(apply_selection(inst.graph, selection).graph)
        res = _clear(target, replace(cfg, accelerated=(m != "plain"), track_dual=False))
        report.rows.append(MethodRow(m, res.converged, res.iterations, res.wall_ms, res.welfare,
                                     target.graph.n_edges))
        report.results[m] = res
    return report


@dataclass
class TrialRecord:
    trial: int
    pairs: int
    welfare: float
    iterations: int
    converged: bool

    def as_list(self) -> list:
        return [self.trial, self.pairs, f"{self.welfare:.9g}", self.iterations, int(self.converged)]


TRIAL_HEADER = ("trial", "pairs", "welfare", "iterations", "converged")


def random_partner_mask(graph: TradingGraph, rng: np.random.Generator) -> np.ndarray:
    """Each consumer keeps a uniformly random nonempty subset of its neighbours."""
    keep = np.zeros(graph.n_edges, dtype=bool)
    for j in range(graph.n_c):
        edges = graph.consumer_edges(j)
        if len(edges) == 0:
            continue
        while True:
            bits = rng.random(len(edges)) < 0.5
            if bits.any():
                break
        keep[edges[bits]] = True
    return keep


def run_montecarlo(inst: Instance, trials: int, seed: int,
                   cfg: ClearingConfig = ClearingConfig()) -> list[TrialRecord]:
    if trials < 1:
        raise ScenarioError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = replace(cfg, track_dual=False)
    out = []
    for t in range(trials):
        sub = inst.with_graph(inst.graph.subgraph(random_partner_mask(inst.graph, rng)))
        res = _clear(sub, cfg)
        out.append(TrialRecord(t, sub.graph.n_edges, res.welfare, res.iterations, res.converged))
    return out


def write_trials_csv(records: Sequence[TrialRecord], path) -> None:
    _write_csv(path, TRIAL_HEADER, [r.as_list() for r in records])


@dataclass(frozen=True)
class MonteCarloSummary:
    spearman: float
    selection_pairs: int
    selection_welfare: float
    median_welfare_at_or_above: Optional[float]
    trials_at_or_above: int

    @property
    def selection_not_worse(self) -> bool:
        m = self.median_welfare_at_or_above
        return m is None or self.selection_welfare >= m


def summarize_montecarlo(records: Sequence[TrialRecord], selection_pairs: int,
                         selection_welfare: float) -> MonteCarloSummary:
    """Rank correlation of pairs vs welfare, and the selection point against trials with as many pairs."""
    pairs = np.array([r.pairs for r in records])
    welfare = np.array([r.welfare for r in records])
    rho = float(stats.spearmanr(pairs, welfare).statistic) if len(records) > 1 else float("nan")
    mask = pairs >= selection_pairs
    med = float(np.median(welfare[mask])) if mask.any() else None
    return MonteCarloSummary(rho, selection_pairs, selection_welfare, med, int(mask.sum()))


@dataclass
class SweepRow:
    benchmark: float
    edges: int
    welfare: float
    iterations: int
    converged: bool

    def as_list(self) -> list:
        return [self.benchmark, self.edges, f"{self.welfare:.9g}", self.iterations, int(self.converged)]


SWEEP_HEADER = ("benchmark", "edges", "welfare", "iterations", "converged")


def run_benchmark_sweep(inst: Instance, benchmarks: Sequence[float],
                        cfg: ClearingConfig = ClearingConfig()) -> list[SweepRow]:
    cfg = replace(cfg, track_dual=False)
    rows = []
    for bm in benchmarks:
        sub = inst.with_graph(apply_selection(inst.graph, SelectionConfig(bm)).graph)
        res = _clear(sub, cfg)
        rows.append(SweepRow(float(bm), sub.graph.n_edges, res.welfare, res.iterations, res.converged))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    _write_csv(path, SWEEP_HEADER, [r.as_list() for r in rows])
