"""Radial feeder model with linearized voltage and line-flow evaluation.

Voltages use the real-power LinDistFlow approximation: the deviation at
bus b is the sum over buses b' of the resistance shared by the root paths
of b and b', times the injection at b' (p.u.).  Line flows on a tree are
subtree sums of injections.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .model import Allocation, TradingGraph


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    f_max_kw: float

    def __post_init__(self):
        if self.f_max_kw <= 0:
            raise GridError(f"line flow limit must be positive: {self}")
        if self.r_pu < 0:
            raise GridError(f"negative resistance: {self}")


@dataclass(frozen=True, eq=False)
class GridModel:
    """Tree of ``n_buses`` buses rooted at slack bus 0.

    ``producer_bus[i]`` / ``consumer_bus[j]`` give the bus hosting each
    market participant.
    """

    n_buses: int
    lines: tuple[Line, ...]
    v_min: np.ndarray
    v_max: np.ndarray
    producer_bus: tuple[int, ...]
    consumer_bus: tuple[int, ...]
    base_kw: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "producer_bus", tuple(int(b) for b in self.producer_bus))
        object.__setattr__(self, "consumer_bus", tuple(int(b) for b in self.consumer_bus))
        for name in ("v_min", "v_max"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.n_buses,)).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if len(self.lines) != self.n_buses - 1:
            raise GridError("a radial grid needs exactly n_buses - 1 lines")
        if np.any(self.v_min <= 0) or np.any(self.v_min >= self.v_max):
            raise GridError("voltage limits need 0 < v_min < v_max")
        if self.base_kw <= 0:
            raise GridError("base_kw must be positive")
        hosted = list(self.producer_bus) + list(self.consumer_bus)
        if any(not 0 < b < self.n_buses for b in hosted):
            raise GridError("participants must sit on non-slack buses")
        if len(set(hosted)) != len(hosted):
            raise GridError("at most one participant per bus")
        self._tree  # validates topology

    @cached_property
    def _tree(self):
        adj = [[] for _ in range(self.n_buses)]
        for k, ln in enumerate(self.lines):
            for a in (ln.from_bus, ln.to_bus):
                if not 0 <= a < self.n_buses:
                    raise GridError(f"line {k} references unknown bus {a}")
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))
        parent = np.full(self.n_buses, -1)
        line_into = np.full(self.n_buses, -1)
        seen = np.zeros(self.n_buses, dtype=bool)
        seen[0] = True
        order = [0]
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if seen[v]:
                    continue
                seen[v] = True
                parent[v] = u
                line_into[v] = k
                order.append(v)
                queue.append(v)
        if not seen.all():
            raise GridError("grid is not connected (or not a tree)")
        child_of_line = np.empty(len(self.lines), dtype=int)
        child_of_line[line_into[1:]] = np.arange(1, self.n_buses)
        return parent, line_into, child_of_line, np.array(order)

    @property
    def parent(self) -> np.ndarray:
        return self._tree[0]

    @property
    def line_into(self) -> np.ndarray:
        """Index of the line feeding each bus (-1 for the slack)."""
        return self._tree[1]

    @property
    def child_of_line(self) -> np.ndarray:
        return self._tree[2]

    @property
    def bfs_order(self) -> np.ndarray:
        return self._tree[3]

    @property
    def f_max(self) -> np.ndarray:
        return np.array([ln.f_max_kw for ln in self.lines])

    @property
    def r(self) -> np.ndarray:
        return np.array([ln.r_pu for ln in self.lines])

    def root_path(self, bus: int) -> list[int]:
        """Lines on the path from ``bus`` up to the slack."""
        path = []
        while bus != 0:
            path.append(int(self.line_into[bus]))
            bus = int(self.parent[bus])
        return path


@dataclass(frozen=True, eq=False)
class SensitivityMatrices:
    s_v: np.ndarray  # (bus, bus) p.u. voltage per p.u. injection
    s_f: np.ndarray  # (line, bus) downstream indicator


@dataclass(frozen=True, eq=False)
class ConstraintReport:
    injections: np.ndarray
    voltages: np.ndarray
    flows: np.ndarray
    voltage_violation: float
    flow_violation: float
    voltage_ok: bool
    flow_ok: bool

    @property
    def ok(self) -> bool:
        return self.voltage_ok and self.flow_ok

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "voltage_ok": self.voltage_ok,
            "flow_ok": self.flow_ok,
            "max_voltage_violation_pu": self.voltage_violation,
            "max_flow_violation_kw": self.flow_violation,
            "voltages_pu": self.voltages.tolist(),
            "flows_kw": self.flows.tolist(),
        }


def build_sensitivities(grid: GridModel) -> SensitivityMatrices:
    n, m = grid.n_buses, len(grid.lines)
    s_f = np.zeros((m, n))
    for b in range(1, n):
        s_f[grid.root_path(b), b] = 1.0
    s_v = s_f.T @ (grid.r[:, None] * s_f)
    for a in (s_v, s_f):
        a.setflags(write=False)
    return SensitivityMatrices(s_v, s_f)


def bus_voltages(sens: SensitivityMatrices, injections, base_kw: float = 100.0) -> np.ndarray:
    """Per-bus voltage magnitude (p.u.) for net injections in kW (producers positive)."""
    p = np.asarray(injections, dtype=float) / base_kw
    return 1.0 + sens.s_v @ p


def line_flows(sens: SensitivityMatrices, injections) -> np.ndarray:
    """Per-line flow in kW; positive means net export toward the slack."""
    return sens.s_f @ np.asarray(injections, dtype=float)


def bus_injections(grid: GridModel, graph: TradingGraph, alloc: Allocation) -> np.ndarray:
    if len(grid.producer_bus) != graph.n_p or len(grid.consumer_bus) != graph.n_c:
        raise GridError("bus assignment does not cover every market participant")
    p = np.zeros(grid.n_buses)
    np.add.at(p, list(grid.producer_bus), graph.producer_totals(alloc.x))
    np.add.at(p, list(grid.consumer_bus), -graph.consumer_totals(alloc.y))
    return p


def check_constraints(grid: GridModel, sens: Optional[SensitivityMatrices], alloc: Allocation,
                      graph: TradingGraph, tol: float = 1e-9) -> ConstraintReport:
    """Evaluate voltage and flow limits for an allocation."""
    sens = sens or build_sensitivities(grid)
    p = bus_injections(grid, graph, alloc)
    v = bus_voltages(sens, p, grid.base_kw)
    f = line_flows(sens, p)
    v_viol = float(np.max(np.maximum(grid.v_min - v, v - grid.v_max).clip(min=0), initial=0.0))
    f_viol = float(np.max((np.abs(f) - grid.f_max).clip(min=0), initial=0.0))
    return ConstraintReport(p, v, f, v_viol, f_viol, bool(v_viol <= tol),
                            bool(f_viol <= tol * max(1.0, grid.f_max.max())))


def network_rows(grid: GridModel, sens: Optional[SensitivityMatrices] = None):
    """Linear network limits as ``G @ p <= h`` on bus injections in kW.

    Voltage rows are in p.u.; flow rows are scaled by each line's limit so
    both kinds are dimensionless.  The slack bus rows are dropped.
    """
    sens = sens or build_sensitivities(grid)
    dv = sens.s_v[1:] / grid.base_kw
    df = sens.s_f / grid.f_max[:, None]
    g = np.vstack([dv, -dv, df, -df])
    h = np.concatenate([grid.v_max[1:] - 1.0, 1.0 - grid.v_min[1:],
                        np.ones(len(grid.lines)), np.ones(len(grid.lines))])
    return g, h


def chain_grid(n_buses: int, r_pu: float, f_max_kw: float, producer_bus: Sequence[int],
               consumer_bus: Sequence[int], v_min: float = 0.9, v_max: float = 1.1,
               base_kw: float = 100.0) -> GridModel:
    lines = tuple(Line(k, k + 1, r_pu, r_pu, f_max_kw) for k in range(n_buses - 1))
    return GridModel(n_buses, lines, np.full(n_buses, v_min), np.full(n_buses, v_max),
                     tuple(producer_bus), tuple(consumer_bus), base_kw)
