"""Market participants, the trading graph and welfare evaluation.

All quantities refer to a single one-hour slot, so kWh and kW are used
interchangeably.  Welfare functions never clip to generation or demand
bounds; bounds are the solvers' business.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for invalid parameters or mismatched edge index sets."""


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class ProducerParams:
    """Quadratic generation cost ``a/2 x^2 + b x + c`` on ``[x_min, x_max]``."""

    a: float
    b: float
    c: float = 0.0
    x_min: float = 0.0
    x_max: float = math.inf

    def __post_init__(self):
        if not _finite(self.a, self.b, self.c, self.x_min):
            raise ModelError(f"non-finite producer parameters: {self}")
        if self.a <= 0 or self.b <= 0 or self.c < 0:
            raise ModelError(f"producer needs a > 0, b > 0, c >= 0: {self}")
        if not 0 <= self.x_min <= self.x_max:
            raise ModelError(f"producer needs 0 <= x_min <= x_max: {self}")

    @property
    def fixed(self) -> bool:
        return self.x_min == self.x_max


@dataclass(frozen=True)
class ConsumerParams:
    """Saturating quadratic utility with knee at ``omega / delta``."""

    omega: float
    delta: float
    y_min: float = 0.0
    y_max: float = math.inf

    def __post_init__(self):
        if not _finite(self.omega, self.delta, self.y_min):
            raise ModelError(f"non-finite consumer parameters: {self}")
        if self.omega <= 0 or self.delta <= 0:
            raise ModelError(f"consumer needs omega > 0, delta > 0: {self}")
        if not 0 <= self.y_min <= self.y_max:
            raise ModelError(f"consumer needs 0 <= y_min <= y_max: {self}")

    @property
    def knee(self) -> float:
        return self.omega / self.delta

    @property
    def strongly_concave(self) -> bool:
        """True when the whole demand range lies on the quadratic branch."""
        return self.y_max <= self.knee

    @property
    def inflexible(self) -> bool:
        return self.y_min == self.y_max


@dataclass(frozen=True)
class CriterionEntry:
    """One preference criterion: weight ``r`` times trade characteristic ``d``."""

    criterion: str
    r: float
    d: float

    def __post_init__(self):
        if not _finite(self.r, self.d):
            raise ModelError(f"criterion entry must be finite: {self}")


@dataclass(frozen=True, eq=False)
class TradingGraph:
    """Bipartite producer/consumer graph with one coefficient per edge.

    Edges are stored sorted by ``(producer, consumer)`` so each producer's
    edges are contiguous.  Every per-edge vector in the package (prices,
    quantities, coefficients) uses this order.
    """

    n_p: int
    n_c: int
    edges: tuple[tuple[int, int], ...]
    alpha: np.ndarray = field(repr=False)
    # Per-consumer (min, max) of the coefficient row the graph was cut from;
    # kept through subgraph() so that rescaling stays anchored to the full row.
    alpha_range: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_range is not None:
            rng = np.array(self.alpha_range, dtype=float).reshape(self.n_c, 2)
            rng.setflags(write=False)
            object.__setattr__(self, "alpha_range", rng)
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if len(edges) != alpha.size:
            raise ModelError("alpha must have one entry per edge")
        if not np.all(np.isfinite(alpha)):
            raise ModelError("alpha must be finite")
        if len(set(edges)) != len(edges):
            raise ModelError("duplicate edge")
        for i, j in edges:
            if not (0 <= i < self.n_p and 0 <= j < self.n_c):
                raise ModelError(f"edge {(i, j)} out of range")
        order = sorted(range(len(edges)), key=lambda e: edges[e])
        edges = tuple(edges[e] for e in order)
        alpha = alpha[order]
        alpha.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def complete(cls, n_p: int, n_c: int, alpha) -> "TradingGraph":
        """Complete bipartite graph; ``alpha[j, i]`` is consumer j's coefficient for producer i."""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (n_c, n_p):
            raise ModelError(f"alpha must have shape ({n_c}, {n_p})")
        edges = [(i, j) for i in range(n_p) for j in range(n_c)]
        return cls(n_p, n_c, tuple(edges), np.array([alpha[j, i] for i, j in edges]))

    @classmethod
    def matched_pairs(cls, n: int, alpha=None) -> "TradingGraph":
        """Producer i trades only with consumer i."""
        alpha = np.zeros(n) if alpha is None else np.asarray(alpha, dtype=float)
        return cls(n, n, tuple((i, i) for i in range(n)), alpha)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def producer_of(self) -> np.ndarray:
        return np.array([i for i, _ in self.edges], dtype=int)

    @cached_property
    def consumer_of(self) -> np.ndarray:
        return np.array([j for _, j in self.edges], dtype=int)

    @cached_property
    def producer_ptr(self) -> np.ndarray:
        """CSR offsets: producer i owns edges ``producer_ptr[i]:producer_ptr[i+1]``."""
        return np.searchsorted(self.producer_of, np.arange(self.n_p + 1), side="left")

    @cached_property
    def consumer_order(self) -> np.ndarray:
        """Edge permutation grouping edges by consumer (then producer)."""
        return np.lexsort((self.producer_of, self.consumer_of))

    @cached_property
    def consumer_ptr(self) -> np.ndarray:
        cons = self.consumer_of[self.consumer_order]
        return np.searchsorted(cons, np.arange(self.n_c + 1), side="left")

    def producer_edges(self, i: int) -> np.ndarray:
        return np.arange(self.producer_ptr[i], self.producer_ptr[i + 1])

    def consumer_edges(self, j: int) -> np.ndarray:
        return self.consumer_order[self.consumer_ptr[j]:self.consumer_ptr[j + 1]]

    def producer_neighbors(self, i: int) -> list[int]:
        return [int(j) for j in self.consumer_of[self.producer_edges(i)]]

    def consumer_neighbors(self, j: int) -> list[int]:
        return [int(i) for i in self.producer_of[self.consumer_edges(j)]]

    def edge_index(self, i: int, j: int) -> int:
        try:
            return self._edge_lookup[(i, j)]
        except KeyError:
            raise ModelError(f"no edge between producer {i} and consumer {j}") from None

    @cached_property
    def _edge_lookup(self) -> dict:
        return {e: k for k, e in enumerate(self.edges)}

    def alpha_row(self, j: int) -> dict[int, float]:
        """Consumer j's coefficients keyed by producer."""
        idx = self.consumer_edges(j)
        return {int(self.producer_of[e]): float(self.alpha[e]) for e in idx}

    def producer_totals(self, x) -> np.ndarray:
        x = self.check_edge_vector(x, "x")
        return np.bincount(self.producer_of, weights=x, minlength=self.n_p)

    def consumer_totals(self, y) -> np.ndarray:
        y = self.check_edge_vector(y, "y")
        return np.bincount(self.consumer_of, weights=y, minlength=self.n_c)

    def subgraph(self, keep) -> "TradingGraph":
        """Graph restricted to the edges where ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        edges = tuple(e for e, k in zip(self.edges, keep) if k)
        return TradingGraph(self.n_p, self.n_c, edges, self.alpha[keep], self.consumer_alpha_range)

    @cached_property
    def consumer_alpha_range(self) -> np.ndarray:
        """Reference (min, max) per consumer; NaN for a consumer with no edges."""
        if self.alpha_range is not None:
            return self.alpha_range
        rng = np.full((self.n_c, 2), np.nan)
        for j in range(self.n_c):
            a = self.alpha[self.consumer_edges(j)]
            if a.size:
                rng[j] = a.min(), a.max()
        rng.setflags(write=False)
        return rng

    def check_edge_vector(self, v, name: str = "vector") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_edges,):
            raise ModelError(f"{name} has shape {v.shape}, expected ({self.n_edges},)")
        return v

    def __eq__(self, other):
        if not isinstance(other, TradingGraph):
            return NotImplemented
        return (self.n_p == other.n_p and self.n_c == other.n_c
                and self.edges == other.edges
                and np.array_equal(self.alpha, other.alpha))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Allocation:
    """Per-edge sold (``x``) and purchased (``y``) energy in graph edge order."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.shape != y.shape:
            raise ModelError("x and y must share the edge index set")
        if np.any(x < 0) or np.any(y < 0):
            raise ModelError("allocation entries must be non-negative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def consensus(cls, z) -> "Allocation":
        z = np.asarray(z, dtype=float)
        return cls(z, z)

    @classmethod
    def zeros(cls, n_edges: int) -> "Allocation":
        return cls(np.zeros(n_edges), np.zeros(n_edges))

    @property
    def mismatch(self) -> np.ndarray:
        return self.x - self.y


@dataclass(frozen=True)
class Instance:
    """Everything needed to clear one market slot."""

    producers: tuple[ProducerParams, ...]
    consumers: tuple[ConsumerParams, ...]
    graph: TradingGraph
    grid: Optional["object"] = None  # p2pmarket.grid.GridModel

    def __post_init__(self):
        object.__setattr__(self, "producers", tuple(self.producers))
        object.__setattr__(self, "consumers", tuple(self.consumers))
        if len(self.producers) != self.graph.n_p or len(self.consumers) != self.graph.n_c:
            raise ModelError("participant counts do not match the trading graph")

    def with_graph(self, graph: TradingGraph) -> "Instance":
        return Instance(self.producers, self.consumers, graph, self.grid)

    @property
    def n_agents(self) -> int:
        return len(self.producers) + len(self.consumers)


def cost(p: ProducerParams, x_total: float) -> float:
    """Generation cost of producing ``x_total`` kWh."""
    if not math.isfinite(x_total):
        raise ModelError("cost needs a finite quantity")
    return 0.5 * p.a * x_total ** 2 + p.b * x_total + p.c


def marginal_cost(p: ProducerParams, x_total: float) -> float:
    return p.a * x_total + p.b


def utility(c: ConsumerParams, y_total: float) -> float:
    """Consumption utility, flat beyond the knee ``omega / delta``."""
    if not math.isfinite(y_total) or y_total < 0:
        raise ModelError("utility needs a finite non-negative quantity")
    if y_total >= c.knee:
        return c.omega ** 2 / (2 * c.delta)
    return c.omega * y_total - 0.5 * c.delta * y_total ** 2


def marginal_utility(c: ConsumerParams, y_total: float) -> float:
    return max(c.omega - c.delta * y_total, 0.0)


def transaction_coefficient(entries: Iterable[CriterionEntry]) -> float:
    """Coefficient ``sum r * d`` over a consumer's criteria for one producer."""
    return float(sum(e.r * e.d for e in entries))


def _as_vectors(*vs) -> list[np.ndarray]:
    arrs = [np.atleast_1d(np.asarray(v, dtype=float)) for v in vs]
    if len({a.shape for a in arrs}) != 1:
        raise ModelError("per-edge vectors must share an index set")
    return arrs


def producer_welfare(p: ProducerParams, prices: Sequence[float], x: Sequence[float]) -> float:
    """Revenue minus cost for one producer's edges."""
    prices, x = _as_vectors(prices, x)
    return float(prices @ x) - cost(p, float(x.sum()))


def consumer_welfare(c: ConsumerParams, prices, alphas, y) -> float:
    """Utility plus differentiation bonus minus payments for one consumer's edges."""
    prices, alphas, y = _as_vectors(prices, alphas, y)
    return utility(c, float(y.sum())) + float((alphas - prices) @ y)


def social_welfare(graph: TradingGraph, producers: Sequence[ProducerParams],
                   consumers: Sequence[ConsumerParams], alloc: Allocation) -> float:
    """Aggregate welfare of any allocation, consensus or not.

    Utility and the differentiation bonus use purchases ``y``; cost uses
    sales ``x``.
    """
    x = graph.check_edge_vector(alloc.x, "x")
    y = graph.check_edge_vector(alloc.y, "y")
    xt = graph.producer_totals(x)
    yt = graph.consumer_totals(y)
    total = sum(utility(c, float(t)) for c, t in zip(consumers, yt))
    total -= sum(cost(p, float(t)) for p, t in zip(producers, xt))
    return float(total + graph.alpha @ y)


def instance_welfare(inst: Instance, alloc: Allocation) -> float:
    return social_welfare(inst.graph, inst.producers, inst.consumers, alloc)


def market_welfare_split(inst: Instance, prices, alloc: Allocation) -> tuple[float, float]:
    """Sum of producer welfare and sum of consumer welfare at the given prices."""
    g = inst.graph
    prices = g.check_edge_vector(prices, "prices")
    prod = 0.0
    for i, p in enumerate(inst.producers):
        e = g.producer_edges(i)
        prod += producer_welfare(p, prices[e], alloc.x[e])
    cons = 0.0
    for j, c in enumerate(inst.consumers):
        e = g.consumer_edges(j)
        cons += consumer_welfare(c, prices[e], g.alpha[e], alloc.y[e])
    return prod, cons
