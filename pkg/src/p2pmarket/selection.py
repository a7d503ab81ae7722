"""Consumer-side partner selection applied to the trading graph before clearing.

Each consumer rescales its own transaction coefficients onto [-1, 1] and
keeps only the producers whose rescaled value reaches a benchmark.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import TradingGraph

log = logging.getLogger(__name__)

NORMALIZATIONS = ("min-max",)


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    benchmark: float = 0.0
    normalization: str = "min-max"

    def __post_init__(self):
        if not -1.0 <= self.benchmark <= 1.0:
            raise SelectionError(f"benchmark must lie in [-1, 1], got {self.benchmark}")
        if self.normalization not in NORMALIZATIONS:
            raise SelectionError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True, eq=False)
class SelectionResult:
    graph: TradingGraph
    keep: np.ndarray  # mask over the original edges
    isolated_producers: tuple[int, ...] = field(default=())

    @property
    def edges_before(self) -> int:
        return len(self.keep)

    @property
    def edges_after(self) -> int:
        return int(self.keep.sum())

    def to_dict(self) -> dict:
        return {
            "edges_before": self.edges_before,
            "edges_after": self.edges_after,
            "isolated_producers": list(self.isolated_producers),
        }


def normalize_coefficients(alphas, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Min-max map of one consumer's coefficients onto [-1, 1]; a flat row maps to 0.

    ``lo``/``hi`` default to the row's own extremes.  Passing the extremes
    of the consumer's full row keeps the map fixed after pruning.
    """
    a = np.asarray(alphas, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise SelectionError("need a nonempty 1-D coefficient row")
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    if hi == lo:
        return np.zeros_like(a)
    return np.clip(2.0 * (a - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def select_partners(normalized, benchmark: float) -> np.ndarray:
    """Positions of the neighbours whose normalized value is at least ``benchmark``."""
    return np.flatnonzero(np.asarray(normalized, dtype=float) >= benchmark)


def selection_mask(graph: TradingGraph, cfg: SelectionConfig) -> np.ndarray:
    keep = np.zeros(graph.n_edges, dtype=bool)
    ranges = graph.consumer_alpha_range
    for j in range(graph.n_c):
        edges = graph.consumer_edges(j)
        if len(edges) == 0:
            continue
        a = graph.alpha[edges]
        chosen = select_partners(normalize_coefficients(a, *ranges[j]), cfg.benchmark)
        if chosen.size == 0:
            # flat rows map to 0, so a positive benchmark would drop everyone
            chosen = np.flatnonzero(a == a.max())
        keep[edges[chosen]] = True
    return keep


def apply_selection(graph: TradingGraph, cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Prune ``graph`` to each consumer's selected partners; the input is not modified."""
    keep = selection_mask(graph, cfg)
    pruned = graph.subgraph(keep)
    had = np.diff(graph.producer_ptr) > 0
    has = np.diff(pruned.producer_ptr) > 0
    isolated = tuple(int(i) for i in np.flatnonzero(had & ~has))
    if isolated:
        log.info("selection left producers %s without partners", isolated)
    return SelectionResult(pruned, keep, isolated)
