"""Exact best responses of producers and consumers to per-edge prices.

Every agent solves the same kind of problem::

    max_w  g . w - F(sum w) - rho/2 |w - w_prev|^2
    s.t.   w >= 0,  t_min <= sum w <= t_max

with ``F`` convex and ``F'(t) = min(slope * t + intercept, cap)``.  For a
producer ``g`` is the price vector and ``F`` the generation cost
(``cap = inf``).  For a consumer ``g = alpha - price`` and ``F = -U`` whose
derivative is capped at 0 past the utility knee.

The solvers work on many agents at once: per-slot arrays are grouped into
contiguous blocks described by CSR offsets.  Single-agent entry points
wrap the batched routines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ConsumerParams, Instance, ModelError, ProducerParams, cost, utility

log = logging.getLogger(__name__)

TIE_BREAKS = ("lowest-index", "proportional-to-previous")


class SubproblemError(ValueError):
    pass


@dataclass(frozen=True)
class BestResponseConfig:
    """``rho`` is the proximal weight on the previous response; 0 gives the plain argmax."""

    rho: float = 1e-3
    tie_break: str = "lowest-index"

    def __post_init__(self):
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise SubproblemError(f"rho must be finite and >= 0, got {self.rho}")
        if self.tie_break not in TIE_BREAKS:
            raise SubproblemError(f"unknown tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class AgentBlock:
    """Per-agent curve and bound parameters for one side of the market."""

    slope: np.ndarray
    intercept: np.ndarray
    cap: np.ndarray
    t_min: np.ndarray
    t_max: np.ndarray

    @classmethod
    def producers(cls, producers) -> "AgentBlock":
        return cls(
            slope=np.array([p.a for p in producers], dtype=float),
            intercept=np.array([p.b for p in producers], dtype=float),
            cap=np.full(len(producers), np.inf),
            t_min=np.array([p.x_min for p in producers], dtype=float),
            t_max=np.array([p.x_max for p in producers], dtype=float),
        )

    @classmethod
    def consumers(cls, consumers) -> "AgentBlock":
        return cls(
            slope=np.array([c.delta for c in consumers], dtype=float),
            intercept=np.array([-c.omega for c in consumers], dtype=float),
            cap=np.zeros(len(consumers)),
            t_min=np.array([c.y_min for c in consumers], dtype=float),
            t_max=np.array([c.y_max for c in consumers], dtype=float),
        )


def _group_ids(ptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))


def _segment_max(values: np.ndarray, ptr: np.ndarray, empty: float) -> np.ndarray:
    out = np.full(len(ptr) - 1, empty)
    nonempty = np.diff(ptr) > 0
    if values.size:
        starts = ptr[:-1][nonempty]
        out[nonempty] = np.maximum.reduceat(values, starts)
    return out


def _segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    out = np.zeros(len(ptr) - 1)
    if values.size:
        np.add.at(out, _group_ids(ptr), values)
    return out


class _Waterfill:
    """Sorted breakpoints of ``s(theta) = sum max(0, (h_e - theta) / rho)`` per group."""

    def __init__(self, h: np.ndarray, ptr: np.ndarray, rho: np.ndarray):
        self.h = h
        self.ptr = ptr
        self.gid = _group_ids(ptr)
        self.rho = rho
        self.rho_s = rho[self.gid]
        order = np.lexsort((-h, self.gid))
        hs = h[order]
        cs = np.cumsum(hs)
        base = np.concatenate(([0.0], cs))[ptr[:-1]]
        self.hs = hs
        self.cs = cs - base[self.gid]
        self.rank = np.arange(h.size) - ptr[:-1][self.gid] + 1

    def total(self, theta: np.ndarray) -> np.ndarray:
        w = np.maximum(0.0, (self.h - theta[self.gid]) / self.rho_s)
        return _segment_sum(w, self.ptr)

    def solve(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Root of ``s(theta) = p + q * theta`` per group; ``inf`` when the root total is 0."""
        rho = self.rho_s
        pg, qg = p[self.gid], q[self.gid]
        cand = (self.cs - rho * pg) / (self.rank + rho * qg)
        ok = self.hs > cand
        best = _segment_max(np.where(ok, self.rank, 0), self.ptr, 0)
        theta = np.full(len(self.ptr) - 1, np.inf)
        hit = best > 0
        slot = self.ptr[:-1][hit] + best[hit] - 1
        theta[hit] = cand[slot]
        return theta


def respond(g, prev, ptr, block: AgentBlock, cfg: BestResponseConfig, rho=None) -> np.ndarray:
    """Batched best response for all groups described by ``ptr``.

    ``g`` and ``prev`` are per-slot arrays in group order.  ``rho``
    optionally overrides ``cfg.rho`` with one proximal weight per group;
    groups with weight 0 use the plain argmax.
    """
    g = np.asarray(g, dtype=float)
    prev = np.asarray(prev, dtype=float)
    ptr = np.asarray(ptr)
    sizes = np.diff(ptr)
    if np.any((sizes == 0) & (block.t_min > 0)):
        bad = np.flatnonzero((sizes == 0) & (block.t_min > 0))
        raise SubproblemError(f"agents {bad.tolist()} have no edges but a positive lower bound")
    if rho is None:
        rho = np.full(len(sizes), cfg.rho)
    else:
        rho = np.broadcast_to(np.asarray(rho, dtype=float), (len(sizes),))
    prox = rho > 0
    if prox.all():
        return _respond_prox(g, prev, ptr, block, rho)
    w = _respond_argmax(g, prev, ptr, block, cfg.tie_break)
    if prox.any():
        w_prox = _respond_prox(g, prev, ptr, block, np.where(prox, rho, 1.0))
        w = np.where(prox[_group_ids(ptr)], w_prox, w)
    return w


def _respond_prox(g, prev, ptr, block: AgentBlock, rho) -> np.ndarray:
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (len(ptr) - 1,))
    wf = _Waterfill(g + rho[_group_ids(ptr)] * prev, ptr, rho)
    slope, intercept, cap = block.slope, block.intercept, block.cap
    # unconstrained total: F'(t) = theta on the sloped branch
    theta = wf.solve(-intercept / slope, 1.0 / slope)
    capped = np.isfinite(cap)
    if np.any(capped):
        s_cap = wf.total(np.where(capped, cap, 0.0))
        knee = (cap - intercept) / slope
        flat = capped & (s_cap >= knee)
        theta = np.where(flat, cap, theta)
    t = wf.total(theta)
    hi = t > block.t_max
    lo = t < block.t_min
    if np.any(hi | lo):
        target = np.where(hi, block.t_max, block.t_min)
        alt = wf.solve(np.where(hi | lo, target, 0.0), np.zeros_like(target))
        theta = np.where(hi | lo, alt, theta)
    w = prev + (g - theta[wf.gid]) / wf.rho_s
    return np.maximum(w, 0.0)


def _respond_argmax(g, prev, ptr, block: AgentBlock, tie_break: str) -> np.ndarray:
    gid = _group_ids(ptr)
    gmax = _segment_max(g, ptr, -np.inf)
    slope, intercept, cap = block.slope, block.intercept, block.cap
    with np.errstate(invalid="ignore"):
        t = (np.minimum(gmax, cap) - intercept) / slope
    t = np.where(gmax > cap, block.t_max, t)
    t = np.clip(t, block.t_min, block.t_max)
    t = np.where(np.diff(ptr) == 0, 0.0, t)
    if np.any(~np.isfinite(t)):
        bad = np.flatnonzero(~np.isfinite(t))
        raise SubproblemError(f"unbounded best response for agents {bad.tolist()}")
    tied = g == gmax[gid]
    if tie_break == "lowest-index":
        pos = np.arange(g.size)
        first = _segment_max(np.where(tied, -pos, -np.inf), ptr, -np.inf)
        share = (pos == -first[gid]).astype(float)
    else:
        weight = np.where(tied, prev, 0.0)
        wsum = _segment_sum(weight, ptr)
        ntied = _segment_sum(tied.astype(float), ptr)
        share = np.where(wsum[gid] > 0, weight / np.where(wsum[gid] > 0, wsum[gid], 1.0),
                         tied / np.maximum(ntied[gid], 1.0))
    return share * t[gid]


def _single(g, prev, block: AgentBlock, cfg: BestResponseConfig) -> np.ndarray:
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if g.size == 0:
        raise SubproblemError("agent has no edges")
    prev = np.zeros_like(g) if prev is None else np.atleast_1d(np.asarray(prev, dtype=float))
    if prev.shape != g.shape:
        raise SubproblemError("previous response does not match the edge set")
    if np.any(prev < 0):
        raise SubproblemError("previous response must be non-negative")
    return respond(g, prev, np.array([0, g.size]), block, cfg)


def producer_best_response(p: ProducerParams, lambda_hat, x_prev=None,
                           cfg: BestResponseConfig = BestResponseConfig()) -> np.ndarray:
    """Per-edge sales maximizing revenue minus cost (minus the proximal term)."""
    return _single(lambda_hat, x_prev, AgentBlock.producers([p]), cfg)


def consumer_best_response(c: ConsumerParams, lambda_hat, alpha, y_prev=None,
                           cfg: BestResponseConfig = BestResponseConfig()) -> np.ndarray:
    """Per-edge purchases maximizing utility plus bonus minus payments."""
    lam = np.atleast_1d(np.asarray(lambda_hat, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if lam.shape != alpha.shape:
        raise SubproblemError("alpha does not match the edge set")
    return _single(alpha - lam, y_prev, AgentBlock.consumers([c]), cfg)


def producer_objective(p: ProducerParams, lambda_hat, x, x_prev=None, rho: float = 0.0) -> float:
    lam, x = np.atleast_1d(lambda_hat).astype(float), np.atleast_1d(x).astype(float)
    prox = 0.0 if x_prev is None else 0.5 * rho * float(np.sum((x - np.asarray(x_prev)) ** 2))
    return float(lam @ x) - cost(p, float(x.sum())) - prox


def consumer_objective(c: ConsumerParams, lambda_hat, alpha, y, y_prev=None, rho: float = 0.0) -> float:
    lam, y = np.atleast_1d(lambda_hat).astype(float), np.atleast_1d(y).astype(float)
    alpha = np.atleast_1d(alpha).astype(float)
    prox = 0.0 if y_prev is None else 0.5 * rho * float(np.sum((y - np.asarray(y_prev)) ** 2))
    return utility(c, float(y.sum())) + float((alpha - lam) @ y) - prox


def step_size_bound(p: ProducerParams, c: ConsumerParams, strict: bool = True) -> float:
    """Largest step ``1/L`` with ``L = (a + delta) / (a * delta)``.

    The consumer's curvature ``delta`` is only a valid strong-concavity
    constant when its demand range stays below the utility knee.  With
    ``strict`` an offending consumer raises; otherwise a warning is logged
    and ``delta`` is used anyway.
    """
    if not c.strongly_concave:
        msg = f"consumer utility is flat beyond {c.knee:g} < y_max={c.y_max:g}; curvature undefined"
        if strict:
            raise SubproblemError(msg)
        log.warning(msg)
    return (p.a * c.delta) / (p.a + c.delta)


class MarketResponder:
    """Best responses of every agent of an instance, in graph edge order."""

    def __init__(self, inst: Instance, cfg: BestResponseConfig):
        g = inst.graph
        self.graph = g
        self.cfg = cfg
        self.prod = AgentBlock.producers(inst.producers)
        self.cons = AgentBlock.consumers(inst.consumers)
        self.cons_order = g.consumer_order
        self.alpha_c = np.asarray(g.alpha)[self.cons_order]
        infeasible = [j for j, c in enumerate(inst.consumers)
                      if g.consumer_ptr[j + 1] == g.consumer_ptr[j] and c.y_min > 0]
        infeasible += [i for i, p in enumerate(inst.producers)
                       if g.producer_ptr[i + 1] == g.producer_ptr[i] and p.x_min > 0]
        if infeasible:
            raise ModelError("an agent without trading partners has a positive lower bound")

    def curvature_weights(self, scale: float = 1.0):
        """Per-agent proximal weights equal to ``scale`` times each agent's curvature.

        Agents with a single edge get 0: their subproblem is already
        strictly concave in its only variable.
        """
        g = self.graph
        multi_p = np.diff(g.producer_ptr) > 1
        multi_c = np.diff(g.consumer_ptr) > 1
        return (np.where(multi_p, scale * self.prod.slope, 0.0),
                np.where(multi_c, scale * self.cons.slope, 0.0))

    def producers(self, prices_p, x_prev, rho=None) -> np.ndarray:
        """``prices_p`` are the prices each producer sees per edge."""
        return respond(prices_p, x_prev, self.graph.producer_ptr, self.prod, self.cfg, rho)

    def consumers(self, prices_c, y_prev, rho=None) -> np.ndarray:
        """``prices_c`` are the prices each consumer sees per edge (edge order)."""
        o = self.cons_order
        w = respond(self.alpha_c - prices_c[o], y_prev[o], self.graph.consumer_ptr,
                    self.cons, self.cfg, rho)
        out = np.empty_like(w)
        out[o] = w
        return out
