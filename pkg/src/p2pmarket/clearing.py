"""Iterative market clearing by (accelerated) dual gradient descent on edge prices.

Each round every producer and consumer best-responds to the same frozen
per-edge prices; producers then move each price against the edge's
supply/demand mismatch.  The accelerated variant extrapolates prices with
a momentum sequence before the next round.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import grid as gridmod
from .model import Allocation, Instance
from .subproblem import BestResponseConfig, MarketResponder, step_size_bound

log = logging.getLogger(__name__)

NETWORK_MODES = ("report-only", "penalty")
PROX_MODES = ("previous", "epoch")
FALLBACK_ETA = 0.1


class ClearingError(ValueError):
    pass


@dataclass(frozen=True)
class ClearingConfig:
    """Knobs of a clearing run.

    ``eta`` may be a scalar, a per-edge sequence, or None for the default
    per-edge ``1/L`` (falling back to 0.1 where a consumer's curvature is
    undefined).  ``lambda0`` is either the name of a policy
    (``"marginal-cost"``: each producer's ``b`` plus ``lambda0_offset``),
    a scalar, or a per-edge sequence.

    ``prox`` selects how best responses are regularized:

    * ``"previous"``: weight ``rho`` on the distance to the agent's previous
      response (``rho = 0`` is the plain argmax).
    * ``"epoch"``: each agent with two or more edges is pulled toward an
      anchor with weight ``epoch_weight`` times its own curvature.  The
      anchor is held fixed until consensus is reached, then moved to the
      current allocation and momentum restarts.  The run ends when
      consensus is reached and the anchor no longer moves by more than
      ``epsilon``.  Within an epoch the prices follow the plain
      (accelerated) dual gradient of a smooth dual, so ``eta = 1/L``
      keeps its rate guarantee.
    """

    eta: Union[None, float, Sequence[float]] = None
    epsilon: float = 1e-3
    max_iter: int = 20000
    accelerated: bool = True
    network_mode: str = "report-only"
    rho: float = 1e-3
    tie_break: str = "lowest-index"
    prox: str = "epoch"
    epoch_weight: float = 1.0
    lambda0: Union[str, float, Sequence[float]] = "marginal-cost"
    lambda0_offset: float = 1.0
    track_dual: bool = True
    penalty_step: float = 1.0
    network_tol: float = 1e-3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ClearingError("epsilon must be positive")
        if self.max_iter < 1:
            raise ClearingError("max_iter must be at least 1")
        if self.network_mode not in NETWORK_MODES:
            raise ClearingError(f"unknown network_mode {self.network_mode!r}")
        if self.prox not in PROX_MODES:
            raise ClearingError(f"unknown prox mode {self.prox!r}")
        if not self.epoch_weight > 0:
            raise ClearingError("epoch_weight must be positive")
        if isinstance(self.lambda0, str) and self.lambda0 != "marginal-cost":
            raise ClearingError(f"unknown lambda0 policy {self.lambda0!r}")

    @property
    def response(self) -> BestResponseConfig:
        return BestResponseConfig(self.rho, self.tie_break)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("eta", "lambda0"):
            if isinstance(d[k], np.ndarray):
                d[k] = d[k].tolist()
            elif isinstance(d[k], tuple):
                d[k] = list(d[k])
        return d


@dataclass
class MarketState:
    """Iterate of the clearing loop.

    ``k`` counts all rounds; ``k_momentum`` is the counter driving the
    momentum sequence and restarts at 1 when an epoch anchor moves.
    """

    k: int
    lam: np.ndarray
    lam_prev: np.ndarray
    lam_hat: np.ndarray
    gamma: float
    x: np.ndarray
    y: np.ndarray
    k_momentum: int = 1
    epochs: int = 1


@dataclass(frozen=True)
class IterationRecord:
    k: int
    mismatch_inf: float
    welfare: float
    dual_value: float = math.nan
    dual_gap: float = math.nan
    wall_time: float = 0.0


@dataclass
class ClearingResult:
    converged: bool
    iterations: int
    allocation: Allocation
    prices: np.ndarray
    welfare: float
    trace: list[IterationRecord]
    constraint_report: Optional[gridmod.ConstraintReport]
    eta: np.ndarray
    lambda0: np.ndarray
    config: ClearingConfig
    network_ok: bool = True
    edges: tuple = field(default=(), repr=False)
    epochs: int = 1

    @property
    def mismatch_inf(self) -> float:
        return float(np.max(np.abs(self.allocation.mismatch), initial=0.0))

    @property
    def wall_ms(self) -> float:
        return self.trace[-1].wall_time * 1e3 if self.trace else 0.0

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "epochs": self.epochs,
            "welfare": self.welfare,
            "mismatch_inf": self.mismatch_inf,
            "wall_ms": self.wall_ms,
            "edges": [
                {"producer": i, "consumer": j, "x": float(x), "y": float(y), "price": float(p)}
                for (i, j), x, y, p in zip(self.edges, self.allocation.x,
                                           self.allocation.y, self.prices)
            ],
            "constraint_report": (self.constraint_report.to_dict()
                                  if self.constraint_report is not None else None),
            "config": self.config.to_dict(),
        }


def gamma_next(k: int, gamma_k: float) -> float:
    """Next momentum scalar; ``gamma/k`` follows the usual FISTA sequence."""
    t = gamma_k / k
    return (k + 1) * (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0


def momentum_extrapolate(k: int, gamma_k: float, gamma_next_: float, lambda_k, lambda_prev):
    lambda_k = np.asarray(lambda_k, dtype=float)
    coef = (k + 1) * (gamma_k - k) / (k * gamma_next_)
    return lambda_k + coef * (lambda_k - np.asarray(lambda_prev, dtype=float))


def price_update(lambda_hat, eta, x, y) -> np.ndarray:
    lambda_hat, x, y = (np.asarray(v, dtype=float) for v in (lambda_hat, x, y))
    if not (lambda_hat.shape == x.shape == y.shape):
        raise ClearingError("price update vectors must share the edge index set")
    return lambda_hat - np.asarray(eta, dtype=float) * (x - y)


def stopping_check(x, y, epsilon: float) -> bool:
    """True when every edge's supply/demand mismatch is within ``epsilon`` (inclusive)."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    return bool(np.all(d <= epsilon))


def _welfare(inst: Instance, x, y) -> float:
    g = inst.graph
    xt = np.bincount(g.producer_of, weights=x, minlength=g.n_p)
    yt = np.bincount(g.consumer_of, weights=y, minlength=g.n_c)
    a = np.array([p.a for p in inst.producers])
    b = np.array([p.b for p in inst.producers])
    c = np.array([p.c for p in inst.producers])
    om = np.array([q.omega for q in inst.consumers])
    de = np.array([q.delta for q in inst.consumers])
    yc = np.minimum(yt, om / de)
    u = om * yc - 0.5 * de * yc ** 2
    return float(u.sum() - (0.5 * a * xt ** 2 + b * xt + c).sum() + g.alpha @ y)


class _DualEvaluator:
    def __init__(self, inst: Instance, tie_break: str):
        self.inst = inst
        self.responder = MarketResponder(inst, BestResponseConfig(0.0, tie_break))
        self.rho0 = (np.zeros(inst.graph.n_p), np.zeros(inst.graph.n_c))
        self.zeros = np.zeros(inst.graph.n_edges)

    def __call__(self, lam) -> float:
        x = self.responder.producers(lam, self.zeros, self.rho0[0])
        y = self.responder.consumers(lam, self.zeros, self.rho0[1])
        # welfare(x, y) + lam.(x - y) is the Lagrangian at the maximizers
        return _welfare(self.inst, x, y) + float(lam @ (x - y))


def dual_value(inst: Instance, lam, cfg: Optional[ClearingConfig] = None) -> float:
    """Dual function: sum of every agent's best attainable welfare at prices ``lam``."""
    lam = inst.graph.check_edge_vector(lam, "lambda")
    tie = cfg.tie_break if cfg is not None else "lowest-index"
    return _DualEvaluator(inst, tie)(lam)


def default_step_sizes(inst: Instance) -> np.ndarray:
    g = inst.graph
    eta = np.empty(g.n_edges)
    for e, (i, j) in enumerate(g.edges):
        p, c = inst.producers[i], inst.consumers[j]
        eta[e] = step_size_bound(p, c) if c.strongly_concave else FALLBACK_ETA
    return eta


def resolve_step_sizes(inst: Instance, cfg: ClearingConfig) -> np.ndarray:
    n = inst.graph.n_edges
    if cfg.eta is None:
        eta = default_step_sizes(inst)
    else:
        eta = np.broadcast_to(np.asarray(cfg.eta, dtype=float), (n,)).copy()
    if np.any(~np.isfinite(eta)) or np.any(eta <= 0):
        raise ClearingError("step sizes must be positive and finite")
    g = inst.graph
    for e, (i, j) in enumerate(g.edges):
        c = inst.consumers[j]
        if c.strongly_concave and eta[e] > step_size_bound(inst.producers[i], c) * (1 + 1e-12):
            log.info("step size on edge %s exceeds 1/L; rate guarantee does not apply", g.edges[e])
            break
    return eta


def initial_prices(inst: Instance, cfg: ClearingConfig) -> np.ndarray:
    g = inst.graph
    if isinstance(cfg.lambda0, str):
        b = np.array([p.b for p in inst.producers])
        return b[g.producer_of] + cfg.lambda0_offset
    lam0 = np.broadcast_to(np.asarray(cfg.lambda0, dtype=float), (g.n_edges,)).copy()
    if not np.all(np.isfinite(lam0)):
        raise ClearingError("initial prices must be finite")
    return lam0


class _NetworkPenalty:
    """Operator-side multipliers on voltage/flow limits, charged per bus."""

    def __init__(self, inst: Instance, step: float):
        grid = inst.grid
        self.grid = grid
        self.sens = gridmod.build_sensitivities(grid)
        self.G, self.h = gridmod.network_rows(grid, self.sens)
        self.mu = np.zeros(len(self.h))
        self.step = step
        g = inst.graph
        self.pbus = np.asarray(grid.producer_bus)[g.producer_of]
        self.cbus = np.asarray(grid.consumer_bus)[g.consumer_of]
        self.graph = g

    def charges(self):
        kappa = self.G.T @ self.mu
        return kappa[self.pbus], kappa[self.cbus]

    def update(self, x, y) -> float:
        p = gridmod.bus_injections(self.grid, self.graph, Allocation(x, y))
        slack = self.G @ p - self.h
        self.mu = np.maximum(0.0, self.mu + self.step * slack)
        return float(np.max(slack, initial=0.0))


def run(inst: Instance, cfg: ClearingConfig = ClearingConfig(), q_star: Optional[float] = None,
        warm_start: Optional[Allocation] = None, callback=None) -> ClearingResult:
    """Clear the market; returns the last iterate whether or not it converged.

    ``q_star`` (the optimal dual value, e.g. from the centralized oracle)
    enables the ``dual_gap`` trace column.  ``warm_start`` seeds the
    previous responses (and the first epoch anchor).
    """
    g = inst.graph
    n = g.n_edges
    eta = resolve_step_sizes(inst, cfg)
    lam0 = initial_prices(inst, cfg)
    responder = MarketResponder(inst, cfg.response)
    dual = _DualEvaluator(inst, cfg.tie_break) if (cfg.track_dual or q_star is not None) else None
    penalty = None
    if cfg.network_mode == "penalty":
        if inst.grid is None:
            raise ClearingError("penalty mode needs a grid")
        penalty = _NetworkPenalty(inst, cfg.penalty_step)
    epoch = cfg.prox == "epoch"
    if epoch:
        rho_p, rho_c = responder.curvature_weights(cfg.epoch_weight)
    else:
        rho_p = rho_c = None

    if warm_start is not None:
        x, y = np.array(warm_start.x), np.array(warm_start.y)
    else:
        x, y = np.zeros(n), np.zeros(n)
    anchor_x, anchor_y = x, y
    st = MarketState(1, lam0.copy(), lam0.copy(), lam0.copy(), 1.0, x, y)
    trace: list[IterationRecord] = []
    converged = False
    network_ok = True
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        st.k = k
        if epoch:
            ref_x, ref_y = anchor_x, anchor_y
        else:
            ref_x, ref_y = st.x, st.y
        if penalty is not None:
            cp, cc = penalty.charges()
            x = responder.producers(st.lam_hat - cp, ref_x, rho_p)
            y = responder.consumers(st.lam_hat - cc, ref_y, rho_c)
        else:
            x = responder.producers(st.lam_hat, ref_x, rho_p)
            y = responder.consumers(st.lam_hat, ref_y, rho_c)
        lam = price_update(st.lam_hat, eta, x, y)
        qv = dual(lam) if dual is not None else math.nan
        rec = IterationRecord(
            k=k,
            mismatch_inf=float(np.max(np.abs(x - y), initial=0.0)),
            welfare=_welfare(inst, x, y),
            dual_value=qv,
            dual_gap=qv - q_star if q_star is not None else math.nan,
            wall_time=time.perf_counter() - t0,
        )
        trace.append(rec)
        if callback is not None:
            callback(rec)
        if penalty is not None:
            network_ok = penalty.update(x, y) <= cfg.network_tol
        st.x, st.y = x, y
        st.lam = lam
        if stopping_check(x, y, cfg.epsilon) and network_ok:
            if not epoch:
                converged = True
                break
            moved = max(np.max(np.abs(x - anchor_x), initial=0.0),
                        np.max(np.abs(y - anchor_y), initial=0.0))
            if moved <= cfg.epsilon:
                converged = True
                break
            anchor_x, anchor_y = x, y
            st.epochs += 1
            st.k_momentum, st.gamma = 1, 1.0
            st.lam_prev = lam
            st.lam_hat = lam
            continue
        if cfg.accelerated:
            km = st.k_momentum
            gk1 = gamma_next(km, st.gamma)
            lam_hat = momentum_extrapolate(km, st.gamma, gk1, lam, st.lam_prev)
            st.gamma = gk1
            st.k_momentum = km + 1
        else:
            lam_hat = lam
        st.lam_prev = lam
        st.lam_hat = lam_hat

    alloc = Allocation(st.x, st.y)
    report = None
    if inst.grid is not None:
        report = gridmod.check_constraints(inst.grid, None, alloc, g)
    if not converged:
        log.warning("clearing did not converge in %d iterations (mismatch %.3g)",
                    cfg.max_iter, trace[-1].mismatch_inf)
    return ClearingResult(
        converged=converged,
        iterations=st.k,
        allocation=alloc,
        prices=st.lam,
        welfare=trace[-1].welfare,
        trace=trace,
        constraint_report=report,
        eta=eta,
        lambda0=lam0,
        config=cfg,
        network_ok=network_ok,
        edges=g.edges,
        epochs=st.epochs,
    )


TRACE_HEADER = ("k", "mismatch_inf", "welfare", "dual_value", "dual_gap", "wall_ms")


def write_trace_csv(result: ClearingResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in result.trace:
            w.writerow([r.k] + [f"{v:.9g}" for v in
                                (r.mismatch_inf, r.welfare, r.dual_value, r.dual_gap, r.wall_time * 1e3)])


def write_summary_json(result: ClearingResult, path, extra: Optional[dict] = None) -> None:
    data = result.summary()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
