"""Centralized welfare maximization used as ground truth for the clearing engine.

The consensus constraint is eliminated by trading a single quantity
``z_e`` per edge.  The saturating utility is written with an auxiliary
variable ``u_j <= min(y_j, omega_j / delta_j)`` so the program is a convex
QP.  It is solved with cvxopt's interior-point QP solver and then polished
by re-solving the equality-constrained KKT system on the detected active
set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cvxopt import matrix, solvers

from . import grid as gridmod
from .model import Allocation, Instance, instance_welfare


class OracleError(RuntimeError):
    pass


@dataclass
class OracleSolution:
    allocation: Allocation
    welfare: float
    prices: np.ndarray
    kkt_residual: float
    bus_charges: Optional[np.ndarray] = None
    polished: bool = False

    @property
    def z(self) -> np.ndarray:
        return self.allocation.x

    def to_dict(self) -> dict:
        return {
            "welfare": self.welfare,
            "kkt_residual": self.kkt_residual,
            "polished": self.polished,
            "z": self.z.tolist(),
            "prices": self.prices.tolist(),
            "bus_charges": None if self.bus_charges is None else self.bus_charges.tolist(),
        }


class _Program:
    """Matrices of ``min 1/2 v'Qv + c'v  s.t.  Gv <= h, Av = b`` with ``v = [z, u]``."""

    def __init__(self, inst: Instance, with_network: bool):
        g = inst.graph
        E, n_p, n_c = g.n_edges, g.n_p, g.n_c
        self.E, self.n_c = E, n_c
        P = np.zeros((n_p, E))
        P[g.producer_of, np.arange(E)] = 1.0
        D = np.zeros((n_c, E))
        D[g.consumer_of, np.arange(E)] = 1.0
        self.P, self.D = P, D
        a = np.array([p.a for p in inst.producers])
        b = np.array([p.b for p in inst.producers])
        om = np.array([c.omega for c in inst.consumers])
        de = np.array([c.delta for c in inst.consumers])
        self.a, self.b, self.om, self.de = a, b, om, de
        n = E + n_c
        Q = np.zeros((n, n))
        Q[:E, :E] = P.T @ (a[:, None] * P)
        Q[E:, E:] = np.diag(de)
        c = np.concatenate([P.T @ b - g.alpha, -om])
        self.Q, self.c = Q, c
        self.const = sum(p.c for p in inst.producers)

        rows, rhs, tags = [], [], []
        eq_rows, eq_rhs, eq_tags = [], [], []

        def add(row, val, tag):
            rows.append(row)
            rhs.append(val)
            tags.append(tag)

        zpad = np.zeros(n_c)
        for e in range(E):
            r = np.zeros(n)
            r[e] = -1.0
            add(r, 0.0, ("z", e))
        for i, p in enumerate(inst.producers):
            row = np.concatenate([P[i], zpad])
            if not row.any():
                continue
            if p.fixed:
                eq_rows.append(row); eq_rhs.append(p.x_max); eq_tags.append(("xeq", i))
                continue
            if math.isfinite(p.x_max):
                add(row, p.x_max, ("xmax", i))
            if p.x_min > 0:
                add(-row, -p.x_min, ("xmin", i))
        for j, q in enumerate(inst.consumers):
            row = np.concatenate([D[j], zpad])
            if row.any():
                if q.inflexible:
                    eq_rows.append(row); eq_rhs.append(q.y_max); eq_tags.append(("yeq", j))
                else:
                    if math.isfinite(q.y_max):
                        add(row, q.y_max, ("ymax", j))
                    if q.y_min > 0:
                        add(-row, -q.y_min, ("ymin", j))
            r = np.zeros(n)
            r[E + j] = 1.0
            r[:E] = -D[j]
            add(r, 0.0, ("u", j))
            r = np.zeros(n)
            r[E + j] = 1.0
            add(r, om[j] / de[j], ("knee", j))
        self.net_rows = None
        if with_network:
            if inst.grid is None:
                raise OracleError("network constraints requested but the instance has no grid")
            grid = inst.grid
            gn, hn = gridmod.network_rows(grid)
            Bp = np.zeros((grid.n_buses, n_p))
            Bp[list(grid.producer_bus), np.arange(n_p)] = 1.0
            Bc = np.zeros((grid.n_buses, n_c))
            Bc[list(grid.consumer_bus), np.arange(n_c)] = 1.0
            inj = Bp @ P - Bc @ D  # bus injections per unit z
            self.net_G = gn
            first = len(rows)
            for k in range(len(hn)):
                add(np.concatenate([gn[k] @ inj, zpad]), hn[k], ("net", k))
            self.net_rows = slice(first, len(rows))
            self.inj = inj
        self.G = np.array(rows, dtype=float)
        self.h = np.array(rhs, dtype=float)
        self.tags = tags
        self.A, self.bvec, self.eq_tags = self._independent(eq_rows, eq_rhs, eq_tags, n)

    @staticmethod
    def _independent(rows, rhs, tags, n):
        keep_r, keep_b, keep_t = [], [], []
        for r, v, t in zip(rows, rhs, tags):
            trial = np.array(keep_r + [r])
            if np.linalg.matrix_rank(trial) == len(trial):
                keep_r.append(r); keep_b.append(v); keep_t.append(t)
            else:
                coef, *_ = np.linalg.lstsq(np.array(keep_r).T, r, rcond=None)
                if abs(coef @ np.array(keep_b) - v) > 1e-9 * (1 + abs(v)):
                    raise OracleError("inconsistent fixed generation/demand totals")
        if not keep_r:
            return np.zeros((0, n)), np.zeros(0), []
        return np.array(keep_r, dtype=float), np.array(keep_b, dtype=float), keep_t

    def objective(self, v) -> float:
        return 0.5 * v @ self.Q @ v + self.c @ v


def _ipm(prog: _Program, tol: float):
    opts = {"show_progress": False, "abstol": min(1e-9, tol), "reltol": min(1e-9, tol),
            "feastol": min(1e-9, tol), "maxiters": 200}
    args = [matrix(prog.Q), matrix(prog.c), matrix(prog.G), matrix(prog.h)]
    if prog.A.shape[0]:
        args += [matrix(prog.A), matrix(prog.bvec)]
    sol = solvers.qp(*args, options=opts)
    if sol["status"] not in ("optimal", "unknown"):
        raise OracleError(f"QP solver status: {sol['status']}")
    v = np.array(sol["x"]).ravel()
    mu = np.array(sol["z"]).ravel()
    nu = np.array(sol["y"]).ravel() if prog.A.shape[0] else np.zeros(0)
    return v, mu, nu, sol["status"]


def _kkt_solve(prog: _Program, active: np.ndarray):
    Aa = np.vstack([prog.A, prog.G[active]])
    ba = np.concatenate([prog.bvec, prog.h[active]])
    n, m = prog.Q.shape[0], Aa.shape[0]
    K = np.block([[prog.Q, Aa.T], [Aa, np.zeros((m, m))]])
    sol, *_ = np.linalg.lstsq(K, np.concatenate([-prog.c, ba]), rcond=None)
    mu = np.zeros(len(prog.h))
    mu[active] = sol[n + prog.A.shape[0]:]
    return sol[:n], mu, sol[n:n + prog.A.shape[0]]


def _polish(prog: _Program, v, act_tol: float = 1e-7, max_rounds: int = 100):
    """Active-set refinement started from the interior-point solution.

    Violated inequalities join the active set and the most negative
    multiplier leaves it, until the equality-constrained KKT solution is
    primal and dual feasible.  Returns None if that does not happen.
    """
    slack = prog.h - prog.G @ v
    active = slack <= act_tol * (1 + np.abs(prog.h))
    obj0 = prog.objective(v)
    for _ in range(max_rounds):
        v2, mu2, nu2 = _kkt_solve(prog, np.flatnonzero(active))
        viol = prog.G @ v2 - prog.h
        bad = (viol > 1e-10) & ~active
        if bad.any():
            active |= bad
            continue
        worst = int(np.argmin(np.where(active, mu2, np.inf)))
        if active.any() and mu2[worst] < -1e-10:
            active[worst] = False
            continue
        eqres = np.max(np.abs(prog.A @ v2 - prog.bvec), initial=0.0)
        stat = np.max(np.abs(prog.Q @ v2 + prog.c + prog.A.T @ nu2 + prog.G.T @ mu2), initial=0.0)
        if eqres <= 1e-10 and stat <= 1e-9 and prog.objective(v2) <= obj0 + 1e-10 * (1 + abs(obj0)):
            return v2, np.maximum(mu2, 0.0), nu2
        return None
    return None


def _prices(inst: Instance, prog: _Program, z, mu, nu):
    """Per-edge prices: each producer's marginal cost plus its bound and bus terms."""
    g = inst.graph
    xt = prog.P @ z
    adj = np.zeros(g.n_p)
    for k, (kind, i) in enumerate(prog.tags):
        if kind == "xmax":
            adj[i] += mu[k]
        elif kind == "xmin":
            adj[i] -= mu[k]
    for k, (kind, i) in enumerate(prog.eq_tags):
        if kind == "xeq":
            adj[i] += nu[k]
    charges = None
    kappa_p = np.zeros(g.n_p)
    if prog.net_rows is not None:
        charges = prog.net_G.T @ mu[prog.net_rows]
        kappa_p = charges[list(inst.grid.producer_bus)]
    price_i = prog.a * xt + prog.b + adj + kappa_p
    return price_i[g.producer_of], charges


def solve_centralized(inst: Instance, with_network: bool = False, tol: float = 1e-8) -> OracleSolution:
    """Maximize social welfare centrally; raises OracleError if ``tol`` is not met."""
    _check_bounds(inst)
    prog = _Program(inst, with_network)
    v, mu, nu, status = _ipm(prog, tol)
    polished = False
    pol = None
    for act_tol in (1e-7, 1e-5, 1e-3):
        pol = _polish(prog, v, act_tol)
        if pol is not None:
            break
    if pol is not None:
        v, mu, nu = pol
        polished = True
    z = np.maximum(v[:prog.E], 0.0)
    prices, charges = _prices(inst, prog, z, mu, nu)
    alloc = Allocation.consensus(z)
    res = kkt_residual(inst, alloc, prices, charges)
    if with_network:
        rep = gridmod.check_constraints(inst.grid, None, alloc, inst.graph, tol=1e-8)
        res = max(res, rep.voltage_violation, rep.flow_violation / inst.grid.f_max.max())
    scale = 1.0 + float(np.max(np.abs(prices), initial=0.0))
    if res > tol * scale * 10:
        raise OracleError(f"KKT residual {res:.3g} above tolerance (status {status})")
    return OracleSolution(alloc, instance_welfare(inst, alloc), prices, res, charges, polished)


def _check_bounds(inst: Instance) -> None:
    g = inst.graph
    for i, p in enumerate(inst.producers):
        if g.producer_ptr[i + 1] == g.producer_ptr[i] and p.x_min > 0:
            raise OracleError(f"producer {i} has no partners but x_min > 0")
    for j, c in enumerate(inst.consumers):
        if g.consumer_ptr[j + 1] == g.consumer_ptr[j] and c.y_min > 0:
            raise OracleError(f"consumer {j} has no partners but y_min > 0")
    if sum(p.x_min for p in inst.producers) > sum(c.y_max for c in inst.consumers):
        raise OracleError("total minimum generation exceeds total maximum demand")
    if sum(c.y_min for c in inst.consumers) > sum(p.x_max for p in inst.producers):
        raise OracleError("total minimum demand exceeds total maximum generation")


def _clip_to_cone(grad, at_lo, at_hi):
    lo = np.where(at_lo, -np.inf, 0.0)
    hi = np.where(at_hi, np.inf, 0.0)
    return np.clip(grad, lo, hi)


def kkt_residual(inst: Instance, alloc: Allocation, prices, bus_charges=None, tol: float = 1e-9) -> float:
    """Largest optimality violation of an allocation with per-edge prices as dual certificate.

    Covers primal feasibility (consensus, bounds, signs), each agent's
    stationarity in its total, and per-edge reduced-gradient sign and
    complementarity.  ``bus_charges`` adds the network multipliers'
    per-bus price terms.
    """
    g = inst.graph
    x, y = alloc.x, alloc.y
    prices = g.check_edge_vector(prices, "prices")
    P, C = inst.producers, inst.consumers
    xt, yt = g.producer_totals(x), g.consumer_totals(y)
    xmin = np.array([p.x_min for p in P]); xmax = np.array([p.x_max for p in P])
    ymin = np.array([c.y_min for c in C]); ymax = np.array([c.y_max for c in C])
    a = np.array([p.a for p in P]); b = np.array([p.b for p in P])
    om = np.array([c.omega for c in C]); de = np.array([c.delta for c in C])

    primal = max(
        float(np.max(np.abs(x - y), initial=0.0)),
        float(np.max(np.concatenate([xmin - xt, xt - xmax, ymin - yt, yt - ymax]), initial=0.0)),
    )
    kp = np.zeros(g.n_p)
    kc = np.zeros(g.n_c)
    if bus_charges is not None:
        bus_charges = np.asarray(bus_charges, dtype=float)
        kp = bus_charges[list(inst.grid.producer_bus)]
        kc = bus_charges[list(inst.grid.consumer_bus)]

    mc = a * xt + b
    mu_ = np.maximum(om - de * yt, 0.0)
    p_eff = prices - kp[g.producer_of]
    pmax = np.full(g.n_p, -np.inf)
    np.maximum.at(pmax, g.producer_of, p_eff)
    c_eff = prices - kc[g.consumer_of] - g.alpha
    cmin = np.full(g.n_c, np.inf)
    np.minimum.at(cmin, g.consumer_of, c_eff)
    has_p = np.isfinite(pmax)
    has_c = np.isfinite(cmin)

    gp = np.where(has_p, pmax - mc, 0.0)
    nu = _clip_to_cone(gp, xt <= xmin + tol * (1 + xmin), xt >= xmax - tol * (1 + np.abs(xmax)))
    gc = np.where(has_c, mu_ - cmin, 0.0)
    mu = _clip_to_cone(gc, yt <= ymin + tol * (1 + ymin), yt >= ymax - tol * (1 + np.abs(ymax)))
    stat = max(float(np.max(np.abs(gp - nu), initial=0.0)), float(np.max(np.abs(gc - mu), initial=0.0)))

    i, j = g.producer_of, g.consumer_of
    r = (mu_[j] - mu[j]) + g.alpha - (mc[i] + nu[i]) - kp[i] + kc[j]
    z = 0.5 * (x + y)
    edge = max(float(np.max(r, initial=0.0)), float(np.max(z * np.maximum(-r, 0.0), initial=0.0)))
    return max(primal, stat, edge)


def theoretical_bound(kind: str, k: int, eta, lambda0, lambda_star) -> float:
    """Dual-gap bound after ``k`` rounds: ``2 d^2/(eta k^2)`` (accelerated) or ``d^2/(2 eta k)`` (plain)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("step sizes must be positive")
    d2 = (np.asarray(lambda0, dtype=float) - np.asarray(lambda_star, dtype=float)) ** 2
    if kind == "accelerated":
        return float(np.sum(2.0 * d2 / (eta * k * k)))
    if kind == "plain":
        return float(np.sum(d2 / (2.0 * eta * k)))
    raise ValueError(f"unknown bound kind {kind!r}")
