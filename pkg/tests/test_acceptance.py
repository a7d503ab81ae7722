"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines appear in
the "acceptance criteria" section of the terminal summary.
"""

import math
import sys
from dataclasses import replace

import numpy as np
import pytest

from p2pmarket.clearing import ClearingConfig, dual_value, gamma_next, run
from p2pmarket.experiments import (ScenarioSpec, gen_instance, ieee15_spec, run_benchmark_sweep, run_montecarlo,
                                   summarize_montecarlo)
from p2pmarket.model import ConsumerParams, ProducerParams, TradingGraph
from p2pmarket.oracle import solve_centralized, theoretical_bound
from p2pmarket.selection import SelectionConfig, apply_selection, normalize_coefficients, select_partners
from p2pmarket.subproblem import BestResponseConfig, consumer_best_response, producer_best_response

from conftest import record_acceptance

pytestmark = pytest.mark.slow

EPS = 1e-3
# Configuration named by criteria 1 and 4: proximal weight 1e-3 on the previous response.
# Its mismatch plateaus near 40 kWh with no decay, so 2000 rounds are enough to tell.
LITERAL = ClearingConfig(prox="previous", rho=1e-3, epsilon=EPS, max_iter=2000, track_dual=False)
DEFAULT = ClearingConfig(epsilon=EPS, track_dual=False)

_converged_runs = []  # (label, instance, result) for criterion 8


def _note(label, inst, res):
    if res.converged:
        _converged_runs.append((label, inst, res))


def criterion1_instances():
    out = []
    for s in range(50):
        r = np.random.default_rng(10_000 + s)
        n_p, n_c = (int(v) for v in r.integers(1, 11, size=2))
        out.append(gen_instance(ScenarioSpec(n_p=n_p, n_c=n_c, seed=s)))
    return out


@pytest.fixture(scope="module")
def c1_runs():
    rows = []
    for k, inst in enumerate(criterion1_instances()):
        ref = solve_centralized(inst).welfare
        runs = {}
        for name, cfg in (("literal", LITERAL), ("default", DEFAULT)):
            for acc in (True, False):
                res = run(inst, replace(cfg, accelerated=acc))
                _note(f"c1-{k}-{name}-{acc}", inst, res)
                runs[name, acc] = res
        rows.append((inst, ref, runs))
    return rows


def _c1_ok(res, ref):
    return res.converged and res.mismatch_inf <= EPS and abs(res.welfare - ref) <= 5e-3 * abs(ref)


def test_criterion_1_oracle_equivalence(c1_runs):
    ok = [_c1_ok(r[("literal", True)], ref) for _, ref, r in c1_runs]
    conv = sum(r[("literal", True)].converged for _, _, r in c1_runs)
    dflt = sum(_c1_ok(r[("default", True)], ref) for _, ref, r in c1_runs)
    record_acceptance(1, "oracle equivalence", all(ok),
                      f"rho=1e-3 on previous response: {sum(ok)}/50 within 0.5% ({conv} converged in "
                      f"{LITERAL.max_iter} rounds); default epoch prox: {dflt}/50")
    assert all(ok)


def test_criterion_4_acceleration_ordering(c1_runs):
    def ordered(r):
        a, p = r
        return a.converged and (not p.converged or a.iterations <= p.iterations)

    lit = [ordered((r[("literal", True)], r[("literal", False)])) for _, _, r in c1_runs]
    dflt = [ordered((r[("default", True)], r[("default", False)])) for _, _, r in c1_runs]
    record_acceptance(4, "acceleration ordering", all(lit),
                      f"rho=1e-3 on previous response: {sum(lit)}/50 ordered; default epoch prox: {sum(dflt)}/50")
    assert all(lit)


def matched_instances():
    out = []
    for s in range(20):
        r = np.random.default_rng(20_000 + s)
        n = int(r.integers(1, 8))
        base = gen_instance(ScenarioSpec(n_p=n, n_c=n, seed=100 + s))
        out.append(base.with_graph(TradingGraph.matched_pairs(n, r.uniform(0, 1, n))))
    return out


@pytest.fixture(scope="module")
def bound_runs():
    rows = []
    for inst in matched_instances():
        sol = solve_centralized(inst)
        q_star = dual_value(inst, sol.prices)
        per = {}
        for acc in (True, False):
            cfg = ClearingConfig(prox="previous", rho=0.0, epsilon=1e-300, max_iter=2000, accelerated=acc)
            res = run(inst, cfg, q_star=q_star)
            _note(f"bound-{acc}", inst, res)
            per[acc] = res
        rows.append((inst, sol, q_star, per))
    return rows


def _bound_check(bound_runs, accelerated):
    worst = -math.inf
    for _, sol, q_star, per in bound_runs:
        res = per[accelerated]
        gaps = [t.dual_gap for t in res.trace]
        gaps += [gaps[-1]] * (2000 - len(gaps))  # an exact stop leaves the iterate fixed
        for k, gap in enumerate(gaps, start=1):
            b = theoretical_bound("accelerated" if accelerated else "plain", k, res.eta, res.lambda0, sol.prices)
            worst = max(worst, gap - b)
    return worst


def test_criterion_2_accelerated_bound(bound_runs):
    worst = _bound_check(bound_runs, True)
    record_acceptance(2, "accelerated dual bound", worst <= 1e-7, f"max(gap - bound) = {worst:.3g} over k <= 2000")
    assert worst <= 1e-7


def test_criterion_3_plain_bound(bound_runs):
    worst = _bound_check(bound_runs, False)
    record_acceptance(3, "plain dual bound", worst <= 1e-7, f"max(gap - bound) = {worst:.3g} over k <= 2000")
    assert worst <= 1e-7


def test_criterion_5_gamma_sequence():
    g, worst_lb, worst_id = 1.0, math.inf, 0.0
    for k in range(1, 100_000):
        worst_lb = min(worst_lb, g / (k * k / 2))
        g1 = gamma_next(k, g)
        lhs = (g1 / (k + 1)) ** 2 - g1 / (k + 1)
        worst_id = max(worst_id, abs(lhs - (g / k) ** 2) / (g / k) ** 2)
        g = g1
    worst_lb = min(worst_lb, g / (100_000 ** 2 / 2))
    ok = worst_lb >= 1 and worst_id <= 1e-9
    record_acceptance(5, "momentum sequence", ok,
                      f"min gamma/(k^2/2) = {worst_lb:.6f}, max identity rel. error = {worst_id:.2e}")
    assert ok


def test_criterion_6_selection_reproduction():
    row = [0.54, 0.71, 0.60, 0.54, 0.42, 0.64, 0.43]
    kept = {int(i) + 1 for i in select_partners(normalize_coefficients(row), 0.0)}
    via_graph = apply_selection(TradingGraph.complete(7, 1, [row]), SelectionConfig(0.0)).graph
    kept_graph = {i + 1 for i in via_graph.consumer_neighbors(0)}
    ok = kept == kept_graph == {2, 3, 6}
    record_acceptance(6, "selection reproduction", ok, f"kept producers {sorted(kept)}")
    assert ok


@pytest.fixture(scope="module")
def ieee15():
    return gen_instance(ieee15_spec(0))


def test_criterion_7_benchmark_plateau(ieee15):
    rows = run_benchmark_sweep(ieee15, [-1.0, 0.0], DEFAULT)
    full, cut = rows
    rel = (full.welfare - cut.welfare) / abs(full.welfare)
    ok = full.converged and cut.converged and abs(rel) <= 0.01 and cut.edges < full.edges
    record_acceptance(7, "benchmark plateau", ok,
                      f"edges {full.edges} -> {cut.edges}, welfare {full.welfare:.3f} -> {cut.welfare:.3f} "
                      f"({100 * rel:.2f}% lower)")
    assert ok


def test_criterion_8_balance_and_feasibility(ieee15, c1_runs, bound_runs):
    res = run(ieee15, DEFAULT)
    _note("ieee15", ieee15, res)
    bad = []
    for label, inst, r in _converged_runs:
        x, y = r.allocation.x, r.allocation.y
        if np.max(np.abs(x - y), initial=0) > EPS or abs(x.sum() - y.sum()) > EPS * inst.graph.n_edges:
            bad.append(label)
    rep = res.constraint_report
    grid_ok = (res.converged and bool(np.all(rep.voltages >= 0.9)) and bool(np.all(rep.voltages <= 1.1))
               and bool(np.all(np.abs(rep.flows) <= 60.0)))
    ok = not bad and grid_ok
    record_acceptance(8, "balance and feasibility", ok,
                      f"{len(_converged_runs) - len(bad)}/{len(_converged_runs)} converged runs balanced; ieee15 "
                      f"V in [{rep.voltages.min():.4f}, {rep.voltages.max():.4f}], max |F| {np.abs(rep.flows).max():.2f} kW")
    assert ok


def _lattice_max(gain, curve, hi, t_min, t_max, prev, rho, n=200):
    d = len(gain)
    axis = np.linspace(0, hi, n)
    rest = np.stack(np.meshgrid(*([axis] * (d - 1)), indexing="ij"), -1).reshape(-1, d - 1) if d > 1 else np.zeros((1, 0))
    best = -math.inf
    for w0 in axis:
        pts = np.column_stack([np.full(len(rest), w0), rest])
        t = pts.sum(1)
        ok = (t >= t_min - 1e-12) & (t <= t_max + 1e-12)
        if not ok.any():
            continue
        pts, t = pts[ok], t[ok]
        v = pts @ gain - curve(t) - 0.5 * rho * ((pts - prev) ** 2).sum(1)
        best = max(best, float(v.max()))
    return best


def test_criterion_9_best_response_brute_force():
    rng = np.random.default_rng(9)
    worst = -math.inf
    for call in range(500):
        d = int(rng.integers(1, 4))
        prev = rng.uniform(0, 3, d)
        rho = float(rng.choice([0.0, 1e-3, 0.1, 1.0]))
        hi = float(rng.uniform(2, 8))
        lo = float(rng.choice([0.0, 0.5]))
        cfg = BestResponseConfig(rho)
        if call % 2:
            p = ProducerParams(rng.uniform(0.2, 2), rng.uniform(0.5, 3), 0, lo, hi)
            lam = rng.uniform(0, 8, d)
            w = producer_best_response(p, lam, prev, cfg)
            got = lam @ w - (0.5 * p.a * w.sum() ** 2 + p.b * w.sum()) - 0.5 * rho * ((w - prev) ** 2).sum()
            best = _lattice_max(lam, lambda t: 0.5 * p.a * t * t + p.b * t, hi, lo, hi, prev, rho)
        else:
            c = ConsumerParams(rng.uniform(4, 10), rng.uniform(0.5, 3), lo, hi)
            lam, alpha = rng.uniform(0, 8, d), rng.uniform(-1, 1, d)
            w = consumer_best_response(c, lam, alpha, prev, cfg)

            def neg_u(t, c=c):
                tc = np.minimum(t, c.omega / c.delta)
                return -(c.omega * tc - 0.5 * c.delta * tc * tc)

            got = -neg_u(np.array([w.sum()]))[0] + (alpha - lam) @ w - 0.5 * rho * ((w - prev) ** 2).sum()
            best = _lattice_max(alpha - lam, neg_u, hi, lo, hi, prev, rho)
        worst = max(worst, best - got)
    ok = worst <= 1e-8
    record_acceptance(9, "best-response brute force", ok, f"max(lattice - returned) = {worst:.3g} over 500 calls")
    assert ok


def test_criterion_10_montecarlo_trend():
    inst = gen_instance(ScenarioSpec(n_p=10, n_c=10, seed=0))
    recs = run_montecarlo(inst, 200, seed=0, cfg=DEFAULT)
    sel = inst.with_graph(apply_selection(inst.graph, SelectionConfig(0.0)).graph)
    res = run(sel, DEFAULT)
    s = summarize_montecarlo(recs, sel.graph.n_edges, res.welfare)
    ok = s.spearman > 0 and s.median_welfare_at_or_above is not None and s.selection_not_worse and res.converged
    med = s.median_welfare_at_or_above
    record_acceptance(10, "Monte Carlo trend", ok,
                      f"Spearman {s.spearman:.3f}; selection {s.selection_welfare:.2f} at {s.selection_pairs} pairs vs "
                      f"median {med if med is None else round(med, 2)} over {s.trials_at_or_above} trials")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
