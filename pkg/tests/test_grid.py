import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2pmarket.grid import (GridError, GridModel, Line, build_sensitivities, bus_injections, bus_voltages,
                            chain_grid, check_constraints, line_flows, network_rows)
from p2pmarket.model import Allocation, TradingGraph


def random_tree(seed, n):
    r = np.random.default_rng(seed)
    lines = []
    for b in range(1, n):
        lines.append(Line(int(r.integers(0, b)), b, float(r.uniform(1e-3, 1e-2)), 0.0, 50.0))
    r.shuffle(lines)
    return GridModel(n, tuple(lines), 0.9, 1.1, (), ())


def path_lines(grid, bus):
    """Lines between ``bus`` and the slack found by walking edges, independent of the model's tree."""
    adj = {}
    for k, ln in enumerate(grid.lines):
        adj.setdefault(ln.from_bus, []).append((ln.to_bus, k))
        adj.setdefault(ln.to_bus, []).append((ln.from_bus, k))
    stack = [(0, [])]
    seen = {0}
    while stack:
        u, path = stack.pop()
        if u == bus:
            return set(path)
        for v, k in adj.get(u, []):
            if v not in seen:
                seen.add(v)
                stack.append((v, path + [k]))
    raise AssertionError("unreachable")


@pytest.mark.parametrize("seed", range(8))
def test_voltage_sensitivity_is_shared_path_resistance(seed):
    grid = random_tree(seed, 9)
    sens = build_sensitivities(grid)
    r = grid.r
    for a in range(grid.n_buses):
        for b in range(grid.n_buses):
            shared = path_lines(grid, a) & path_lines(grid, b) if a and b else set()
            assert sens.s_v[a, b] == pytest.approx(sum(r[k] for k in shared), abs=1e-15)


@pytest.mark.parametrize("seed", range(8))
def test_flows_are_downstream_sums(seed):
    grid = random_tree(seed, 9)
    sens = build_sensitivities(grid)
    p = np.random.default_rng(seed).normal(size=grid.n_buses)
    f = line_flows(sens, p)
    for k in range(len(grid.lines)):
        below = [b for b in range(1, grid.n_buses) if k in path_lines(grid, b)]
        assert f[k] == pytest.approx(p[below].sum())


@given(seed=st.integers(0, 1000), s=st.floats(-3, 3))
def test_superposition(seed, s):
    grid = random_tree(seed, 7)
    sens = build_sensitivities(grid)
    r = np.random.default_rng(seed)
    p, q = r.normal(size=7), r.normal(size=7)
    dv = lambda x: bus_voltages(sens, x) - 1
    assert np.allclose(dv(p + s * q), dv(p) + s * dv(q), atol=1e-12)
    assert np.allclose(line_flows(sens, p + s * q), line_flows(sens, p) + s * line_flows(sens, q))


def test_slack_voltage_fixed():
    grid = random_tree(0, 6)
    v = bus_voltages(build_sensitivities(grid), np.ones(6) * 10)
    assert v[0] == 1.0


def test_injection_raises_voltage_on_chain():
    grid = chain_grid(4, 0.01, 100, (3,), (1,))
    g = TradingGraph.matched_pairs(1)
    rep = check_constraints(grid, None, Allocation.consensus([20.0]), g)
    # 20 kW travels from bus 3 to bus 1 over lines 1-2 and 2-3
    assert rep.injections.tolist() == [0.0, -20.0, 0.0, 20.0]
    assert rep.flows.tolist() == pytest.approx([0.0, 20.0, 20.0])
    assert rep.voltages[3] > rep.voltages[2] > rep.voltages[1] > 1.0 - 1e-12
    assert rep.ok


def test_violations_reported():
    grid = chain_grid(3, 0.05, 10, (2,), (1,), v_min=0.95, v_max=1.01)
    g = TradingGraph.matched_pairs(1)
    rep = check_constraints(grid, None, Allocation.consensus([30.0]), g)
    assert not rep.flow_ok
    assert rep.flow_violation == pytest.approx(20.0)
    # bus 2: 1 + 0.3 * (0.10 - 0.05) = 1.015 against a 1.01 limit
    assert rep.voltages[2] == pytest.approx(1.015)
    assert not rep.voltage_ok
    assert rep.voltage_violation == pytest.approx(0.005)
    d = rep.to_dict()
    assert d["ok"] is False and len(d["flows_kw"]) == 2


def test_network_rows_match_report():
    grid = chain_grid(5, 0.02, 15, (1, 4), (2, 3))
    sens = build_sensitivities(grid)
    G, h = network_rows(grid, sens)
    p = np.array([0, 12.0, -3.0, -25.0, 16.0])
    rep_v = bus_voltages(sens, p, grid.base_kw)
    rep_f = line_flows(sens, p)
    slack = G @ p - h
    n = grid.n_buses - 1
    assert np.allclose(slack[:n], rep_v[1:] - grid.v_max[1:])
    assert np.allclose(slack[n:2 * n], grid.v_min[1:] - rep_v[1:])
    m = len(grid.lines)
    assert np.allclose(slack[2 * n:2 * n + m], rep_f / grid.f_max - 1)


def test_bus_injections_needs_full_assignment():
    grid = chain_grid(3, 0.01, 10, (1,), ())
    with pytest.raises(GridError):
        bus_injections(grid, TradingGraph.matched_pairs(1), Allocation.consensus([1.0]))


@pytest.mark.parametrize("make", [
    lambda: GridModel(3, (Line(0, 1, 0.1, 0, 1),), 0.9, 1.1, (), ()),                       # too few lines
    lambda: GridModel(3, (Line(0, 1, 0.1, 0, 1), Line(0, 1, 0.1, 0, 1)), 0.9, 1.1, (), ()),  # not a tree
    lambda: GridModel(2, (Line(0, 1, 0.1, 0, 1),), 0.9, 1.1, (0,), ()),                      # slack host
    lambda: GridModel(2, (Line(0, 1, 0.1, 0, 1),), 0.9, 1.1, (1,), (1,)),                    # shared bus
    lambda: GridModel(2, (Line(0, 1, 0.1, 0, 1),), 1.1, 0.9, (), ()),                        # limits
    lambda: Line(0, 1, 0.1, 0, 0),
    lambda: Line(0, 1, -0.1, 0, 1),
])
def test_grid_validation(make):
    with pytest.raises(GridError):
        make()


def test_root_path_and_order():
    grid = chain_grid(4, 0.01, 10, (), ())
    assert grid.root_path(3) == [2, 1, 0]
    assert grid.bfs_order.tolist() == [0, 1, 2, 3]
    assert grid.parent.tolist() == [-1, 0, 1, 2]


def test_two_bus_voltage_examples():
    grid = chain_grid(2, 0.01, 200, (), ())
    sens = build_sensitivities(grid)
    assert bus_voltages(sens, [0.0, 100.0], 100.0)[1] == pytest.approx(1.01)
    assert bus_voltages(sens, [0.0, -100.0], 100.0)[1] == pytest.approx(0.99)


def test_chain_flow_example():
    grid = chain_grid(3, 0.01, 10, (), ())
    f = line_flows(build_sensitivities(grid), [0.0, -0.5, 0.2])
    assert f[0] == pytest.approx(-0.3)


def test_flow_exactly_at_limit_is_ok():
    grid = chain_grid(3, 0.001, 60, (2,), (1,))
    rep = check_constraints(grid, None, Allocation.consensus([60.0]), TradingGraph.matched_pairs(1))
    assert rep.flows[1] == 60.0
    assert rep.flow_ok


@given(seed=st.integers(0, 1000))
def test_flow_conservation(seed):
    grid = random_tree(seed, 8)
    sens = build_sensitivities(grid)
    p = np.random.default_rng(seed).normal(size=8)
    f = line_flows(sens, p)
    for k in range(len(grid.lines)):
        lower = grid.child_of_line[k]
        children = [grid.line_into[b] for b in range(1, 8) if grid.parent[b] == lower]
        assert f[k] == pytest.approx(p[lower] + sum(f[c] for c in children))
