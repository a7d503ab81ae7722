import numpy as np
import pytest

from p2pmarket.clearing import ClearingConfig, run
from p2pmarket.experiments import (ScenarioError, ScenarioSpec, gen_instance, ieee15_spec,
                                   random_partner_mask, run_benchmark_sweep, run_compare, run_montecarlo,
                                   summarize_montecarlo, write_sweep_csv, write_trials_csv, TrialRecord)
from p2pmarket.model import TradingGraph
from p2pmarket.serialization import save_instance


def test_ieee15_template():
    inst = gen_instance(ieee15_spec(0))
    assert inst.n_agents == 14
    assert inst.graph.n_edges == 49
    grid = inst.grid
    assert grid.n_buses == 15
    assert grid.producer_bus == (1, 3, 4, 5, 9, 10, 11)
    assert grid.consumer_bus == (2, 6, 7, 8, 12, 13, 14)
    assert np.all(grid.v_min == 0.9) and np.all(grid.v_max == 1.1)
    assert np.all(grid.f_max == 60)


def test_ieee15_count_mismatch():
    with pytest.raises(ScenarioError):
        gen_instance(ScenarioSpec(n_p=6, n_c=7, grid="ieee15"))


def test_seeded_generation_is_reproducible(tmp_path):
    for name in ("a.json", "b.json"):
        save_instance(tmp_path / name, gen_instance(ieee15_spec(3)))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = gen_instance(ieee15_spec(4))
    assert other.producers != gen_instance(ieee15_spec(3)).producers


def test_generated_consumers_stay_on_concave_branch():
    inst = gen_instance(ScenarioSpec(n_p=5, n_c=30, seed=1))
    assert all(c.strongly_concave for c in inst.consumers)
    assert np.all((inst.graph.alpha >= 0) & (inst.graph.alpha < 1))


def test_large_instance_size():
    inst = gen_instance(ScenarioSpec(n_p=250, n_c=250, seed=0))
    assert inst.graph.n_edges == 62500


def test_chain_template_alternates():
    inst = gen_instance(ScenarioSpec(n_p=3, n_c=2, grid="chain"))
    assert inst.grid.n_buses == 6
    assert inst.grid.producer_bus == (1, 3, 5)
    assert inst.grid.consumer_bus == (2, 4)


def test_spec_digest_and_roundtrip():
    s = ieee15_spec(5)
    assert ScenarioSpec.from_dict(s.to_dict()) == s
    assert s.digest() == ieee15_spec(5).digest() != ieee15_spec(6).digest()


@pytest.mark.parametrize("kw", [dict(n_p=0), dict(a=(0.2, 0.1)), dict(grid="ring"), dict(knee_margin=(0.5, 1))])
def test_spec_validation(kw):
    with pytest.raises(ScenarioError):
        ScenarioSpec(**kw)


def test_compare_on_one_by_one(one_by_one):
    rep = run_compare(one_by_one, ("plain", "accelerated"))
    assert rep.row("accelerated").iterations <= rep.row("plain").iterations


def test_compare_methods_agree_without_selection(tmp_path):
    inst = gen_instance(ScenarioSpec(n_p=4, n_c=4, seed=2))
    rep = run_compare(inst)
    p, a, s = (rep.row(m) for m in ("plain", "accelerated", "accelerated+selection"))
    assert p.converged and a.converged and s.converged
    assert a.welfare == pytest.approx(p.welfare, rel=1e-3)
    assert s.edges < a.edges
    rep.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("method,converged,iterations")


def test_compare_needs_two_methods(one_by_one):
    with pytest.raises(ScenarioError):
        run_compare(one_by_one, ("plain",))
    with pytest.raises(ScenarioError):
        run_compare(one_by_one, ("plain", "admm"))


def test_random_partner_mask_nonempty_and_uniform():
    g = TradingGraph.complete(2, 1, [[0.1, 0.9]])
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(3000):
        m = tuple(random_partner_mask(g, rng))
        assert any(m)
        counts[m] = counts.get(m, 0) + 1
    assert len(counts) == 3
    assert all(abs(c / 3000 - 1 / 3) < 0.04 for c in counts.values())


def test_montecarlo_full_graph_trial_equals_unpruned(tmp_path):
    inst = gen_instance(ScenarioSpec(n_p=3, n_c=3, seed=1)).with_graph(TradingGraph.matched_pairs(3, [0.1, 0.5, 0.3]))
    recs = run_montecarlo(inst, 2, seed=0)
    full = run(inst, ClearingConfig(track_dual=False))
    assert all(r.pairs == 3 and r.welfare == pytest.approx(full.welfare) for r in recs)
    write_trials_csv(recs, tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3
    with pytest.raises(ScenarioError):
        run_montecarlo(inst, 0, seed=0)


def test_montecarlo_summary():
    recs = [TrialRecord(i, p, w, 10, True) for i, (p, w) in enumerate([(2, 1.0), (4, 3.0), (6, 5.0), (8, 4.0)])]
    s = summarize_montecarlo(recs, 5, 4.6)
    assert s.spearman == pytest.approx(0.8)
    assert s.trials_at_or_above == 2 and s.median_welfare_at_or_above == pytest.approx(4.5)
    assert s.selection_not_worse


def test_sweep_extremes(tmp_path):
    inst = gen_instance(ScenarioSpec(n_p=4, n_c=3, seed=0))
    rows = run_benchmark_sweep(inst, [-1.0, 1.0])
    full = run(inst, ClearingConfig(track_dual=False))
    assert rows[0].edges == 12 and rows[0].welfare == pytest.approx(full.welfare)
    assert rows[1].edges == 3
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "benchmark,edges,welfare,iterations,converged"


def test_energy_balance_at_convergence():
    inst = gen_instance(ieee15_spec(1))
    cfg = ClearingConfig(track_dual=False)
    res = run(inst, cfg)
    assert res.converged
    assert abs(res.allocation.x.sum() - res.allocation.y.sum()) <= cfg.epsilon * inst.graph.n_edges
