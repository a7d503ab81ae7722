import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from p2pmarket.model import ConsumerParams, Instance, ProducerParams, TradingGraph

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def one_by_one():
    """a=1, b=1 producer on [0, 10] facing an omega=10, delta=2 consumer on [0, 5]."""
    return Instance([ProducerParams(1, 1, 0, 0, 10)], [ConsumerParams(10, 2, 0, 5)],
                    TradingGraph.complete(1, 1, [[0.0]]))


def random_instance(seed, n_p, n_c, complete=True):
    """Small random market drawn independently of the package generator."""
    r = np.random.default_rng(seed)
    prods = [ProducerParams(r.uniform(0.05, 0.5), r.uniform(1, 4), 0, 0, r.uniform(5, 30)) for _ in range(n_p)]
    cons = []
    for _ in range(n_c):
        om, ym = r.uniform(5, 12), r.uniform(5, 30)
        cons.append(ConsumerParams(om, om / (ym * r.uniform(1, 1.5)), 0, ym))
    alpha = r.uniform(0, 1, (n_c, n_p))
    g = TradingGraph.complete(n_p, n_c, alpha)
    if not complete:
        keep = r.random(g.n_edges) < 0.6
        for j in range(n_c):  # every consumer keeps at least one edge
            e = g.consumer_edges(j)
            if not keep[e].any():
                keep[e[0]] = True
        g = g.subgraph(keep)
    return Instance(prods, cons, g)


_ACCEPTANCE: dict = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
