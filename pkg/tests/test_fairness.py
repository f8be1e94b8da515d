import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from overlaycc.fairness import FairnessError, fairness_index, is_feasible, maxmin_qp, maxmin_waterfill
from overlaycc.network import TOY_BOTTLENECK, build_toy_topology, cells_to_kbps, network_from_lists

from oracles import violates_maxmin


def _rates(res):
    return [res.rates[k] for k in sorted(res.rates)]


@pytest.mark.parametrize("engine", [maxmin_qp, maxmin_waterfill])
def test_toy_equal_share(engine):
    res = engine(build_toy_topology(2))
    for v in res.rates.values():
        assert cells_to_kbps(v) == pytest.approx(136.7, abs=0.05)
    assert set(res.bottleneck_of.values()) == {TOY_BOTTLENECK}


@pytest.mark.parametrize("engine", [maxmin_qp, maxmin_waterfill])
def test_disjoint_circuits_get_their_own_bottleneck(engine):
    net = network_from_lists([(0, 100, 100), (1, 30, 30)], [[0], [1]])
    assert _rates(engine(net)) == pytest.approx([100, 30], abs=1e-5)


@pytest.mark.parametrize("engine", [maxmin_qp, maxmin_waterfill])
def test_y_topology(engine):
    # circuit 2 is held to 30 elsewhere, circuit 1 takes the rest of relay 0
    net = network_from_lists([(0, 100, 100), (1, 30, 30), (2, 500, 500)], [[0, 2], [0, 1]])
    assert _rates(engine(net)) == pytest.approx([70, 30], abs=1e-5)


@pytest.mark.parametrize("engine", [maxmin_qp, maxmin_waterfill])
def test_single_circuit_gets_min_capacity(engine):
    net = network_from_lists([(0, 80, 90), (1, 70, 200), (2, 300, 300)], [[0, 1, 2]])
    assert _rates(engine(net)) == pytest.approx([70], abs=1e-5)


@pytest.mark.parametrize("r_max", [1.0, 1.5, 2.0])
def test_qp_on_line_departs_from_maxmin(r_max):
    # relays A, B of capacity 1; paths (A), (A, B), (B)
    net = network_from_lists([(0, 1, 1), (1, 1, 1)], [[0], [0, 1], [1]])
    mid = (2 - r_max) / 3
    assert _rates(maxmin_qp(net, r_max=r_max)) == pytest.approx([1 - mid, mid, 1 - mid], abs=1e-6)
    assert _rates(maxmin_waterfill(net)) == pytest.approx([0.5, 0.5, 0.5])


@pytest.mark.parametrize("r_max", [2000.0, 3000.0, 50000.0])
def test_single_bottleneck_is_r_max_invariant(r_max):
    net = build_toy_topology(2)
    a = maxmin_qp(net, r_max=r_max)
    b = maxmin_waterfill(net)
    assert _rates(a) == pytest.approx(_rates(b), rel=1e-6)


def test_r_max_below_capacity_rejected():
    with pytest.raises(FairnessError):
        maxmin_qp(build_toy_topology(2), r_max=10.0)


def _random_net(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    nodes = [(i, float(rng.uniform(10, 100)), float(rng.uniform(10, 100))) for i in range(n)]
    paths = [list(rng.choice(n, size=int(rng.integers(1, min(n, 3) + 1)), replace=False))
             for _ in range(int(rng.integers(1, 9)))]
    return nodes, paths


@given(st.integers(0, 10 ** 6))
def test_waterfill_is_maxmin(seed):
    nodes, paths = _random_net(seed)
    net = network_from_lists(nodes, paths)
    res = maxmin_waterfill(net)
    rates = _rates(res)
    caps = {i: min(a, b) for i, a, b in nodes}
    assert is_feasible(net, res.rates)
    assert not violates_maxmin(rates, paths, caps)
    # every circuit crosses a saturated relay
    for c in net.circuits:
        a = res.bottleneck_of[c.id]
        assert a in c.path
        load = sum(res.rates[i] for i in net.circuits_through(a))
        assert load == pytest.approx(caps[a], rel=1e-9)


@given(st.integers(0, 10 ** 6))
def test_qp_rates_feasible_and_pareto(seed):
    nodes, paths = _random_net(seed)
    net = network_from_lists(nodes, paths)
    res = maxmin_qp(net)
    assert is_feasible(net, res.rates, tol=1e-6)
    # no circuit can be raised alone: every path has a saturated relay
    caps = {i: min(a, b) for i, a, b in nodes}
    for c in net.circuits:
        slack = min(caps[a] - sum(res.rates[i] for i in net.circuits_through(a)) for a in c.path)
        assert slack <= 1e-5 * max(caps.values())


def test_demand_caps():
    net = build_toy_topology(2)
    full = maxmin_waterfill(net).rates[1]
    dem = {1: 50.0}
    for engine in (maxmin_qp, maxmin_waterfill):
        res = engine(net, demand=dem)
        assert res.rates[1] == pytest.approx(50.0, abs=1e-4)
        assert res.bottleneck_of[1] is None
        assert res.rates[2] == pytest.approx((3 * full - 50) / 2, abs=1e-4)


def test_fairness_index_examples():
    fair = {1: 100.0, 2: 100.0}
    assert fairness_index(fair, fair) == 1.0
    assert fairness_index({1: 150.0, 2: 50.0}, fair) == pytest.approx(0.5)
    assert fairness_index({1: 0.0, 2: 0.0}, fair) == 0.0
    # three circuits, one starved
    assert fairness_index({1: 200.0, 2: 100.0, 3: 0.0}, {1: 100.0, 2: 100.0, 3: 100.0}) == pytest.approx(1 / 3)
    with pytest.raises(FairnessError):
        fairness_index({1: 1.0}, {2: 1.0})
    with pytest.raises(FairnessError):
        fairness_index({1: 1.0}, {1: 0.0})


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=6), st.randoms())
def test_fairness_index_permutation_symmetric(obs, rnd):
    fair = {i: 10.0 + i for i in range(len(obs))}
    o = dict(enumerate(obs))
    perm = list(range(len(obs)))
    rnd.shuffle(perm)
    fp = {perm[i]: fair[i] for i in fair}
    op = {perm[i]: o[i] for i in o}
    assert fairness_index(op, fp) == pytest.approx(fairness_index(o, fair))
    assert fairness_index(o, fair) <= 1.0
