import numpy as np
import pytest

from crosstask.flow import FlowNetwork, cut_capacity, max_flow
from oracles import brute_force_min_cut


def random_network(rng, n_internal):
    n = n_internal + 2
    net = FlowNetwork(n, 0, n - 1)
    n_edges = int(rng.integers(0, 4 * n))
    for _ in range(n_edges):
        u, v = rng.choice(n, 2, replace=False)
        cap = 0.0 if rng.random() < 0.1 else float(rng.exponential(3.0))
        rev = float(rng.exponential(1.0)) if rng.random() < 0.3 else 0.0
        net.add_edge(int(u), int(v), cap, rev)
    return net


def test_single_path():
    net = FlowNetwork(3, 0, 2)
    net.add_edge(0, 1, 3)
    net.add_edge(1, 2, 2)
    flow, side = max_flow(net)
    assert flow == 2
    assert side.tolist() == [True, True, False]


def test_two_disjoint_paths():
    net = FlowNetwork(4, 0, 3)
    net.add_edge(0, 1, 1)
    net.add_edge(1, 3, 1)
    net.add_edge(0, 2, 4)
    net.add_edge(2, 3, 4)
    assert max_flow(net).flow == 5 == brute_force_min_cut(net)


def test_zero_capacity():
    net = FlowNetwork(4, 0, 3)
    net.add_edges([0, 1, 2], [1, 2, 3], [0, 0, 0])
    flow, side = max_flow(net)
    assert flow == 0
    assert side.tolist() == [True, False, False, False]


def test_no_edges():
    flow, side = max_flow(FlowNetwork(2, 0, 1))
    assert flow == 0 and side.tolist() == [True, False]


@pytest.mark.parametrize("bad", [(-1.0,), (float("inf"),), (float("nan"),)])
def test_invalid_capacity(bad):
    net = FlowNetwork(2, 0, 1)
    with pytest.raises(ValueError):
        net.add_edge(0, 1, bad[0])


def test_source_equals_sink():
    with pytest.raises(ValueError):
        FlowNetwork(3, 1, 1)


@pytest.mark.parametrize("seed", range(60))
def test_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, int(rng.integers(0, 11)))
    flow, side = max_flow(net)
    assert flow == pytest.approx(brute_force_min_cut(net), abs=1e-9)
    assert side[net.source] and not side[net.sink]
    assert cut_capacity(net, side) == pytest.approx(flow, abs=1e-9)


def test_grid_duality():
    rng = np.random.default_rng(7)
    h, w = 30, 40
    n = h * w
    net = FlowNetwork(n + 2, n, n + 1)
    idx = np.arange(n).reshape(h, w)
    net.add_edges(idx[:, :-1], idx[:, 1:], rng.random((h, w - 1)), rng.random((h, w - 1)))
    net.add_edges(idx[:-1], idx[1:], rng.random((h - 1, w)), rng.random((h - 1, w)))
    net.add_edges(np.full(n, n), idx, rng.random(n) * 2)
    net.add_edges(idx, np.full(n, n + 1), rng.random(n) * 2)
    flow, side = max_flow(net)
    assert cut_capacity(net, side) == pytest.approx(flow, rel=1e-12)
