"""Spectral cut and flood-fill expansion: fixture from the three-cluster
21-node graph, arithmetic checks for the overlap ratio, and the coverage,
soundness, monotonicity and termination properties on random graphs."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from adasfm.config import PartitionConfig
from adasfm.geometry import Camera
from adasfm.partition import (
    PartitionSet,
    expand_partitions,
    graph_cut,
    induced_subgraphs,
    overlap_ratio,
    partition_view_graph,
)
from adasfm.scene import TwoViewEdge, ViewGraph

CAM = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)


def _graph(n, weighted_edges):
    edges = {}
    for i, j, w in weighted_edges:
        i, j = (i, j) if i < j else (j, i)
        edges[(i, j)] = TwoViewEdge(
            i, j, np.eye(3), np.array([1.0, 0.0, 0.0]), np.zeros((0, 2)), int(w)
        )
    return ViewGraph({v: CAM for v in range(n)}, edges)


def _fig_fixture():
    """Three 7-node clusters with six weighted bridges between them."""
    p1 = frozenset({0, 1, 2, 3, 4, 7, 8})
    p2 = frozenset({5, 6, 9, 10, 11, 16, 17})
    p3 = frozenset({12, 13, 14, 15, 18, 19, 20})
    intra = [
        (0, 1), (1, 2), (2, 3), (3, 4), (4, 7), (7, 8),
        (5, 6), (6, 9), (9, 10), (10, 11), (11, 16), (16, 17),
        (12, 13), (13, 14), (14, 15), (15, 18), (18, 19), (19, 20),
    ]
    cross = [(7, 9, 60), (8, 9, 50), (8, 20, 40), (17, 18, 30), (16, 19, 20), (3, 20, 10)]
    g = _graph(21, [(i, j, 100) for i, j in intra] + cross)
    return g, (p1, p2, p3)


def test_fixture_separator_layers():
    g, cut = _fig_fixture()
    pset = expand_partitions(g, cut, 0.3)
    assert pset.separators[0] == (
        frozenset({3, 7, 8}),
        frozenset({9, 16, 17}),
        frozenset({18, 19, 20}),
    )
    assert pset.separators[1] == (
        frozenset({9, 20}),
        frozenset({8, 18}),
        frozenset({8, 16}),
    )


def test_fixture_growth_past_target():
    # one pass over the bridges leaves overlap at 6/21 < 0.3, so a second
    # flood-fill layer runs along the cluster-internal edges and overshoots
    g, cut = _fig_fixture()
    pset = expand_partitions(g, cut, 0.3)
    assert pset.overlap_history[0] == (27 - 21) / 21
    assert pset.overlap_history[-1] >= 0.3
    assert len(pset.separators) == 3
    assert pset.separators[2] == (
        frozenset({6, 10, 19}),
        frozenset({7, 15, 19}),
        frozenset({11, 17}),
    )


def test_fixture_zero_target_means_no_expansion():
    g, cut = _fig_fixture()
    pset = expand_partitions(g, cut, 0.0)
    assert len(pset.separators) == 1
    assert pset.overlap_history == ()
    assert tuple(frozenset(m) for m in pset.members) == cut
    assert all(set(m.values()) == {0} for m in pset.members)


def test_cut_two_cliques():
    edges = []
    for base in (0, 10):
        for a in range(10):
            for b in range(a + 1, 10):
                edges.append((base + a, base + b, 10))
    edges.append((0, 10, 1))
    g = _graph(20, edges)
    parts, cut_weight = graph_cut(g, 2)
    assert set(parts) == {frozenset(range(10)), frozenset(range(10, 20))}
    assert cut_weight == 1.0


def test_cut_chain_into_three_intervals():
    g = _graph(21, [(k, k + 1, 1) for k in range(20)])
    parts, cut_weight = graph_cut(g, 3)
    assert sorted(len(p) for p in parts) == [7, 7, 7]
    # contiguous intervals are the unique minimum-weight balanced cut here
    for p in parts:
        assert max(p) - min(p) == len(p) - 1
    assert cut_weight == 2.0


def test_cut_k_bounds():
    g = _graph(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)])
    for bad in (0, 5):
        try:
            graph_cut(g, bad)
        except ValueError:
            continue
        raise AssertionError(f"K={bad} accepted")


def test_single_partition_has_no_separators():
    g = _graph(6, [(k, k + 1, 1) for k in range(5)])
    pset = partition_view_graph(g, PartitionConfig(max_partition_size=500))
    assert pset.n_partitions == 1
    assert pset.nodes(0) == frozenset(range(6))
    assert pset.separators == ((frozenset(),),)


def test_overlap_ratio_arithmetic():
    def fake(sizes):
        return PartitionSet(tuple({v: 0 for v in range(s)} for s in sizes), ((),), ())

    assert overlap_ratio(fake([10, 7]), 17) == 0.0
    assert abs(overlap_ratio(fake([10, 10]), 17) - 3 / 17) < 1e-15
    assert overlap_ratio(fake([8, 8]), 8) == 1.0


def test_induced_subgraphs_keep_internal_edges():
    g, cut = _fig_fixture()
    pset = expand_partitions(g, cut, 0.3)
    subs = induced_subgraphs(g, pset)
    assert len(subs) == 3
    for k, sub in enumerate(subs):
        keep = pset.nodes(k)
        assert set(sub.cameras) == set(keep)
        expected = {key for key in g.edges if key[0] in keep and key[1] in keep}
        assert set(sub.edges) == expected


def _connected(nodes, edges):
    nodes = set(nodes)
    if not nodes:
        return True
    adj = {v: [] for v in nodes}
    for i, j in edges:
        if i in nodes and j in nodes:
            adj[i].append(j)
            adj[j].append(i)
    seen = {min(nodes)}
    stack = [min(nodes)]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen == nodes


def _random_graph(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 40))
    edges = [(k, k + 1, int(rng.integers(1, 100))) for k in range(n - 1)]
    edges.append((0, n - 1, int(rng.integers(1, 100))))
    for _ in range(n // 2):
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        edges.append((i, j, int(rng.integers(1, 100))))
    return _graph(n, edges), n, rng


@settings(deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_partition_invariants(seed):
    g, n, rng = _random_graph(seed)
    K = int(rng.integers(2, 5))
    parts, _ = graph_cut(g, K)
    sizes = [len(p) for p in parts]
    assert max(sizes) <= 2 * min(sizes)
    assert sorted(v for p in parts for v in p) == list(range(n))

    pset = expand_partitions(g, parts, 0.3)
    # coverage
    covered = set()
    for m in pset.members:
        covered |= set(m)
    assert covered == set(range(n))
    # separator soundness: S_1 is exactly the cut-edge endpoints, per side
    member_of = {v: k for k, p in enumerate(parts) for v in p}
    expected_s1 = [set() for _ in parts]
    for i, j in g.edges:
        if member_of[i] != member_of[j]:
            expected_s1[member_of[i]].add(i)
            expected_s1[member_of[j]].add(j)
    assert pset.separators[0] == tuple(frozenset(s) for s in expected_s1)
    # monotone overlap, bounded iterations
    hist = pset.overlap_history
    assert all(b >= a for a, b in zip(hist, hist[1:]))
    assert len(hist) <= len(g.edges)
    # connectivity preservation
    for k, part in enumerate(parts):
        if _connected(part, g.edges):
            assert _connected(pset.nodes(k), g.edges)
    # expansion layers only ever add nodes on top of the cut
    for k, part in enumerate(parts):
        assert {v for v, layer in pset.members[k].items() if layer == 0} == set(part)
