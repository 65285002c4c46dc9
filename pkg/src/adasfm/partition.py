"""View-graph partitioning: balanced spectral cut plus flood-fill overlap.

The cut gives disjoint pieces sized for parallel reconstruction. Disjoint
pieces merge poorly, so each partition is then grown outward along the
highest-weight boundary edges until the duplicated-node fraction reaches the
overlap target. The growth is recorded layer by layer; the separator layers
are what the merge stage later anchors on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import PartitionConfig
from .scene import ViewGraph


def _fiedler_order(nodes: list[int], adjacency: dict[int, dict[int, float]]) -> list[int]:
    """Nodes sorted by the Fiedler vector of the normalized Laplacian.

    Sign is canonicalized and ties fall back to node id, so the order is a
    pure function of the weighted subgraph.
    """
    n = len(nodes)
    index = {v: k for k, v in enumerate(nodes)}
    W = np.zeros((n, n))
    for u in nodes:
        for v, w in adjacency[u].items():
            if v in index:
                W[index[u], index[v]] = w
    deg = W.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    L = np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    vals, vecs = np.linalg.eigh((L + L.T) / 2.0)
    f = vecs[:, 1] if n > 1 else np.zeros(1)
    pivot = int(np.argmax(np.abs(f)))
    if f[pivot] < 0:
        f = -f
    return [v for _, v in sorted(zip(f, nodes), key=lambda t: (t[0], t[1]))]


def graph_cut(graph: ViewGraph, K: int) -> tuple[tuple[frozenset[int], ...], float]:
    """Split the graph into K balanced node sets by recursive bisection.

    Each split divides a part in proportion to how many leaves each side
    still owes, so final sizes differ by at most one per level and stay well
    within the 2x balance contract. Returns the parts (ordered by smallest
    member) and the total weight of edges crossing them.
    """
    nodes = sorted(graph.cameras)
    if K < 1 or K > len(nodes):
        raise ValueError(f"cannot cut {len(nodes)} nodes into {K} parts")
    adjacency: dict[int, dict[int, float]] = {v: {} for v in nodes}
    for (i, j), e in graph.edges.items():
        w = float(e.weight)
        adjacency[i][j] = adjacency[i].get(j, 0.0) + w
        adjacency[j][i] = adjacency[j].get(i, 0.0) + w

    parts: list[frozenset[int]] = []

    def split(group: list[int], k: int):
        if k == 1:
            parts.append(frozenset(group))
            return
        k_left = (k + 1) // 2
        k_right = k - k_left
        ordered = _fiedler_order(group, adjacency)
        size_left = int(round(len(group) * k_left / k))
        size_left = min(max(size_left, k_left), len(group) - k_right)
        split(ordered[:size_left], k_left)
        split(ordered[size_left:], k_right)

    split(nodes, K)
    parts.sort(key=min)
    member_of = {v: k for k, part in enumerate(parts) for v in part}
    cut_weight = sum(
        float(e.weight) for (i, j), e in graph.edges.items() if member_of[i] != member_of[j]
    )
    return tuple(parts), cut_weight


@dataclass(frozen=True)
class PartitionSet:
    """Overlapping partitions with per-node growth layers.

    ``members[k]`` maps node id to the expansion layer it joined partition k
    in (0 for cut members). ``separators[0]`` holds each partition's own
    endpoints of the original cross-partition edges; ``separators[l]`` for
    l >= 1 holds the nodes partition k gained in expansion iteration l.
    ``overlap_history`` records the duplicated-node ratio after each
    iteration.
    """

    members: tuple[dict[int, int], ...]
    separators: tuple[tuple[frozenset[int], ...], ...]
    overlap_history: tuple[float, ...]
    cut_weight: float = 0.0

    @property
    def n_partitions(self) -> int:
        return len(self.members)

    def nodes(self, k: int) -> frozenset[int]:
        return frozenset(self.members[k])

    @property
    def overlap(self) -> float:
        return self.overlap_history[-1] if self.overlap_history else 0.0


def overlap_ratio(pset: PartitionSet, total_nodes: int) -> float:
    """Duplicated-node fraction: (sum of partition sizes - |V|) / |V|."""
    return (sum(len(m) for m in pset.members) - total_nodes) / total_nodes


def _ratio(members: list[dict[int, int]], total: int) -> float:
    return (sum(len(m) for m in members) - total) / total


def expand_partitions(
    graph: ViewGraph, cut: tuple[frozenset[int], ...], tau_ot: float
) -> PartitionSet:
    """Flood-fill each partition outward until the overlap target is met.

    Every iteration gathers the not-yet-consumed edges that leave a
    partition through its current frontier, pools them, and walks them in
    descending weight order (ties to the smaller pair). Each edge donates
    its missing endpoint to the smallest partition that contains exactly one
    of its endpoints, lowest index on ties, with sizes updating as nodes
    land. Iterations stop once the duplicated-node ratio reaches ``tau_ot``
    or nothing is left to consume.
    """
    members: list[dict[int, int]] = [{v: 0 for v in part} for part in cut]
    total = len(graph.cameras)
    K = len(members)
    incident: dict[int, list[tuple[int, int]]] = {v: [] for v in graph.cameras}
    for key in sorted(graph.edges):
        incident[key[0]].append(key)
        incident[key[1]].append(key)

    # first-layer separators: each partition's own cut-edge endpoints
    s1: list[set[int]] = [set() for _ in range(K)]
    for (i, j), _ in sorted(graph.edges.items()):
        ki = [k for k in range(K) if i in members[k]]
        kj = [k for k in range(K) if j in members[k]]
        if not (set(ki) & set(kj)):
            for k in ki:
                s1[k].add(i)
            for k in kj:
                s1[k].add(j)
    separators: list[tuple[frozenset[int], ...]] = [tuple(frozenset(s) for s in s1)]

    frontiers: list[set[int]] = [set(s) for s in s1]
    consumed: set[tuple[int, int]] = set()
    history: list[float] = []
    if _ratio(members, total) >= tau_ot:
        return PartitionSet(tuple(members), tuple(separators), tuple(history))

    layer = 0
    while True:
        layer += 1
        candidates: set[tuple[int, int]] = set()
        for k in range(K):
            for v in frontiers[k]:
                for key in incident[v]:
                    other = key[0] if key[1] == v else key[1]
                    if key not in consumed and other not in members[k]:
                        candidates.add(key)
        if not candidates:
            break
        added: list[set[int]] = [set() for _ in range(K)]
        any_added = False
        order = sorted(candidates, key=lambda key: (-graph.edges[key].weight, key))
        for key in order:
            consumed.add(key)
            i, j = key
            eligible = []
            for k in range(K):
                has_i, has_j = i in members[k], j in members[k]
                if has_i != has_j:
                    eligible.append(k)
            if not eligible:
                continue
            k = min(eligible, key=lambda k: (len(members[k]), k))
            missing = j if i in members[k] else i
            members[k][missing] = layer
            added[k].add(missing)
            any_added = True
        if not any_added:
            break
        separators.append(tuple(frozenset(a) for a in added))
        frontiers = added
        history.append(_ratio(members, total))
        if history[-1] >= tau_ot:
            break
    return PartitionSet(tuple(members), tuple(separators), tuple(history))


def partition_view_graph(graph: ViewGraph, cfg: PartitionConfig = PartitionConfig()) -> PartitionSet:
    """Cut into ceil(|V| / max_partition_size) parts, then expand to overlap."""
    K = max(1, math.ceil(len(graph.cameras) / cfg.max_partition_size))
    parts, cut_weight = graph_cut(graph, K)
    if K == 1:
        members = ({v: 0 for v in parts[0]},)
        return PartitionSet(members, ((frozenset(),),), (), cut_weight)
    pset = expand_partitions(graph, parts, cfg.overlap_target)
    return PartitionSet(pset.members, pset.separators, pset.overlap_history, cut_weight)


def induced_subgraphs(graph: ViewGraph, pset: PartitionSet) -> tuple[ViewGraph, ...]:
    """Vertex-induced subgraph per partition, every surviving edge included."""
    out = []
    for k in range(pset.n_partitions):
        keep = pset.nodes(k)
        cams = {v: graph.cameras[v] for v in sorted(keep)}
        edges = {key: e for key, e in graph.edges.items() if key[0] in keep and key[1] in keep}
        out.append(ViewGraph(cams, edges))
    return tuple(out)
