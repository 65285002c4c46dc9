"""Robust rotation averaging over a view graph.

Estimates absolute world-to-camera rotations from pairwise relatives by
iteratively reweighted Gauss-Newton on the geodesic residual of every edge,
with a Cauchy kernel so grossly wrong relatives lose their vote instead of
dragging the solution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GlobalSfmConfig
from .geometry import angular_distance, project_rotation, so3_exp, so3_log
from .scene import ViewGraph


@dataclass(frozen=True)
class RotationResult:
    rotations: dict[int, np.ndarray]
    robust_weights: dict[tuple[int, int], float]
    iterations: int
    objective: float
    history: tuple[float, ...] = field(default=(), repr=False)


def short_cycle_verified_edges(
    graph: ViewGraph, keys: list[tuple[int, int]], thresh_deg: float = 2.0
) -> set[tuple[int, int]]:
    """Edges that close at least one 3- or 4-cycle to within ``thresh_deg``.

    A corrupted relative rotation only passes if other corruption in the
    same cycle cancels it, which independent random errors essentially
    never do. 4-cycles matter on sparse graphs: a good edge whose every
    triangle touches a bad edge can still close a clean quad. Edges outside
    any short cycle stay unverified.
    """
    key_set = set(keys)
    adj: dict[int, set[int]] = {}
    for i, j in keys:
        adj.setdefault(i, set()).add(j)
        adj.setdefault(j, set()).add(i)

    def rel(a, b):
        if (a, b) in key_set:
            return graph.edges[(a, b)].rotation
        return graph.edges[(b, a)].rotation.T

    thresh = np.deg2rad(thresh_deg)
    verified = set()
    for key in keys:
        i, j = key
        Rij = rel(i, j)
        done = False
        for k in sorted(adj[i] & adj[j]):
            err = np.linalg.norm(so3_log(rel(k, j) @ rel(i, k) @ Rij.T))
            if err < thresh:
                verified.add(key)
                done = True
                break
        if done:
            continue
        for k in sorted(adj[i] - {j}):
            for l in sorted((adj[k] & adj[j]) - {i, j}):
                err = np.linalg.norm(
                    so3_log(rel(l, j) @ rel(k, l) @ rel(i, k) @ Rij.T)
                )
                if err < thresh:
                    verified.add(key)
                    done = True
                    break
            if done:
                break
    return verified


def spanning_tree_rotations(
    graph: ViewGraph, nodes: list[int], preferred: set[tuple[int, int]] | None = None
) -> dict[int, np.ndarray]:
    """Initial rotations by chaining relatives along a max-weight spanning tree.

    Edges in ``preferred`` (cycle-verified ones, in practice) beat any
    non-preferred edge regardless of weight, so the tree only falls back to
    an unverified edge when connectivity leaves no choice.
    """
    node_set = set(nodes)
    preferred = preferred if preferred is not None else set()
    adj: dict[int, list[tuple[int, float, int, tuple[int, int]]]] = {
        v: [] for v in nodes
    }
    for key in sorted(graph.edges):
        i, j = key
        if i in node_set and j in node_set:
            rank = 0 if key in preferred else 1
            w = graph.edges[key].weight
            adj[i].append((rank, w, j, key))
            adj[j].append((rank, w, i, key))
    root = min(nodes)
    rot = {root: np.eye(3)}
    # Prim's algorithm, deterministic tie-break on (neighbor, key)
    order = lambda x: (x[0], -x[1], x[2])
    frontier = sorted(adj[root], key=order)
    in_tree = {root}
    while frontier:
        frontier.sort(key=order)
        _, w, v, key = frontier.pop(0)
        if v in in_tree:
            continue
        i, j = key
        e = graph.edges[key]
        if v == j:
            rot[v] = e.rotation @ rot[i]
        else:
            rot[v] = e.rotation.T @ rot[j]
        in_tree.add(v)
        frontier.extend(adj[v])
    return rot


def consensus_initial_rotations(
    graph: ViewGraph, nodes: list[int], keys: list[tuple[int, int]]
) -> dict[int, np.ndarray]:
    """Outlier-resistant initial rotations.

    Chains relatives inside each connected component of the cycle-verified
    subgraph, then merges components pairwise. Every edge bridging two
    components implies one inter-component gauge rotation; good bridges all
    imply the same one, so the largest mutually agreeing cluster wins and the
    merge applies its chordal mean. A single plain spanning tree fails here
    because one corrupted tree edge misplaces every node below it.
    """
    verified = short_cycle_verified_edges(graph, keys)

    def rel(a, b):
        if (a, b) in graph.edges:
            return graph.edges[(a, b)].rotation
        return graph.edges[(b, a)].rotation.T

    # local gauges per verified component, BFS propagation
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    for i, j in sorted(verified):
        adj[i].append(j)
        adj[j].append(i)
    local: dict[int, np.ndarray] = {}
    comp_of: dict[int, int] = {}
    comps: dict[int, set[int]] = {}
    cid = 0
    for start in nodes:
        if start in comp_of:
            continue
        comp_of[start] = cid
        comps[cid] = {start}
        local[start] = np.eye(3)
        queue = [start]
        while queue:
            u = queue.pop(0)
            for v in sorted(adj[u]):
                if v not in comp_of:
                    comp_of[v] = cid
                    comps[cid].add(v)
                    local[v] = rel(u, v) @ local[u]
                    queue.append(v)
        cid += 1

    def edge_of(a, b):
        return (a, b) if (a, b) in graph.edges else (b, a)

    adj_all: dict[int, list[int]] = {v: [] for v in nodes}
    for i, j in keys:
        adj_all[i].append(j)
        adj_all[j].append(i)
    for v in adj_all:
        adj_all[v].sort()

    while len(comps) > 1:
        # hypotheses per unordered component pair: direct bridge edges plus
        # two-edge paths through a node outside both components
        bridges: dict[tuple[int, int], list] = {}

        def add_hyp(keep, other, a, b, Q, w, tags):
            bridges.setdefault((keep, other), []).append((Q, w, tags))

        for key in keys:
            i, j = key
            ca, cb = comp_of[i], comp_of[j]
            if ca == cb:
                continue
            keep, other = (ca, cb) if min(comps[ca]) < min(comps[cb]) else (cb, ca)
            a, b = (i, j) if comp_of[i] == keep else (j, i)
            Q = local[b].T @ rel(a, b) @ local[a]
            add_hyp(keep, other, a, b, Q, graph.edges[key].weight,
                    frozenset([key]))
        for pair in sorted(bridges):
            keep, other = pair
            for m in nodes:
                cm = comp_of[m]
                if cm == keep or cm == other:
                    continue
                to_keep = [u for u in adj_all[m] if comp_of[u] == keep]
                to_other = [u for u in adj_all[m] if comp_of[u] == other]
                for a in to_keep:
                    for b in to_other:
                        ka, kb = edge_of(a, m), edge_of(m, b)
                        Q = local[b].T @ rel(m, b) @ rel(a, m) @ local[a]
                        w = 0.5 * min(graph.edges[ka].weight, graph.edges[kb].weight)
                        add_hyp(keep, other, a, b, Q, w, frozenset([ka, kb]))
        if not bridges:
            break
        best = None
        for pair in sorted(bridges):
            cand = bridges[pair]
            for n, (Q, _, _) in enumerate(cand):
                agree = [
                    (Q2, w2, t2)
                    for Q2, w2, t2 in cand
                    if angular_distance(Q, Q2) < np.deg2rad(4.0)
                ]
                # count only edge-disjoint members: hypotheses sharing a
                # corrupted edge agree for the wrong reason
                used: set = set()
                count, wsum, chosen = 0, 0.0, []
                for Q2, w2, t2 in agree:
                    if t2 & used:
                        continue
                    used |= t2
                    count += 1
                    wsum += w2
                    chosen.append((Q2, w2))
                score = (count, wsum, -n)
                if best is None or score > best[0] or (
                    score == best[0] and pair < best[1]
                ):
                    Qm = project_rotation(
                        np.sum([w2 * Q2 for Q2, w2 in chosen], axis=0)
                    )
                    best = (score, pair, Qm)
        _, (keep, other), Qm = best
        for v in comps[other]:
            local[v] = local[v] @ Qm
            comp_of[v] = keep
        comps[keep] |= comps.pop(other)

    root = min(nodes)
    G = local[root].T
    return {v: R @ G for v, R in local.items()}


def consensus_repair_sweeps(
    graph: ViewGraph,
    nodes: list[int],
    keys: list[tuple[int, int]],
    rot: dict[int, np.ndarray],
    max_sweeps: int = 10,
    agree_deg: float = 4.0,
) -> dict[int, np.ndarray]:
    """Node-wise majority repair of an initial rotation estimate.

    Each node collects rotation hypotheses from its incident edges and from
    two-edge paths, clusters them by angular agreement, and adopts the
    weighted chordal mean of the largest cluster. Hypotheses routed through
    good edges coincide; corrupted ones scatter, so a node fenced in by
    mostly bad edges still snaps to the consistent minority. Cluster size is
    counted over distinct incident edges: every two-edge path through the
    same last hop shares that hop's corruption, so it is the same vote, not
    a new one. Gauss-Seidel sweeps in node order until nothing moves.
    """
    key_set = set(keys)
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    for i, j in keys:
        adj[i].append(j)
        adj[j].append(i)
    for v in adj:
        adj[v].sort()

    def rel(a, b):
        if (a, b) in key_set:
            return graph.edges[(a, b)].rotation
        return graph.edges[(b, a)].rotation.T

    def wt(a, b):
        return graph.edges[(a, b) if (a, b) in key_set else (b, a)].weight

    thresh = np.deg2rad(agree_deg)
    rot = dict(rot)
    for _ in range(max_sweeps):
        moved = 0.0
        for v in sorted(nodes):
            # hypothesis, weight, incident edge it enters v through
            hyps: list[tuple[np.ndarray, float, int]] = []
            for u in adj[v]:
                hyps.append((rel(u, v) @ rot[u], wt(u, v), u))
                for w in adj[u]:
                    if w == v or w == u:
                        continue
                    hyps.append(
                        (
                            rel(u, v) @ rel(w, u) @ rot[w],
                            0.5 * min(wt(u, v), wt(w, u)),
                            u,
                        )
                    )
            if len(hyps) < 2:
                continue
            best = None
            for n, (R, _, _) in enumerate(hyps):
                members = [
                    (R2, w2, u2)
                    for R2, w2, u2 in hyps
                    if angular_distance(R, R2) < thresh
                ]
                tags = {}
                for _, w2, u2 in members:
                    tags[u2] = max(tags.get(u2, 0.0), w2)
                score = (len(tags), sum(tags.values()), -n)
                if best is None or score > best[0]:
                    best = (score, members)
            _, members = best
            new = project_rotation(np.sum([w * R for R, w, _ in members], axis=0))
            moved = max(moved, angular_distance(rot[v], new))
            rot[v] = new
        if moved < np.deg2rad(0.05):
            break
    root = min(nodes)
    G = rot[root].T
    return {v: R @ G for v, R in rot.items()}


def _edge_residuals(graph, keys, rot):
    res = np.empty((len(keys), 3))
    for n, key in enumerate(keys):
        i, j = key
        M = graph.edges[key].rotation @ rot[i] @ rot[j].T
        res[n] = so3_log(M)
    return res


def _cauchy_cost(res, c):
    th2 = (res * res).sum(axis=1)
    return float(0.5 * c * c * np.log1p(th2 / (c * c)).sum())


def _irls_stage(graph, keys, nodes, col, n_free, rot, c, max_iters, step_tol):
    """Gauss-Newton IRLS at one fixed Cauchy scale, backtracked so the
    accepted robust cost never increases within the stage."""
    res = _edge_residuals(graph, keys, rot)
    cost = _cauchy_cost(res, c)
    history = [cost]
    it = 0
    for it in range(1, max_iters + 1):
        th2 = (res * res).sum(axis=1)
        w = 1.0 / (1.0 + th2 / (c * c))
        H = np.zeros((3 * n_free, 3 * n_free))
        g = np.zeros(3 * n_free)
        for n, key in enumerate(keys):
            i, j = key
            e = graph.edges[key]
            # residual model: r(d) = w_e + R_ij d_i - M d_j, M = R_ij Ri Rj^T = exp(w_e)
            Ji = e.rotation
            Jj = -so3_exp(res[n])
            ci, cj = col(i), col(j)
            wn = w[n]
            for ca, Ja in ((ci, Ji), (cj, Jj)):
                if ca < 0:
                    continue
                g[3 * ca : 3 * ca + 3] -= wn * (Ja.T @ res[n])
                for cb, Jb in ((ci, Ji), (cj, Jj)):
                    if cb < 0:
                        continue
                    H[3 * ca : 3 * ca + 3, 3 * cb : 3 * cb + 3] += wn * (Ja.T @ Jb)
        try:
            delta = np.linalg.solve(H + 1e-12 * np.eye(3 * n_free), g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break

        step = 1.0
        accepted = False
        for _ in range(12):
            trial = {}
            for v in nodes:
                cidx = col(v)
                d = np.zeros(3) if cidx < 0 else step * delta[3 * cidx : 3 * cidx + 3]
                trial[v] = so3_exp(d) @ rot[v]
            trial_res = _edge_residuals(graph, keys, trial)
            trial_cost = _cauchy_cost(trial_res, c)
            if trial_cost <= cost + 1e-15:
                rot, res, cost = trial, trial_res, trial_cost
                accepted = True
                break
            step *= 0.5
        history.append(cost)
        if not accepted or step * np.linalg.norm(delta) < step_tol:
            break
    return rot, res, cost, history, it


def rotation_averaging(graph: ViewGraph, cfg: GlobalSfmConfig) -> RotationResult:
    nodes = sorted(graph.largest_component())
    if len(nodes) == 1:
        return RotationResult({nodes[0]: np.eye(3)}, {}, 0, 0.0)
    index = {v: n for n, v in enumerate(nodes)}
    node_set = set(nodes)
    keys = [k for k in sorted(graph.edges) if k[0] in node_set and k[1] in node_set]
    rot = consensus_initial_rotations(graph, nodes, keys)
    rot = consensus_repair_sweeps(graph, nodes, keys, rot)

    root_idx = index[min(nodes)]
    n_free = len(nodes) - 1

    def col(v):
        # gauge: root block removed from the unknowns
        k = index[v]
        if k == root_idx:
            return -1
        return k - 1 if k > root_idx else k

    c = np.deg2rad(cfg.rotation_cauchy_deg)
    rot, res, cost, history, it = _irls_stage(
        graph, keys, nodes, col, n_free, rot, c,
        cfg.rotation_max_iters, cfg.rotation_step_tol,
    )

    rot = {v: project_rotation(R) for v, R in rot.items()}
    th2 = (res * res).sum(axis=1)
    weights = {key: float(1.0 / (1.0 + t / (c * c))) for key, t in zip(keys, th2)}
    return RotationResult(rot, weights, it, cost, tuple(history))


def filter_edges_by_rotation(
    graph: ViewGraph, rotations: dict[int, np.ndarray], cfg: GlobalSfmConfig
) -> ViewGraph:
    """Drop edges whose relative rotation disagrees with the averaged absolutes."""
    keep = {}
    thresh = np.deg2rad(cfg.edge_filter_deg)
    for key in sorted(graph.edges):
        i, j = key
        if i not in rotations or j not in rotations:
            continue
        e = graph.edges[key]
        err = np.linalg.norm(so3_log(e.rotation @ rotations[i] @ rotations[j].T))
        if err <= thresh:
            keep[key] = e
    cams = {v: graph.cameras[v] for v in rotations}
    return ViewGraph(cams, keep)
