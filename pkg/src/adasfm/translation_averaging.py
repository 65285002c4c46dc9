"""Camera centers from pairwise translation directions.

Solves for centers C_i and per-edge scales s_ij so that s_ij (C_i - C_j)
matches the unit world direction of every edge, under an L1-flavored IRLS.
The scales absorb the unknown baseline length of each edge; constraining
them to s_ij >= 1 rules out the all-zero collapse, which puts the solver in
a normalized frame where the longest baseline is one unit. Metric lengths
from sensor edges, when present, rescale the final centers back to metric.
"""
from __future__ import annotations

import numpy as np

from .config import GlobalSfmConfig
from .geometry import Pose, skew
from .scene import GlobalPoses, ViewGraph


def edge_world_directions(
    graph: ViewGraph, rotations: dict[int, np.ndarray]
) -> dict[tuple[int, int], np.ndarray]:
    """Per-edge unit direction in world coordinates, proportional to C_i - C_j."""
    out = {}
    for key in sorted(graph.edges):
        i, j = key
        if i in rotations and j in rotations:
            d = rotations[j].T @ graph.edges[key].direction
            out[key] = d / np.linalg.norm(d)
    return out


def _cross_product_init(
    nodes: list[int], keys: list[tuple[int, int]], dirs: dict
) -> np.ndarray:
    """Direction-only linear initialization.

    Minimizes sum ||[d]x (C_i - C_j)||^2, which is scale- and sign-blind but
    convex. The three rigid-translation null vectors are pushed out of the
    spectrum so the smallest eigenvector is the shape, then a majority vote
    over <C_i - C_j, d> fixes the global sign.
    """
    n = len(nodes)
    index = {v: k for k, v in enumerate(nodes)}
    H = np.zeros((3 * n, 3 * n))
    for key in keys:
        i, j = index[key[0]], index[key[1]]
        M = skew(dirs[key])
        B = M.T @ M
        H[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] += B
        H[3 * j : 3 * j + 3, 3 * j : 3 * j + 3] += B
        H[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] -= B
        H[3 * j : 3 * j + 3, 3 * i : 3 * i + 3] -= B
    T = np.zeros((3 * n, 3))
    for k in range(3):
        T[k::3, k] = 1.0 / np.sqrt(n)
    shift = max(float(np.trace(H)), 1.0)
    Hd = H + shift * (T @ T.T)
    vals, vecs = np.linalg.eigh(Hd)
    C = vecs[:, 0].reshape(n, 3)
    C -= C.mean(axis=0)

    vote = 0.0
    for key in keys:
        i, j = index[key[0]], index[key[1]]
        vote += np.sign(float((C[i] - C[j]) @ dirs[key]))
    if vote < 0:
        C = -C
    norm = np.sqrt((C**2).sum(axis=1).mean())
    if norm > 1e-12:
        C /= norm
    return C


def _fit_scales_raw(C, keys, index, dirs):
    """Unconstrained per-edge scale minimizing ||s dC - d||^2."""
    s = np.empty(len(keys))
    for e, key in enumerate(keys):
        dC = C[index[key[0]]] - C[index[key[1]]]
        nn = float(dC @ dC)
        s[e] = 1.0 if nn < 1e-18 else float(dC @ dirs[key]) / nn
    return s


def _renormalized_scales(C, keys, index, dirs):
    """Scale step in the canonical frame.

    Rescaling (C, s) -> (mC, s/m) leaves every residual unchanged, so the
    frame is pinned by making the smallest positive unconstrained scale
    exactly one; the clamp to s >= 1 then binds only on that boundary edge
    and on edges whose direction disagrees outright (negative fit).
    """
    raw = _fit_scales_raw(C, keys, index, dirs)
    positive = raw[raw > 1e-12]
    if len(positive):
        m = float(positive.min())
        C = C * m
        raw = raw / m
    return C, np.maximum(raw, 1.0)


def _l1_objective(C, s, keys, index, dirs):
    total = 0.0
    for e, key in enumerate(keys):
        r = s[e] * (C[index[key[0]]] - C[index[key[1]]]) - dirs[key]
        total += float(np.linalg.norm(r))
    return total


def _solve_centers(C, s, w, keys, index, dirs, n):
    L = np.zeros((n, n))
    b = np.zeros((n, 3))
    for e, key in enumerate(keys):
        i, j = index[key[0]], index[key[1]]
        om = w[e] * s[e] * s[e]
        L[i, i] += om
        L[j, j] += om
        L[i, j] -= om
        L[j, i] -= om
        rhs = w[e] * s[e] * dirs[key]
        b[i] += rhs
        b[j] -= rhs
    # rank-1 shift makes L invertible; b sums to zero so the solution is the
    # mean-free minimizer
    L += np.ones((n, n)) / n
    X = np.linalg.solve(L, b)
    return X - X.mean(axis=0)


def _gauge_null_basis(C, s, keys, index, n):
    nvar = 3 * n + len(keys)
    G = np.zeros((nvar, 4))
    for k in range(3):
        G[k : 3 * n : 3, k] = 1.0
    G[: 3 * n, 3] = C.reshape(-1)
    G[3 * n :, 3] = -s
    Q, _ = np.linalg.qr(G)
    return Q


def find_unsolvable_nodes(
    C: np.ndarray,
    s: np.ndarray,
    keys: list[tuple[int, int]],
    nodes: list[int],
    rel_tol: float = 1e-9,
) -> list[int]:
    """Nodes with leftover motion freedom at the solution.

    The residual Jacobian in (centers, scales) always has four exact null
    directions: three rigid translations and one joint rescale. Any further
    null singular vector means some cameras can move without changing any
    residual (the parallel-rigidity defect); the nodes carrying that vector
    are reported. The tolerance admits only true defects, which show up at
    machine scale, not merely ill-conditioned ones.
    """
    index = {v: k for k, v in enumerate(nodes)}
    n = len(nodes)
    E = len(keys)
    J = np.zeros((3 * E, 3 * n + E))
    for e, key in enumerate(keys):
        i, j = index[key[0]], index[key[1]]
        rows = slice(3 * e, 3 * e + 3)
        J[rows, 3 * i : 3 * i + 3] = s[e] * np.eye(3)
        J[rows, 3 * j : 3 * j + 3] = -s[e] * np.eye(3)
        J[rows, 3 * n + e] = C[i] - C[j]
    _, sv, Vt = np.linalg.svd(J, full_matrices=True)
    smax = sv[0] if len(sv) else 1.0
    null_dim = int(np.sum(sv < rel_tol * smax)) + (3 * n + E - len(sv))
    if null_dim <= 4:
        return []
    Q = _gauge_null_basis(C, s, keys, index, n)
    bad_weight = np.zeros(n)
    for k in range(null_dim):
        v = Vt[-(k + 1)]
        u = v - Q @ (Q.T @ v)
        nu = np.linalg.norm(u)
        if nu < 1e-8:
            continue
        u /= nu
        blocks = u[: 3 * n].reshape(n, 3)
        bad_weight = np.maximum(bad_weight, np.linalg.norm(blocks, axis=1))
    if bad_weight.max() < 1e-8:
        return []
    flagged = np.nonzero(bad_weight > 0.3 * bad_weight.max())[0]
    return [nodes[k] for k in flagged]


def translation_averaging(
    graph: ViewGraph,
    rotations: dict[int, np.ndarray],
    cfg: GlobalSfmConfig,
    metric_scales: dict[tuple[int, int], float] | None = None,
) -> GlobalPoses:
    dirs_all = edge_world_directions(graph, rotations)
    sub = graph.subgraph(sorted(set(rotations)))
    nodes = sorted(sub.largest_component())
    unsolvable: list[int] = sorted(set(rotations) - set(nodes))

    for _ in range(4):
        node_set = set(nodes)
        keys = [k for k in sorted(dirs_all) if k[0] in node_set and k[1] in node_set]
        if len(nodes) < 3 or len(keys) < 2:
            unsolvable.extend(nodes)
            nodes = []
            break
        index = {v: k for k, v in enumerate(nodes)}
        dirs = {k: dirs_all[k] for k in keys}
        n = len(nodes)

        C = _cross_product_init(nodes, keys, dirs)
        C, s = _renormalized_scales(C, keys, index, dirs)

        history = [_l1_objective(C, s, keys, index, dirs)]
        for _ in range(cfg.translation_max_iters):
            w = np.empty(len(keys))
            for e, key in enumerate(keys):
                r = s[e] * (C[index[key[0]]] - C[index[key[1]]]) - dirs[key]
                w[e] = 1.0 / max(float(np.linalg.norm(r)), cfg.translation_irls_delta)
            C = _solve_centers(C, s, w, keys, index, dirs, n)
            C, s = _renormalized_scales(C, keys, index, dirs)
            obj = _l1_objective(C, s, keys, index, dirs)
            history.append(obj)
            if abs(history[-2] - obj) < cfg.translation_obj_tol * max(1.0, obj):
                break

        if not cfg.rigidity_check:
            break
        bad = find_unsolvable_nodes(C, s, keys, nodes)
        if not bad:
            break
        unsolvable.extend(bad)
        remaining = sorted(set(nodes) - set(bad))
        if not remaining:
            nodes = []
            break
        pruned = sub.subgraph(remaining)
        comp = sorted(pruned.largest_component()) if remaining else []
        unsolvable.extend(sorted(set(remaining) - set(comp)))
        nodes = comp
        sub = pruned

    if not nodes:
        return GlobalPoses({}, {}, tuple(sorted(set(unsolvable))), ())

    # the solver works in a normalized frame (longest consistent baseline is
    # one unit); metric edge lengths, when given, rescale the output frame
    if metric_scales:
        ratios = []
        for k in keys:
            length = metric_scales.get(k, 0.0)
            if length <= 0:
                continue
            base = float(np.linalg.norm(C[index[k[0]]] - C[index[k[1]]]))
            if base > 1e-12:
                ratios.append(length / base)
        if ratios:
            C = C * float(np.median(ratios))

    poses = {}
    for v in nodes:
        R = rotations[v]
        poses[v] = Pose.from_center(R, C[index[v]].copy())
    scales = {k: float(s[e]) for e, k in enumerate(keys)}
    return GlobalPoses(poses, scales, tuple(sorted(set(unsolvable))), tuple(history))
