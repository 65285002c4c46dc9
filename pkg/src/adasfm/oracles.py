"""Small, slow, obviously-correct reference implementations.

These exist solely so the test suite can check the fast production code
against an independent code path. Each function documents (and enforces) a
size guard; they are exhaustive or termwise by design and must stay that way.
"""
from __future__ import annotations

import itertools

import numpy as np

from .geometry import Pose, skew, so3_exp, so3_log


def rodrigues_termwise(w: np.ndarray) -> np.ndarray:
    """Axis-angle to rotation via the textbook three-term Rodrigues sum.

    Normalizes the axis explicitly instead of folding the angle into the
    series the way so3_exp does.
    """
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta == 0.0:
        return np.eye(3)
    axis = w / theta
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_angle_trace(R: np.ndarray) -> float:
    """Rotation angle from the trace identity cos(theta) = (tr(R) - 1) / 2."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def spanning_tree_rotations(
    n: int, edges: dict[tuple[int, int], np.ndarray], root: int = 0
) -> dict[int, np.ndarray]:
    """Propagate absolute rotations over a BFS tree, no averaging at all.

    On exact (noise-free, consistent) relative rotations this equals any
    correct averaging output up to the global gauge. Guard: n <= 200.
    """
    if n > 200:
        raise ValueError("spanning_tree_rotations is a test oracle, n must be <= 200")
    adj: dict[int, list[tuple[int, int, int]]] = {k: [] for k in range(n)}
    for (i, j), R in edges.items():
        adj[i].append((j, i, j))
        adj[j].append((i, i, j))
    out = {root: np.eye(3)}
    queue = [root]
    while queue:
        u = queue.pop(0)
        for v, i, j in sorted(adj[u]):
            if v in out:
                continue
            R_ij = edges[(i, j)]
            # R_ij = R_j R_i^T, so R_j = R_ij R_i and R_i = R_ij^T R_j
            out[v] = R_ij @ out[u] if v == j else R_ij.T @ out[u]
            queue.append(v)
    return out


def triangle_translation_closed_form(
    d01: np.ndarray, d02: np.ndarray, d12: np.ndarray
) -> np.ndarray:
    """Camera centers of a 3-view graph from exact pairwise directions.

    Directions follow the translation-averaging convention d_ij ~ C_i - C_j.
    Gauge: C_0 at the origin, |C_0 - C_1| = 1. C_2 comes from intersecting
    the ray from C_0 along -d02 with the ray from C_1 along -d12 (closest
    point of the two lines). Degenerate if d02 and d12 are parallel.
    """
    c0 = np.zeros(3)
    c1 = -np.asarray(d01, dtype=float) / np.linalg.norm(d01)
    u = -np.asarray(d02, dtype=float)
    v = -np.asarray(d12, dtype=float)
    cross = np.cross(u, v)
    denom = float(cross @ cross)
    if denom < 1e-16:
        raise ValueError("parallel directions: third camera is unresolvable")
    w = c1 - c0
    s = float(np.cross(w, v) @ cross) / denom
    t = float(np.cross(w, u) @ cross) / denom
    p_on_u = c0 + s * u
    p_on_v = c1 + t * v
    c2 = 0.5 * (p_on_u + p_on_v)
    return np.stack([c0, c1, c2])


def epipolar_distance_direct(u_i: np.ndarray, u_j: np.ndarray, F: np.ndarray) -> float:
    """Symmetric point-to-epipolar-line distance, one pair at a time.

    Homogenizes each pixel explicitly and normalizes each line by the norm
    of its first two coefficients.
    """
    xi = np.array([u_i[0], u_i[1], 1.0])
    xj = np.array([u_j[0], u_j[1], 1.0])
    line_j = F @ xi
    line_i = F.T @ xj
    d_j = abs(xj @ line_j) / np.hypot(line_j[0], line_j[1])
    d_i = abs(xi @ line_i) / np.hypot(line_i[0], line_i[1])
    return float(d_i + d_j)


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form least-squares similarity: dst ~ s R src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def sim3_exhaustive_consensus(
    src: np.ndarray, dst: np.ndarray, tol: float
) -> tuple[int, tuple[int, ...]]:
    """Best inlier count over every 3-subset similarity fit. Guard: n <= 12.

    Returns (max inlier count, lexicographically first achieving subset).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n > 12:
        raise ValueError("sim3_exhaustive_consensus is exhaustive, n must be <= 12")
    best = (0, tuple())
    for subset in itertools.combinations(range(n), 3):
        sub = list(subset)
        a = src[sub]
        if np.linalg.matrix_rank(a - a.mean(axis=0), tol=1e-9) < 2:
            continue
        s, R, t = umeyama_alignment(src[sub], dst[sub])
        if s <= 0:
            continue
        err = np.linalg.norm(s * (src @ R.T) + t - dst, axis=1)
        count = int((err < tol).sum())
        if count > best[0]:
            best = (count, subset)
    return best


def geodesic_median_grid(
    rotations: list[np.ndarray], radius: float = 0.6, levels: int = 4, steps: int = 7
) -> np.ndarray:
    """Geodesic (L1) rotation median by nested tangent-space grid search.

    Starts at the chordal mean, refines a shrinking cube in the tangent
    space. Slow and approximate to ~radius / steps**levels radians.
    Guard: at most 64 rotations.
    """
    if len(rotations) > 64:
        raise ValueError("geodesic_median_grid handles at most 64 rotations")
    M = np.zeros((3, 3))
    for R in rotations:
        M += R
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    center = U @ D @ Vt

    def cost(R):
        return sum(np.linalg.norm(so3_log(Rk @ R.T)) for Rk in rotations)

    best = center
    best_cost = cost(center)
    r = radius
    for _ in range(levels):
        ticks = np.linspace(-r, r, steps)
        for dx in ticks:
            for dy in ticks:
                for dz in ticks:
                    cand = so3_exp(np.array([dx, dy, dz])) @ best
                    c = cost(cand)
                    if c < best_cost - 1e-15:
                        best_cost = c
                        best = cand
        r /= steps / 2.0
    return best


def balanced_bipartition_bruteforce(
    weights: dict[tuple[int, int], float], nodes: list[int]
) -> tuple[float, frozenset[int]]:
    """Minimum-weight cut over all bipartitions within a 2x size balance.

    Guard: at most 16 nodes. Returns (cut weight, one side of the best cut);
    ties resolve to the side containing the smallest node id with the
    lexicographically smallest sorted membership.
    """
    n = len(nodes)
    if n > 16:
        raise ValueError("balanced_bipartition_bruteforce handles at most 16 nodes")
    best: tuple[float, tuple[int, ...]] | None = None
    idx = {v: k for k, v in enumerate(nodes)}
    for mask in range(1, 2 ** (n - 1)):
        side = [nodes[k] for k in range(n) if (mask >> k) & 1]
        other = n - len(side)
        if not (len(side) <= 2 * other and other <= 2 * len(side)):
            continue
        in_side = np.zeros(n, dtype=bool)
        for v in side:
            in_side[idx[v]] = True
        cut = 0.0
        for (a, b), w in weights.items():
            if in_side[idx[a]] != in_side[idx[b]]:
                cut += w
        key = (cut, tuple(sorted(side)))
        if best is None or key < best:
            best = key
    assert best is not None
    return best[0], frozenset(best[1])


def reprojection_residuals_bruteforce(camera, poses: dict[int, Pose], tracks, keypoints):
    """Per-observation reprojection errors via one-point-at-a-time projection."""
    errs = []
    for tr in tracks:
        for k, (img, kp) in enumerate(tr.observations):
            if not tr.inliers[k] or img not in poses:
                continue
            p = poses[img]
            xc = p.R @ tr.point + p.t
            uv = np.array(
                [camera.fx * xc[0] / xc[2] + camera.cx, camera.fy * xc[1] / xc[2] + camera.cy]
            )
            errs.append(float(np.linalg.norm(uv - keypoints[img][kp])))
    return np.array(errs)


def brute_force_oracles() -> dict[str, object]:
    """Registry of the reference implementations, keyed by a stable name."""
    return {
        "rodrigues_termwise": rodrigues_termwise,
        "rotation_angle_trace": rotation_angle_trace,
        "spanning_tree_rotations": spanning_tree_rotations,
        "triangle_translation_closed_form": triangle_translation_closed_form,
        "epipolar_distance_direct": epipolar_distance_direct,
        "umeyama_alignment": umeyama_alignment,
        "sim3_exhaustive_consensus": sim3_exhaustive_consensus,
        "geodesic_median_grid": geodesic_median_grid,
        "balanced_bipartition_bruteforce": balanced_bipartition_bruteforce,
        "reprojection_residuals_bruteforce": reprojection_residuals_bruteforce,
    }
