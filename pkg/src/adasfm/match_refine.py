"""Wrong-match removal using epipolar geometry from estimated poses.

Two-view matchers decide correctness from appearance; once global poses
exist, every edge has a known essential matrix and correctness becomes a
geometric test. Each match is scored by the symmetric point-to-epipolar-line
distance in pixels and kept only under a fixed gate. Visual edges whose
surviving matches fall below a floor are removed from the graph entirely;
sensor edges are never removed because their geometry does not come from
matches.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import MatchRefineConfig
from .geometry import Camera, Pose, relative_pose, skew
from .scene import SENSOR, TwoViewEdge, ViewGraph


def essential_from_poses(pose_i: Pose, pose_j: Pose) -> np.ndarray:
    """E = [t_ij]x R_ij, so exact rays satisfy x_j . (E x_i) = 0.

    Raises ValueError on a zero baseline; coincident centers define no
    epipolar geometry.
    """
    R_ij, direction = relative_pose(pose_i, pose_j)
    if direction is None:
        raise ValueError("coincident camera centers: essential matrix undefined")
    return skew(direction) @ R_ij


def fundamental_from_poses(pose_i: Pose, pose_j: Pose, cam_i: Camera, cam_j: Camera) -> np.ndarray:
    """Pixel-space epipolar matrix: u_j . (F u_i) = 0 for homogeneous pixels."""
    E = essential_from_poses(pose_i, pose_j)
    return np.linalg.inv(cam_j.K).T @ E @ np.linalg.inv(cam_i.K)


def _point_line_px(point_h: np.ndarray, line: np.ndarray) -> tuple[float, bool]:
    n = float(np.hypot(line[0], line[1]))
    if n < 1e-12:
        return 0.0, True
    return abs(float(point_h @ line)) / n, False


def epipolar_distance(F: np.ndarray, u, u_prime, return_degenerate: bool = False):
    """Symmetric epipolar distance in pixels for one correspondence.

    ``u`` lies in the first image and ``u_prime`` in the second, with F
    oriented so that u_prime . (F u) = 0 holds for a true pair. Both
    point-to-line distances are summed. A degenerate line (zero direction
    part) carries no constraint, so that side contributes 0; pass
    ``return_degenerate=True`` to receive a flag alongside the distance.
    """
    uh = np.array([u[0], u[1], 1.0])
    vh = np.array([u_prime[0], u_prime[1], 1.0])
    d_second, g_second = _point_line_px(vh, F @ uh)
    d_first, g_first = _point_line_px(uh, F.T @ vh)
    d = d_first + d_second
    if return_degenerate:
        return d, (g_first or g_second)
    return d


def _symmetric_distances(F: np.ndarray, px_i: np.ndarray, px_j: np.ndarray) -> np.ndarray:
    """Vectorized epipolar_distance over (m, 2) pixel arrays."""
    uh = np.column_stack([px_i, np.ones(len(px_i))])
    vh = np.column_stack([px_j, np.ones(len(px_j))])
    lines_j = uh @ F.T
    lines_i = vh @ F
    norm_j = np.hypot(lines_j[:, 0], lines_j[:, 1])
    norm_i = np.hypot(lines_i[:, 0], lines_i[:, 1])
    num_j = np.abs(np.einsum("mk,mk->m", vh, lines_j))
    num_i = np.abs(np.einsum("mk,mk->m", uh, lines_i))
    d_j = np.where(norm_j > 1e-12, num_j / np.maximum(norm_j, 1e-300), 0.0)
    d_i = np.where(norm_i > 1e-12, num_i / np.maximum(norm_i, 1e-300), 0.0)
    return d_i + d_j


def refine_matches(
    edge: TwoViewEdge,
    pose_i: Pose,
    pose_j: Pose,
    cameras: dict[int, Camera],
    keypoints: dict[int, np.ndarray],
    eps_px: float = 4.0,
) -> TwoViewEdge:
    """Keep only matches whose symmetric epipolar distance is <= eps_px.

    Returns the edge with filtered matches and weight equal to the surviving
    count. Rotation, direction and source are untouched; dropping edges that
    end up too thin is the caller's decision.
    """
    if len(edge.matches) == 0:
        return edge
    F = fundamental_from_poses(pose_i, pose_j, cameras[edge.i], cameras[edge.j])
    px_i = keypoints[edge.i][edge.matches[:, 0]]
    px_j = keypoints[edge.j][edge.matches[:, 1]]
    keep = _symmetric_distances(F, px_i, px_j) <= eps_px
    return replace(edge, matches=edge.matches[keep], weight=int(keep.sum()))


@dataclass(frozen=True)
class MatchRefineReport:
    refined: int
    dropped: tuple[tuple[int, int], ...]
    skipped: tuple[tuple[int, int], ...]
    removed_matches: int
    kept_matches: int
    # surviving fraction per refined edge, for inlier-ratio distribution checks
    inlier_ratios: dict[tuple[int, int], float]


def refine_view_graph(
    graph: ViewGraph,
    poses: dict[int, Pose],
    keypoints: dict[int, np.ndarray],
    cfg: MatchRefineConfig = MatchRefineConfig(),
) -> tuple[ViewGraph, MatchRefineReport]:
    """Refine every edge of the graph against the estimated poses.

    Edges missing a pose on either end (nodes the averaging stage could not
    solve) and matchless sensor edges pass through untouched. Visual edges
    with fewer than cfg.min_edge_inliers survivors are dropped.
    """
    out: dict[tuple[int, int], TwoViewEdge] = {}
    dropped: list[tuple[int, int]] = []
    skipped: list[tuple[int, int]] = []
    ratios: dict[tuple[int, int], float] = {}
    refined = removed = kept = 0
    for key in sorted(graph.edges):
        e = graph.edges[key]
        if len(e.matches) == 0 or key[0] not in poses or key[1] not in poses:
            skipped.append(key)
            out[key] = e
            continue
        try:
            r = refine_matches(e, poses[key[0]], poses[key[1]], graph.cameras, keypoints, cfg.epipolar_px)
        except ValueError:
            # estimated centers can coincide even when the true ones do not
            skipped.append(key)
            out[key] = e
            continue
        refined += 1
        removed += len(e.matches) - len(r.matches)
        ratios[key] = len(r.matches) / len(e.matches)
        if r.source != SENSOR and len(r.matches) < cfg.min_edge_inliers:
            dropped.append(key)
            continue
        kept += len(r.matches)
        out[key] = r
    report = MatchRefineReport(
        refined=refined,
        dropped=tuple(dropped),
        skipped=tuple(skipped),
        removed_matches=removed,
        kept_matches=kept,
        inlier_ratios=ratios,
    )
    return ViewGraph(graph.cameras, out), report
