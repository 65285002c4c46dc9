"""Feature tracks from pairwise matches, plus multi-view triangulation."""
from __future__ import annotations

import numpy as np

from .geometry import Camera, Pose
from .scene import Track, ViewGraph


def build_correspondence_groups(graph: ViewGraph) -> list[tuple[tuple[int, int], ...]]:
    """Transitively merge pairwise matches into correspondence groups.

    Groups are tuples of (image id, keypoint index). A keypoint chain across
    three images collapses into one group of three observations. A merge
    that would make a group observe some image through two different
    keypoints is refused and that match skipped: wrong matches chain
    unrelated points together, and without the refusal a few percent of bad
    matches collapse the whole scene into one group. Matches are processed
    in sorted edge order, then row order. Groups shorter than two
    observations are dropped.
    """
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    payload: dict[tuple[int, int], dict[int, int]] = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for key in sorted(graph.edges):
        e = graph.edges[key]
        for ki, kj in e.matches:
            a, b = (e.i, int(ki)), (e.j, int(kj))
            for node in (a, b):
                if node not in parent:
                    parent[node] = node
                    payload[node] = {node[0]: node[1]}
            ra, rb = find(a), find(b)
            if ra == rb:
                continue
            if rb < ra:
                ra, rb = rb, ra
            pa, pb = payload[ra], payload[rb]
            small, large = (pa, pb) if len(pa) <= len(pb) else (pb, pa)
            if any(large.get(img, kp) != kp for img, kp in small.items()):
                continue
            large.update(small)
            payload[ra] = large
            parent[rb] = ra
            del payload[rb]

    out = []
    for root in sorted(payload):
        if find(root) != root or len(payload[root]) < 2:
            continue
        out.append(tuple(sorted(payload[root].items())))
    return out


def triangulate_dlt(
    poses: list[Pose], cameras: list[Camera], pixels: np.ndarray
) -> np.ndarray | None:
    """Linear multi-view triangulation in normalized coordinates.

    Returns the world point, or None when the system is numerically
    degenerate (near-zero homogeneous w).
    """
    rows = []
    for pose, cam, uv in zip(poses, cameras, pixels):
        x = (uv[0] - cam.cx) / cam.fx
        y = (uv[1] - cam.cy) / cam.fy
        P = np.hstack([pose.R, pose.t[:, None]])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.stack(rows)
    _, _, Vt = np.linalg.svd(A, full_matrices=True)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        return None
    return Xh[:3] / Xh[3]


def depths(poses: list[Pose], X: np.ndarray) -> np.ndarray:
    return np.array([(p.R @ X + p.t)[2] for p in poses])


def max_ray_angle_deg(X: np.ndarray, centers: np.ndarray) -> float:
    """Largest pairwise angle between the rays from camera centers to X."""
    rays = X[None, :] - np.asarray(centers)
    norms = np.linalg.norm(rays, axis=1)
    good = norms > 1e-12
    rays = rays[good] / norms[good][:, None]
    if len(rays) < 2:
        return 0.0
    cosmat = np.clip(rays @ rays.T, -1.0, 1.0)
    iu = np.triu_indices(len(rays), k=1)
    return float(np.rad2deg(np.arccos(cosmat[iu].min())))


def reprojection_errors(
    poses: list[Pose], cameras: list[Camera], pixels: np.ndarray, X: np.ndarray
) -> np.ndarray:
    errs = np.full(len(poses), np.inf)
    for k, (pose, cam, uv) in enumerate(zip(poses, cameras, pixels)):
        xc = pose.R @ X + pose.t
        if xc[2] <= 0:
            continue
        u = cam.fx * xc[0] / xc[2] + cam.cx
        v = cam.fy * xc[1] / xc[2] + cam.cy
        errs[k] = np.hypot(u - uv[0], v - uv[1])
    return errs


def triangulate_strict(
    observations: tuple[tuple[int, int], ...],
    poses: dict[int, Pose],
    cameras: dict[int, Camera],
    keypoints: dict[int, np.ndarray],
    min_angle_deg: float,
) -> Track | None:
    """All-or-nothing triangulation used for the global model.

    Requires every observing camera to see the point in front and the widest
    ray pair to subtend more than ``min_angle_deg``. No reprojection gate
    here: the later bundle adjustment owns that filter.
    """
    obs = [(i, k) for i, k in observations if i in poses]
    if len(obs) < 2:
        return None
    ps = [poses[i] for i, _ in obs]
    cs = [cameras[i] for i, _ in obs]
    px = np.stack([keypoints[i][k] for i, k in obs])
    X = triangulate_dlt(ps, cs, px)
    if X is None:
        return None
    if np.any(depths(ps, X) <= 0):
        return None
    centers = np.stack([p.center for p in ps])
    if max_ray_angle_deg(X, centers) <= min_angle_deg:
        return None
    return Track(X, tuple(obs), np.ones(len(obs), dtype=bool))


def triangulate_tolerant(
    observations: tuple[tuple[int, int], ...],
    poses: dict[int, Pose],
    cameras: dict[int, Camera],
    keypoints: dict[int, np.ndarray],
    min_angle_deg: float,
    max_reproj_px: float,
) -> tuple[np.ndarray, dict[int, bool]] | None:
    """Triangulation that tolerates bad observations by flagging them out.

    Fits on every registered observation, then repeatedly drops the worst
    reprojecting one and refits until the remaining set all land within
    ``max_reproj_px``. One bad detection can pull a least-squares fit far
    enough to spoil every residual, so thresholding after a single fit is
    not enough. Returns the point and an inlier verdict per registered
    image, or None if fewer than two survivors subtend enough angle.
    """
    obs = [(i, k) for i, k in observations if i in poses]
    if len(obs) < 2:
        return None
    ps = [poses[i] for i, _ in obs]
    cs = [cameras[i] for i, _ in obs]
    px = np.stack([keypoints[i][k] for i, k in obs])

    active = np.ones(len(obs), dtype=bool)
    X = None
    while active.sum() >= 2:
        X = triangulate_dlt(
            [p for p, a in zip(ps, active) if a],
            [c for c, a in zip(cs, active) if a],
            px[active],
        )
        if X is None:
            return None
        err = reprojection_errors(ps, cs, px, X)
        if np.all(err[active] < max_reproj_px):
            break
        worst = np.argmax(np.where(active, err, -np.inf))
        active[worst] = False
    if X is None or active.sum() < 2:
        return None
    err = reprojection_errors(ps, cs, px, X)
    good = err < max_reproj_px
    if good.sum() < 2:
        return None
    centers = np.stack([p.center for p, g in zip(ps, good) if g])
    if max_ray_angle_deg(X, centers) <= min_angle_deg:
        return None
    return X, {i: bool(g) for (i, _), g in zip(obs, good)}
