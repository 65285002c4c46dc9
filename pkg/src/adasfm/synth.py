"""Synthetic scene generation and reconstruction metrics.

A generated scene bundles a view graph with exact relative geometry (plus
planted corruption), noisy keypoints, sensor-style relative-pose priors and
the full ground truth, standing in for a real capture. Everything is driven
by a single seeded generator so that one spec always produces one scene.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera, Pose, relative_pose, so3_exp
from .scene import SensorPrior, TwoViewEdge, ViewGraph, edge_key

TRAJECTORIES = ("ring", "line", "figure-eight", "random-walk")

# transverse extent of the point tube that corridor-style trajectories see
_TUBE_SIGMA = np.array([1.4, 1.4, 0.7])
_NEAR_PLANE = 0.25
_LINE_POINTS = 14  # points on the planted degenerate line


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic capture."""

    trajectory: str = "ring"
    n_cameras: int = 20
    n_points: int = 400
    # full width of the per-axis uniform detection error; 1.0 reproduces
    # keypoints localized to the integer pixel grid
    pixel_noise: float = 0.0
    outlier_match_fraction: float = 0.0
    outlier_edge_fraction: float = 0.0
    sensor_rot_noise_deg: float = 0.0
    sensor_trans_noise_frac: float = 0.0
    sensor_dt_min_ms: float = 100.0
    sensor_dt_max_ms: float = 300.0
    seed: int = 42
    # graph shaping
    neighbor_window: int = 2
    chord_fraction: float = 0.2
    min_shared_points: int = 8
    degenerate_image_count: int = 0
    # camera model
    image_width: int = 640
    image_height: int = 480
    focal: float = 500.0
    max_view_angle_deg: float = 70.0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}, pick one of {TRAJECTORIES}")
        if self.n_cameras < 2:
            raise ValueError("need at least two cameras")


@dataclass(frozen=True)
class GroundTruth:
    poses: dict[int, Pose]
    points: np.ndarray
    visible: dict[int, np.ndarray]  # image id -> point id per keypoint index
    outlier_edges: frozenset
    outlier_matches: frozenset  # (i, j, kp_i, kp_j) rows planted as wrong
    diameter: float


@dataclass(frozen=True)
class SyntheticScene:
    spec: SceneSpec
    graph: ViewGraph
    keypoints: dict[int, np.ndarray]
    priors: tuple[SensorPrior, ...]
    truth: GroundTruth


@dataclass(frozen=True)
class MetricsReport:
    n_registered: int
    n_points: int
    mean_track_length: float
    rmse_px: float
    ate: float | None
    runtimes: dict[str, float] = field(default_factory=dict)


def look_at_pose(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=float)
    f = np.asarray(target, dtype=float) - center
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ValueError("look-at target coincides with the camera center")
    z = f / nf
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_center(R, center)


def _trajectory_centers(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_cameras
    if spec.trajectory == "ring":
        t = 2 * np.pi * np.arange(n) / n
        return np.stack([10.0 * np.cos(t), 10.0 * np.sin(t), np.zeros(n)], axis=1)
    if spec.trajectory == "line":
        return np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], axis=1)
    if spec.trajectory == "figure-eight":
        # lemniscate of Gerono, scaled so consecutive spacing is close to 1
        A = max(n / 6.0, 4.0)
        t = 2 * np.pi * np.arange(n) / n
        return np.stack([A * np.sin(t), 0.5 * A * np.sin(2 * t), np.zeros(n)], axis=1)
    # random walk: smoothed unit steps in the plane with mild z wobble
    steps = np.zeros((n, 3))
    d = np.array([1.0, 0.0, 0.0])
    for k in range(1, n):
        d = d + 0.18 * rng.normal(size=3) * np.array([1.0, 1.0, 0.12])
        d /= np.linalg.norm(d)
        steps[k] = d
    return np.cumsum(steps, axis=0)


def _is_cyclic(trajectory: str) -> bool:
    return trajectory in ("ring", "figure-eight")


def _scene_points(spec: SceneSpec, centers: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if spec.trajectory == "ring":
        # ball around the common look-at target
        v = rng.normal(size=(spec.n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = 4.0 * rng.uniform(0.05, 1.0, size=spec.n_points) ** (1.0 / 3.0)
        return v * r[:, None]
    if spec.trajectory == "line":
        n = spec.n_cameras
        x = rng.uniform(-3.0, n + 2.0, size=spec.n_points)
        y = rng.uniform(-3.0, 3.0, size=spec.n_points)
        z = rng.uniform(6.0, 12.0, size=spec.n_points)
        return np.stack([x, y, z], axis=1)
    # corridor trajectories: tube of points along the (closed or open) path
    path = centers
    if not _is_cyclic(spec.trajectory):
        # extend past the open end so the last cameras still look at structure
        tail_dir = centers[-1] - centers[-2]
        ext = centers[-1][None, :] + np.arange(1, 7)[:, None] * tail_dir[None, :]
        path = np.vstack([centers, ext])
    t = rng.uniform(0.0, 1.0, size=spec.n_points)
    idx = t * (len(path) - (0 if _is_cyclic(spec.trajectory) else 1))
    lo = np.floor(idx).astype(int) % len(path)
    hi = (lo + 1) % len(path)
    frac = (idx - np.floor(idx))[:, None]
    base = path[lo] * (1 - frac) + path[hi] * frac
    return base + rng.normal(size=(spec.n_points, 3)) * _TUBE_SIGMA


def _camera_poses(spec: SceneSpec, centers: np.ndarray) -> dict[int, Pose]:
    n = spec.n_cameras
    poses = {}
    if spec.trajectory == "ring":
        for k in range(n):
            poses[k] = look_at_pose(centers[k], np.zeros(3))
        return poses
    if spec.trajectory == "line":
        for k in range(n):
            poses[k] = look_at_pose(centers[k], centers[k] + np.array([0.0, 0.0, 8.0]), up=(0, -1, 0))
        return poses
    for k in range(n):
        # look at the centroid of the next few path samples; tolerant of curvature
        if _is_cyclic(spec.trajectory):
            ahead = centers[[(k + d) % n for d in range(1, 5)]]
        else:
            ahead = centers[[min(k + d, n - 1) for d in range(1, 5)]]
        target = ahead.mean(axis=0)
        if np.linalg.norm(target - centers[k]) < 1e-9:
            target = centers[k] + (centers[k] - centers[k - 1] if k > 0 else np.array([1.0, 0, 0]))
        poses[k] = look_at_pose(centers[k], target)
    return poses


def _visibility(camera: Camera, pose: Pose, points: np.ndarray, max_angle_deg: float):
    """Exact pixels plus a visibility mask (frustum, near plane, view angle)."""
    Xc = points @ pose.R.T + pose.t
    z = Xc[:, 2]
    ok = z > _NEAR_PLANE
    safe = np.where(ok, z, 1.0)
    u = camera.fx * Xc[:, 0] / safe + camera.cx
    v = camera.fy * Xc[:, 1] / safe + camera.cy
    uv = np.stack([u, v], axis=1)
    ok &= camera.contains(uv)
    ray = np.linalg.norm(Xc, axis=1)
    cos_view = np.where(ray > 0, z / np.maximum(ray, 1e-12), -1.0)
    ok &= cos_view >= np.cos(np.deg2rad(max_angle_deg))
    return uv, ok


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Build the full synthetic capture for a spec. Deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_cameras
    camera = Camera(
        spec.focal,
        spec.focal,
        (spec.image_width - 1) / 2.0,
        (spec.image_height - 1) / 2.0,
        spec.image_width,
        spec.image_height,
    )
    centers = _trajectory_centers(spec, rng)
    points = _scene_points(spec, centers, rng)
    poses = _camera_poses(spec, centers)

    degenerate_ids: list[int] = []
    if spec.degenerate_image_count > 0:
        # plant an exactly collinear run of points through the viewed region
        if spec.trajectory == "ring":
            anchor, axis_hint = np.zeros(3), rng.normal(size=3)
        else:
            anchor = centers[len(centers) // 2] + np.array([0.0, 0.0, 1.0])
            axis_hint = centers[min(len(centers) // 2 + 3, n - 1)] - centers[len(centers) // 2]
            anchor = anchor if spec.trajectory != "line" else np.array([n / 2.0, 0.0, 9.0])
            axis_hint = axis_hint + rng.normal(size=3) * 0.1
        axis = axis_hint / np.linalg.norm(axis_hint)
        span = np.linspace(-2.0, 2.0, _LINE_POINTS)
        line_pts = anchor[None, :] + span[:, None] * axis[None, :]
        points = np.vstack([points, line_pts])
        step = max(n // (spec.degenerate_image_count + 1), 1)
        degenerate_ids = [(k + 1) * step % n for k in range(spec.degenerate_image_count)]
        degenerate_ids = sorted(set(degenerate_ids))

    line_ids = set(range(spec.n_points, len(points)))

    visible: dict[int, np.ndarray] = {}
    exact_px: dict[int, np.ndarray] = {}
    for i in range(n):
        uv, ok = _visibility(camera, poses[i], points, spec.max_view_angle_deg)
        ids = np.nonzero(ok)[0]
        if i in degenerate_ids:
            ids = np.array([p for p in ids if p in line_ids], dtype=int)
        visible[i] = ids
        exact_px[i] = uv[ids]

    # noisy keypoints, consumed in image-id order for determinism
    keypoints = {}
    for i in range(n):
        noise = rng.uniform(-0.5, 0.5, size=exact_px[i].shape) * spec.pixel_noise
        keypoints[i] = exact_px[i] + noise

    kp_of: dict[int, dict[int, int]] = {
        i: {int(p): k for k, p in enumerate(visible[i])} for i in range(n)
    }

    def shared(i, j):
        return sorted(set(map(int, visible[i])) & set(map(int, visible[j])))

    pairs: list[tuple[int, int]] = []
    cyclic = _is_cyclic(spec.trajectory)
    for i in range(n):
        for w in range(1, spec.neighbor_window + 1):
            j = i + w
            if j < n:
                pairs.append((i, j))
            elif cyclic and (j % n) != i and ((j % n), i) not in pairs:
                pairs.append(edge_key(i, j % n))
    pairs = sorted(set(pairs))
    window_set = set(pairs)

    candidates = []
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in window_set:
                continue
            if len(shared(i, j)) >= spec.min_shared_points:
                candidates.append((i, j))
    n_chords = min(int(round(spec.chord_fraction * n)), len(candidates))
    if n_chords > 0:
        pick = rng.choice(len(candidates), size=n_chords, replace=False)
        pairs.extend(candidates[k] for k in sorted(pick))
    pairs = sorted(set(pairs))

    edges: dict[tuple[int, int], TwoViewEdge] = {}
    for i, j in pairs:
        ids = shared(i, j)
        if len(ids) < spec.min_shared_points:
            continue
        R_ij, direction = relative_pose(poses[i], poses[j])
        if direction is None:
            continue
        matches = np.array([[kp_of[i][p], kp_of[j][p]] for p in ids], dtype=np.int64)
        edges[(i, j)] = TwoViewEdge(i, j, R_ij, direction, matches, len(matches))

    # plant wrong matches (replace the j-side keypoint with a wrong one)
    outlier_matches: set[tuple[int, int, int, int]] = set()
    if spec.outlier_match_fraction > 0:
        for key in sorted(edges):
            e = edges[key]
            m = len(e.matches)
            k = int(round(spec.outlier_match_fraction * m))
            if k == 0:
                continue
            rows = rng.choice(m, size=k, replace=False)
            matches = e.matches.copy()
            n_kp_j = len(keypoints[e.j])
            for r in sorted(rows):
                true_kj = matches[r, 1]
                wrong = int(rng.integers(0, n_kp_j - 1))
                if wrong >= true_kj:
                    wrong += 1  # anything but the true correspondence
                matches[r, 1] = wrong
                outlier_matches.add((e.i, e.j, int(matches[r, 0]), wrong))
            edges[key] = replace(e, matches=matches, weight=len(matches))

    # plant corrupted edges (rotation off by >= 30 degrees, random direction)
    outlier_edges: set[tuple[int, int]] = set()
    if spec.outlier_edge_fraction > 0:
        keys = sorted(edges)
        k = int(round(spec.outlier_edge_fraction * len(keys)))
        if k > 0:
            pick = rng.choice(len(keys), size=k, replace=False)
            for idx in sorted(pick):
                key = keys[idx]
                e = edges[key]
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                angle = np.deg2rad(rng.uniform(30.0, 180.0))
                bad_R = so3_exp(axis * angle) @ e.rotation
                bad_d = rng.normal(size=3)
                bad_d /= np.linalg.norm(bad_d)
                # a wrong two-view geometry never verifies as many matches
                # as the true one, so the edge arrives with a smaller weight
                bad_w = e.weight * rng.uniform(0.3, 0.7)
                edges[key] = replace(e, rotation=bad_R, direction=bad_d, weight=bad_w)
                outlier_edges.add(key)

    # sensor priors on consecutive capture pairs
    priors = []
    for i in range(n - 1):
        R_s = poses[i + 1].R @ poses[i].R.T
        t_s = poses[i + 1].t - R_s @ poses[i].t
        if spec.sensor_rot_noise_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            R_s = so3_exp(axis * np.deg2rad(abs(rng.normal()) * spec.sensor_rot_noise_deg)) @ R_s
        if spec.sensor_trans_noise_frac > 0:
            t_s = t_s + rng.normal(size=3) * spec.sensor_trans_noise_frac * np.linalg.norm(t_s)
        dt = rng.uniform(spec.sensor_dt_min_ms, spec.sensor_dt_max_ms)
        priors.append(SensorPrior(i, i + 1, R_s, t_s, float(dt)))

    cams = {i: camera for i in range(n)}
    all_centers = np.stack([poses[i].center for i in range(n)])
    diff = all_centers[:, None, :] - all_centers[None, :, :]
    diameter = float(np.sqrt((diff**2).sum(axis=2)).max())
    truth = GroundTruth(
        poses=poses,
        points=points,
        visible=visible,
        outlier_edges=frozenset(outlier_edges),
        outlier_matches=frozenset(outlier_matches),
        diameter=diameter,
    )
    return SyntheticScene(
        spec=spec,
        graph=ViewGraph(cams, edges),
        keypoints=keypoints,
        priors=tuple(priors),
        truth=truth,
    )


def rotation_alignment_errors(estimated: dict[int, np.ndarray], truth: dict[int, Pose]) -> np.ndarray:
    """Per-camera angular error (radians) after removing the global rotation gauge.

    The gauge is the chordal mean of R_est^T R_true over the common cameras.
    """
    from .geometry import angular_distance, project_rotation

    common = sorted(set(estimated) & set(truth))
    if not common:
        return np.array([])
    D = [estimated[i].T @ truth[i].R for i in common]
    G = project_rotation(np.sum(D, axis=0))
    return np.array([angular_distance(Di, G) for Di in D])


def ate_after_alignment(centers_est: dict[int, np.ndarray], centers_true: dict[int, np.ndarray]) -> float | None:
    """RMS center error after the best-fit similarity, None below 3 cameras."""
    from .align_merge import fit_similarity

    common = sorted(set(centers_est) & set(centers_true))
    if len(common) < 3:
        return None
    src = np.stack([centers_est[i] for i in common])
    dst = np.stack([centers_true[i] for i in common])
    T = fit_similarity(src, dst)
    if T is None:
        return None
    from .geometry import sim3_apply

    res = sim3_apply(T, src) - dst
    return float(np.sqrt((res**2).sum(axis=1).mean()))


def evaluate(recon, scene: SyntheticScene, runtimes: dict[str, float] | None = None) -> MetricsReport:
    """Standard report: registration count, map size, track length, RMSE, ATE."""
    n_reg = len(recon.poses)
    tracks = recon.tracks
    n_points = len(tracks)
    lengths = [t.inlier_count() for t in tracks]
    mean_len = float(np.mean(lengths)) if lengths else 0.0

    sq = []
    cam = None
    for tr in tracks:
        for k, (img, kp) in enumerate(tr.observations):
            if not tr.inliers[k] or img not in recon.poses:
                continue
            cam = scene.graph.cameras[img]
            p = recon.poses[img]
            xc = p.R @ tr.point + p.t
            if xc[2] <= 0:
                continue
            u = cam.fx * xc[0] / xc[2] + cam.cx
            v = cam.fy * xc[1] / xc[2] + cam.cy
            d = scene.keypoints[img][kp]
            sq.append((u - d[0]) ** 2 + (v - d[1]) ** 2)
    rmse = float(np.sqrt(np.mean(sq))) if sq else float("nan")

    ate = ate_after_alignment(
        {i: p.center for i, p in recon.poses.items()},
        {i: p.center for i, p in scene.truth.poses.items()},
    )
    return MetricsReport(
        n_registered=n_reg,
        n_points=n_points,
        mean_track_length=mean_len,
        rmse_px=rmse,
        ate=ate,
        runtimes=dict(runtimes or {}),
    )
