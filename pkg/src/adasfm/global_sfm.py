"""Global reconstruction: averaged rotations, refined directions, positions.

The stage order matters. Rotation averaging is robust on its own, so its
output both filters the view graph and upgrades every edge's translation
direction (re-estimated from matches against the averaged rotations, which
are far more reliable than two-view relative rotations). Sensor priors then
replace drifty consecutive directions and pin the metric scale before the
position solve, strict triangulation builds the point cloud, and a robust
bundle adjustment polishes everything.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ba import bundle_adjust
from .config import GlobalSfmConfig
from .rotation_averaging import filter_edges_by_rotation, rotation_averaging
from .scene import (
    SENSOR,
    GlobalPoses,
    Reconstruction,
    SensorPrior,
    Track,
    TwoViewEdge,
    ViewGraph,
)
from .tracks import build_correspondence_groups, triangulate_tolerant
from .translation_averaging import translation_averaging


@dataclass(frozen=True)
class RefineReport:
    refined: tuple[tuple[int, int], ...]
    unrefined: tuple[tuple[int, int], ...]  # too few usable matches, kept as-is
    degenerate: tuple[tuple[int, int], ...]  # near-pure rotation, direction unreliable


def refine_relative_translation(
    graph: ViewGraph,
    rotations: dict[int, np.ndarray],
    keypoints: dict[int, np.ndarray],
) -> tuple[ViewGraph, RefineReport]:
    """Re-estimate every edge's translation direction from its matches.

    Uses the averaged absolute rotations instead of the edge's own two-view
    rotation: with R_ij pinned, each match (u_i, u_j) constrains t_ij to the
    plane normal (R_ij u_i) x u_j, and the direction falls out of one SVD.
    The sign comes from a cheirality vote (both ray depths positive).
    """
    edges = dict(graph.edges)
    refined, unrefined, degenerate = [], [], []
    for key in sorted(graph.edges):
        e = graph.edges[key]
        i, j = key
        if i not in rotations or j not in rotations or len(e.matches) < 2:
            unrefined.append(key)
            continue
        R_ij = rotations[j] @ rotations[i].T
        ui = graph.cameras[i].normalize(keypoints[i][e.matches[:, 0]])
        uj = graph.cameras[j].normalize(keypoints[j][e.matches[:, 1]])
        ui /= np.linalg.norm(ui, axis=1, keepdims=True)
        uj /= np.linalg.norm(uj, axis=1, keepdims=True)
        a = ui @ R_ij.T
        rows = np.cross(a, uj)
        norms = np.linalg.norm(rows, axis=1)
        usable = norms > 1e-9
        if usable.sum() < 2:
            # rays all parallel after rotation: no baseline signal
            degenerate.append(key)
            continue
        rows = rows[usable] / norms[usable, None]

        # wrong matches can gang up on a spurious common direction that beats
        # the true one in plain least squares, so pick between basins by the
        # median residual (immune up to half the rows being wrong), starting
        # one search from the SVD and one from the edge's stored direction
        def irls(t0):
            t = t0.copy()
            for _ in range(6):
                r = np.abs(rows @ t)
                w = 1.0 / (r + 1e-3)
                _, _, Vt = np.linalg.svd(rows * w[:, None])
                tn = Vt[-1]
                if tn @ t < 0:
                    tn = -tn
                done = np.linalg.norm(tn - t) < 1e-12
                t = tn
                if done:
                    break
            return t

        _, _, Vt = np.linalg.svd(rows)
        candidates = [Vt[-1], irls(Vt[-1])]
        stored = np.asarray(e.direction, dtype=float)
        sn = np.linalg.norm(stored)
        if sn > 1e-12:
            candidates += [stored / sn, irls(stored / sn)]
        meds = [float(np.median(np.abs(rows @ c))) for c in candidates]
        t = candidates[int(np.argmin(meds))]
        # inlier-only refit sharpens the winner
        tol = max(3.0 * min(meds), 1e-4)
        inl = np.abs(rows @ t) <= tol
        if inl.sum() >= 2:
            _, _, Vt = np.linalg.svd(rows[inl])
            tn = Vt[-1]
            t = tn if tn @ t >= 0 else -tn

        # cheirality: solve lam * (R u_i) + t ~ mu * u_j per match, count the
        # sign of t that puts both depths in front
        av, bv = a[usable], uj[usable]
        votes = 0
        aa = (av * av).sum(axis=1)
        bb = (bv * bv).sum(axis=1)
        ab = (av * bv).sum(axis=1)
        det = aa * bb - ab * ab
        ok = det > 1e-12
        for sign in (1.0, -1.0):
            tc = sign * t
            at = av @ tc
            bt = bv @ tc
            lam = (ab * bt - bb * at) / np.where(ok, det, 1.0)
            mu = (aa * bt - ab * at) / np.where(ok, det, 1.0)
            good = int(np.sum(ok & (lam > 0) & (mu > 0)))
            votes += good if sign > 0 else -good
        if votes < 0:
            t = -t
        edges[key] = replace(e, direction=t)
        refined.append(key)
    report = RefineReport(tuple(refined), tuple(unrefined), tuple(degenerate))
    return ViewGraph(graph.cameras, edges), report


@dataclass(frozen=True)
class AugmentReport:
    replaced: tuple[tuple[int, int], ...]
    added: tuple[tuple[int, int], ...]
    rejected: tuple[tuple[int, int, str], ...]


def augment_view_graph(
    graph: ViewGraph,
    priors: tuple[SensorPrior, ...],
    max_dt_ms: float = 500.0,
) -> tuple[ViewGraph, dict[tuple[int, int], float], AugmentReport]:
    """Fold short-interval sensor odometry into the view graph.

    Accepted priors overwrite the translation direction of their consecutive
    edge (the averaged visual rotation stays; short-baseline two-view
    directions are the weak link, not rotations) and contribute the metric
    baseline length to the returned scale table. Pairs without a visual edge
    get a new sensor-only edge. Non-consecutive or stale priors are rejected
    and reported rather than silently ignored.
    """
    edges = dict(graph.edges)
    scales: dict[tuple[int, int], float] = {}
    replaced, added, rejected = [], [], []
    for p in priors:
        key = (p.i, p.j)
        if p.j != p.i + 1:
            rejected.append((p.i, p.j, "non-consecutive"))
            continue
        if p.dt_ms > max_dt_ms:
            rejected.append((p.i, p.j, "stale"))
            continue
        if p.i not in graph.cameras or p.j not in graph.cameras:
            rejected.append((p.i, p.j, "unknown-image"))
            continue
        length = float(np.linalg.norm(p.translation))
        if length < 1e-12:
            rejected.append((p.i, p.j, "zero-baseline"))
            continue
        direction = p.translation / length
        scales[key] = length
        if key in edges:
            edges[key] = replace(edges[key], direction=direction, source=SENSOR)
            replaced.append(key)
        else:
            edges[key] = TwoViewEdge(
                p.i, p.j, p.rotation, direction,
                np.zeros((0, 2), dtype=int), 0, source=SENSOR,
            )
            added.append(key)
    report = AugmentReport(tuple(replaced), tuple(added), tuple(rejected))
    return ViewGraph(graph.cameras, edges), scales, report


def triangulate_graph(
    graph: ViewGraph,
    poses: dict[int, np.ndarray] | dict,
    keypoints: dict[int, np.ndarray],
    min_angle_deg: float,
    max_reproj_px: float = 4.0,
) -> tuple[Track, ...]:
    """Triangulate every multi-view correspondence group against the poses.

    Wrong matches chain observations of different points into one group, so
    each group is fit tolerantly: inconsistent observations are flagged out
    and the consensus survives. Without this the global model starves under
    match corruption and bundle adjustment has nothing to hold cameras with.
    """
    tracks = []
    for group in build_correspondence_groups(graph):
        fit = triangulate_tolerant(group, poses, graph.cameras, keypoints, min_angle_deg, max_reproj_px)
        if fit is None:
            continue
        X, verdict = fit
        obs = tuple((i, k) for i, k in group if i in poses)
        inl = np.array([verdict[i] for i, _ in obs], dtype=bool)
        tracks.append(Track(X, obs, inl))
    return tuple(tracks)


def global_bundle_adjust(
    poses: dict,
    tracks: tuple[Track, ...],
    cameras: dict,
    keypoints: dict[int, np.ndarray],
    cfg: GlobalSfmConfig,
):
    """Robust BA over the whole scene in the canonical normalized frame."""
    obs = []
    support: dict[int, int] = {img: 0 for img in poses}
    for k, tr in enumerate(tracks):
        for o, (img, kp) in enumerate(tr.observations):
            if tr.inliers[o] and img in poses:
                uv = keypoints[img][kp]
                obs.append([img, k, uv[0], uv[1]])
                support[img] += 1
    points = np.stack([tr.point for tr in tracks]) if tracks else np.zeros((0, 3))
    # a camera with next to no image support would drift to whatever zeroes
    # its few residuals; hold it at its averaged pose instead
    anchored = tuple(img for img, n in sorted(support.items()) if n < cfg.ba_min_camera_obs)
    result = bundle_adjust(
        poses, points, np.asarray(obs, dtype=float), cameras,
        huber_px=cfg.ba_huber_px,
        max_inner=cfg.ba_max_inner,
        max_outer=cfg.ba_max_outer,
        filter_px=cfg.ba_filter_px,
        filter_stop_frac=cfg.ba_filter_stop_frac,
        renormalize=True,
        fixed=anchored,
    )
    # push the filter decisions back onto the tracks
    rows = np.asarray(obs, dtype=float).reshape(-1, 4)
    keep_flags: dict[int, dict[int, bool]] = {}
    for row, ok in zip(rows, result.inlier_mask):
        keep_flags.setdefault(int(row[1]), {})[int(row[0])] = bool(ok)
    rebuilt = []
    for k, tr in enumerate(tracks):
        per_img = keep_flags.get(k, {})
        inl = np.array(
            [tr.inliers[o] and per_img.get(img, False) for o, (img, _) in enumerate(tr.observations)],
            dtype=bool,
        )
        if inl.sum() >= 2:
            rebuilt.append(Track(result.points[k], tr.observations, inl))
    return result, tuple(rebuilt)


@dataclass(frozen=True)
class GlobalSfmResult:
    reconstruction: Reconstruction  # bundle-adjusted, canonical frame
    positions: GlobalPoses  # position-solver output, metric when seeded
    graph: ViewGraph  # filtered + refined + augmented
    metric_scales: dict[tuple[int, int], float]
    rotation_weights: dict[tuple[int, int], float]
    refine_report: RefineReport
    augment_report: AugmentReport
    timings: dict[str, float] = field(default_factory=dict)


def run_global_sfm(
    graph: ViewGraph,
    keypoints: dict[int, np.ndarray],
    priors: tuple[SensorPrior, ...],
    cfg: GlobalSfmConfig,
) -> GlobalSfmResult:
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    rot = rotation_averaging(graph, cfg)
    timings["rotation_averaging"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    filtered = filter_edges_by_rotation(graph, rot.rotations, cfg)
    timings["edge_filter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    refined, refine_report = refine_relative_translation(filtered, rot.rotations, keypoints)
    timings["refine_translation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    augmented, scales, augment_report = augment_view_graph(refined, priors, cfg.prior_max_dt_ms)
    timings["augment"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    positions = translation_averaging(augmented, rot.rotations, cfg, metric_scales=scales)
    timings["translation_averaging"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tracks = triangulate_graph(
        augmented, positions.poses, keypoints, cfg.min_triangulation_deg, cfg.ba_filter_px
    )
    timings["triangulation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ba_result, final_tracks = global_bundle_adjust(
        positions.poses, tracks, augmented.cameras, keypoints, cfg
    )
    timings["bundle_adjust"] = time.perf_counter() - t0

    recon = Reconstruction(ba_result.poses, final_tracks, frame="global")
    return GlobalSfmResult(
        reconstruction=recon,
        positions=positions,
        graph=augmented,
        metric_scales=scales,
        rotation_weights=rot.robust_weights,
        refine_report=refine_report,
        augment_report=augment_report,
        timings=timings,
    )
