"""Sim(3) alignment of partition reconstructions and their merge.

Each partition is reconstructed in its own gauge. This module brings every
partition into the reference frame of the coarse global model by fitting a
similarity over the camera centers the two share, with an inlier threshold
that adapts until the consensus ratio lands in a target band. The aligned
partitions are then merged: duplicate cameras resolved, tracks fused by
shared observations, and (optionally) the whole model bundle adjusted.

Thresholds are expressed in a normalized copy of the reference frame whose
camera centers have unit RMS spread, so the default threshold schedule means
the same thing regardless of scene scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ba import bundle_adjust
from .config import AlignmentConfig
from .geometry import (
    Camera,
    Pose,
    Sim3Transform,
    sim3_apply,
    sim3_compose,
    sim3_inverse,
    sim3_transform_pose,
)
from .scene import Reconstruction, Track

__all__ = [
    "AlignmentOutcome",
    "MergeResult",
    "adaptive_align",
    "estimate_sim3_ransac",
    "fit_similarity",
    "merge_reconstructions",
]


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> Sim3Transform | None:
    """Least-squares similarity T with dst ~ T(src), None when degenerate.

    Closed form via SVD of the cross-covariance with the usual sign fix, so
    the rotation is proper even for reflected configurations. Degenerate
    means fewer than 3 points, a collinear source (rotation about the line
    is unobservable), or a non-positive scale.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src/dst must pair up")
    n = len(src)
    if n < 3:
        return None
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        return None
    S = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(S)
    sign = np.sign(np.linalg.det(U @ Vt)) or 1.0
    E = np.array([1.0, 1.0, sign])
    R = U @ np.diag(E) @ Vt
    var_s = float((xs**2).sum()) / n
    s = float(D @ E) / var_s
    if not s > 0.0:
        return None
    return Sim3Transform(s, R, mu_d - s * (R @ mu_s))


def estimate_sim3_ransac(
    src: np.ndarray,
    dst: np.ndarray,
    tau_inlier: float,
    *,
    iters: int = 256,
    rng: np.random.Generator | None = None,
) -> tuple[Sim3Transform, np.ndarray] | None:
    """RANSAC similarity from paired centers, minimal sample size 3.

    A pair is an inlier when the transported source point lands within
    ``tau_inlier`` of its destination. The winning minimal model is refit on
    its consensus set and the mask recomputed. Returns None when fewer than
    3 pairs exist or every sample was degenerate.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        return None
    rng = rng if rng is not None else np.random.default_rng(0)

    best: tuple[int, float, Sim3Transform] | None = None
    for _ in range(iters):
        pick = rng.choice(n, size=3, replace=False)
        T = fit_similarity(src[pick], dst[pick])
        if T is None:
            continue
        err = np.linalg.norm(sim3_apply(T, src) - dst, axis=1)
        mask = err < tau_inlier
        count = int(mask.sum())
        if count < 3:
            continue
        mean_err = float(err[mask].mean())
        if best is None or (count, -mean_err) > (best[0], -best[1]):
            best = (count, mean_err, T)
        if count == n:
            break
    if best is None:
        return None

    T = best[2]
    mask = np.linalg.norm(sim3_apply(T, src) - dst, axis=1) < tau_inlier
    refit = fit_similarity(src[mask], dst[mask])
    if refit is not None:
        T = refit
        mask = np.linalg.norm(sim3_apply(T, src) - dst, axis=1) < tau_inlier
    return T, mask


@dataclass(frozen=True)
class AlignmentOutcome:
    """One partition's similarity into the reference frame.

    ``transform`` is in raw reference-frame units; ``tau_trace`` records the
    threshold used by each estimation round (normalized units).
    ``low_confidence`` marks runs that never reached the target ratio.
    """

    transform: Sim3Transform
    inlier_ratio: float
    common_images: tuple[int, ...]
    inlier_mask: np.ndarray
    tau_trace: tuple[float, ...]
    iterations: int
    low_confidence: bool


def _reference_centers(global_poses) -> dict[int, np.ndarray]:
    poses = global_poses.poses if hasattr(global_poses, "poses") else global_poses
    return {i: p.center for i, p in poses.items()}


def adaptive_align(
    local: Reconstruction,
    global_poses,
    cfg: AlignmentConfig = AlignmentConfig(),
) -> AlignmentOutcome:
    """Align one partition to the reference poses, adapting the threshold.

    The threshold walk: estimate at the current tau, grow it by
    ``alpha_inc`` while the inlier ratio is below ``r_min``, shrink once by
    ``alpha_dec`` if the ratio reached ``r_max``, stop as soon as the ratio
    clears ``r_min`` or the iteration budget runs out. Budget exhaustion
    returns the best ratio seen, flagged low-confidence.

    Each estimation round reseeds its RANSAC from ``cfg.seed`` so the tau
    trace is a pure function of the inputs and replays identically.
    """
    ref = _reference_centers(global_poses)
    common = tuple(sorted(set(local.poses) & set(ref)))
    if len(common) < cfg.min_common:
        raise ValueError(
            f"need at least {cfg.min_common} common registered images to align, "
            f"got {len(common)}")

    src = np.stack([local.poses[i].center for i in common])
    dst_raw = np.stack([ref[i] for i in common])

    # thresholds live in a unit-spread copy of the reference frame
    all_ref = np.stack(list(ref.values()))
    mu = all_ref.mean(axis=0)
    rms = float(np.sqrt(((all_ref - mu) ** 2).sum(axis=1).mean()))
    if not rms > 0.0:
        rms = 1.0
    norm = Sim3Transform(1.0 / rms, np.eye(3), -mu / rms)
    dst = sim3_apply(norm, dst_raw)

    tau = cfg.tau_init
    ratio = 0.0
    rounds = 0
    trace: list[float] = []
    last: tuple[Sim3Transform, np.ndarray] | None = None
    best: tuple[float, Sim3Transform, np.ndarray] | None = None
    while ratio < cfg.r_min and rounds < cfg.max_iters:
        rounds += 1
        trace.append(tau)
        est = estimate_sim3_ransac(
            src, dst, tau, iters=cfg.ransac_iters,
            rng=np.random.default_rng(cfg.seed))
        if est is None:
            raise ValueError("common camera centers are degenerate, cannot align")
        T_n, mask = est
        ratio = float(mask.mean())
        last = (T_n, mask)
        if best is None or ratio > best[0]:
            best = (ratio, T_n, mask)
        if ratio < cfg.r_min:
            tau += cfg.alpha_inc
        elif ratio >= cfg.r_max:
            tau -= cfg.alpha_dec

    low_confidence = ratio < cfg.r_min
    if low_confidence:
        ratio, T_n, mask = best
    else:
        T_n, mask = last
    return AlignmentOutcome(
        transform=sim3_compose(sim3_inverse(norm), T_n),
        inlier_ratio=ratio,
        common_images=common,
        inlier_mask=mask,
        tau_trace=tuple(trace),
        iterations=rounds,
        low_confidence=low_confidence,
    )


@dataclass(frozen=True)
class MergeResult:
    """Merged model plus bookkeeping.

    ``owners`` maps each image to the partition whose pose it kept.
    ``inconsistencies`` lists (image, partitions, center gap) for duplicate
    cameras whose aligned centers disagree far beyond the typical alignment
    residual; they stay registered but are reported.
    """

    reconstruction: Reconstruction
    owners: dict[int, int]
    inconsistencies: tuple[tuple[int, tuple[int, ...], float], ...]
    ba_cost_history: tuple[float, ...] = ()


def _transform_tracks(rec: Reconstruction, T: Sim3Transform) -> list[Track]:
    return [
        Track(sim3_apply(T, tr.point), tr.observations, tr.inliers)
        for tr in rec.tracks
    ]


def merge_reconstructions(
    locals_: list[Reconstruction],
    transforms,
    global_poses=None,
    *,
    cameras: dict[int, Camera] | None = None,
    keypoints: dict[int, np.ndarray] | None = None,
    final_ba: bool = False,
    ba_inner: int = 20,
    ba_huber_px: float = 4.0,
) -> MergeResult:
    """Fuse aligned partitions into one reconstruction.

    Every image any partition registered stays registered. Duplicates keep
    the pose from the partition observing them through the most inlier track
    observations (tie: lower partition index). Tracks that share an
    (image, keypoint) observation across partitions collapse into one, with
    first-claim-wins de-duplication per image. ``final_ba`` polishes the
    merged model and requires ``cameras`` and ``keypoints``.
    """
    if len(transforms) != len(locals_):
        raise ValueError("one transform per local reconstruction required")
    Ts = [t.transform if isinstance(t, AlignmentOutcome) else t for t in transforms]

    moved: list[dict[int, Pose]] = []
    obs_count: list[dict[int, int]] = []
    for rec, T in zip(locals_, Ts):
        moved.append({i: sim3_transform_pose(T, p) for i, p in rec.poses.items()})
        cnt = dict.fromkeys(rec.poses, 0)
        for tr in rec.tracks:
            for k, (img, _) in enumerate(tr.observations):
                if tr.inliers[k]:
                    cnt[img] = cnt.get(img, 0) + 1
        obs_count.append(cnt)

    owners: dict[int, int] = {}
    for k, pk in enumerate(moved):
        for img in pk:
            cur = owners.get(img)
            if cur is None or obs_count[k].get(img, 0) > obs_count[cur].get(img, 0):
                owners[img] = k
    poses = {img: moved[k][img] for img, k in owners.items()}

    # duplicate-camera disagreement, judged against the alignment residuals
    residuals: list[float] = []
    if global_poses is not None:
        ref = _reference_centers(global_poses)
        for k, rec in enumerate(locals_):
            for img in rec.poses:
                if img in ref:
                    residuals.append(float(np.linalg.norm(moved[k][img].center - ref[img])))
    gaps: dict[int, tuple[float, tuple[int, ...]]] = {}
    for img in owners:
        ks = tuple(k for k in range(len(moved)) if img in moved[k])
        if len(ks) < 2:
            continue
        C = np.stack([moved[k][img].center for k in ks])
        gap = 0.0
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                gap = max(gap, float(np.linalg.norm(C[a] - C[b])))
        gaps[img] = (gap, ks)
    if not residuals:
        residuals = [g for g, _ in gaps.values()]
    med = float(np.median(residuals)) if residuals else 0.0
    all_c = np.stack([p.center for p in poses.values()])
    spread = float(np.sqrt(((all_c - all_c.mean(axis=0)) ** 2).sum(axis=1).mean()))
    # exact inputs give a ~0 median; the floor keeps roundoff from flagging
    threshold = 5.0 * max(med, 1e-9 * max(spread, 1.0))
    inconsistencies = tuple(
        (img, ks, gap) for img, (gap, ks) in sorted(gaps.items()) if gap > threshold)

    # union tracks that share an observation
    members: list[tuple[int, int]] = []
    tr_of: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for k, rec in enumerate(locals_):
        for t, tr in enumerate(rec.tracks):
            members.append((k, t))
            for obs in tr.observations:
                tr_of.setdefault(obs, []).append((k, t))
    parent = {m: m for m in members}

    def find(m):
        while parent[m] != m:
            parent[m] = parent[parent[m]]
            m = parent[m]
        return m

    for shared in tr_of.values():
        for other in shared[1:]:
            ra, rb = find(shared[0]), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for m in members:
        groups.setdefault(find(m), []).append(m)

    moved_tracks = [_transform_tracks(rec, T) for rec, T in zip(locals_, Ts)]
    tracks: list[Track] = []
    for root in sorted(groups):
        group = sorted(groups[root])
        lead = max(group, key=lambda m: (moved_tracks[m[0]][m[1]].inlier_count(),
                                         -m[0], -m[1]))
        point = moved_tracks[lead[0]][lead[1]].point
        obs: list[tuple[int, int]] = []
        flags: list[bool] = []
        claimed: set[int] = set()
        for k, t in group:
            tr = moved_tracks[k][t]
            for idx, (img, kp) in enumerate(tr.observations):
                if img in claimed:
                    continue
                claimed.add(img)
                obs.append((img, kp))
                flags.append(bool(tr.inliers[idx]))
        tracks.append(Track(point, tuple(obs), np.array(flags, dtype=bool)))

    merged = Reconstruction(poses, tuple(tracks), frame="global")
    history: tuple[float, ...] = ()
    if final_ba:
        if cameras is None or keypoints is None:
            raise ValueError("final_ba needs cameras and keypoints")
        rows = []
        for t, tr in enumerate(merged.tracks):
            for k, (img, kp) in enumerate(tr.observations):
                if tr.inliers[k]:
                    uv = keypoints[img][kp]
                    rows.append((img, t, uv[0], uv[1]))
        if rows:
            pts = np.stack([tr.point for tr in merged.tracks])
            result = bundle_adjust(
                dict(merged.poses), pts, np.array(rows, dtype=float), cameras,
                huber_px=ba_huber_px, max_inner=ba_inner)
            tracks = [
                Track(result.points[t], tr.observations, tr.inliers)
                for t, tr in enumerate(merged.tracks)
            ]
            merged = Reconstruction(result.poses, tuple(tracks), frame="global")
            history = result.cost_history[0] if result.cost_history else ()
    return MergeResult(merged, owners, inconsistencies, history)
