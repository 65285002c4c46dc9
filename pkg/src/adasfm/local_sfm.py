"""Incremental reconstruction of one partition, regularized by pose priors.

The engine seeds from a well-conditioned two-view pair, then grows by
registering batches of images against the current 3D points. Every image
gets two pose hypotheses: P3P resection from 2D-3D matches, and a pose
composed from already-registered neighbors through the prior poses. The
hypothesis with more reprojection inliers wins, which is what lets images
with degenerate 2D-3D geometry (where resection collapses) still register.
Bundle adjustment runs with soft relative-pose terms on the view-graph
edges so small per-step errors cannot accumulate along the partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import BAResult, PosePairPrior, bundle_adjust
from .config import LocalSfmConfig
from .geometry import Camera, Pose, project_points, project_rotation, so3_exp, so3_log
from .scene import Reconstruction, Track, ViewGraph
from .tracks import triangulate_tolerant


# ---------------------------------------------------------------------------
# P3P resection


def p3p_solutions(world: np.ndarray, rays: np.ndarray) -> list[Pose]:
    """Candidate camera poses from three 2D-3D correspondences.

    ``world`` is (3, 3) world points, ``rays`` the matching (3, 3) unit
    bearing vectors in the camera frame. Solves the three-triangle depth
    system: with depths s1, u*s1, v*s1 the pairwise distance constraints
    reduce to two quadratics in u whose resultant is a quartic in v. Real
    positive roots give depths, and a rigid fit of the three camera-frame
    points onto the world points yields each pose. Up to four solutions;
    the caller disambiguates with extra correspondences.
    """
    P1, P2, P3 = world
    d12 = np.linalg.norm(P1 - P2)
    d13 = np.linalg.norm(P1 - P3)
    d23 = np.linalg.norm(P2 - P3)
    if min(d12, d13, d23) < 1e-12:
        return []
    c12 = float(rays[0] @ rays[1])
    c13 = float(rays[0] @ rays[2])
    c23 = float(rays[1] @ rays[2])

    K1 = (d13 / d12) ** 2
    K2 = (d23 / d13) ** 2

    # two quadratics in u with coefficients polynomial in v (descending)
    a1 = np.array([K1])
    b1 = np.array([-2.0 * K1 * c12])
    c1 = np.array([-1.0, 2.0 * c13, K1 - 1.0])
    a2 = np.array([1.0])
    b2 = np.array([-2.0 * c23, 0.0])
    c2 = np.array([1.0 - K2, 2.0 * K2 * c13, -K2])

    # resultant of the pair eliminates u, leaving a quartic in v
    ac = np.polysub(np.polymul(a1, c2), np.polymul(a2, c1))
    ab = np.polysub(np.polymul(a1, b2), np.polymul(a2, b1))
    bc = np.polysub(np.polymul(b1, c2), np.polymul(b2, c1))
    quartic = np.polysub(np.polymul(ac, ac), np.polymul(ab, bc))
    if np.max(np.abs(quartic)) < 1e-18:
        return []

    poses = []
    for root in np.roots(quartic):
        if abs(root.imag) > 1e-8 * (1.0 + abs(root.real)) or root.real <= 1e-12:
            continue
        v = float(root.real)
        den = float(np.polyval(ab, v))
        num = float(np.polyval(ac, v))
        if abs(den) < 1e-14:
            continue
        u = -num / den
        if u <= 1e-12:
            continue
        base = 1.0 + u * u - 2.0 * u * c12
        if base <= 1e-14:
            continue
        s1 = d12 / np.sqrt(base)
        depths = np.array([s1, u * s1, v * s1])
        if np.any(depths <= 0):
            continue
        Q = depths[:, None] * rays
        Pc = world.mean(axis=0)
        Qc = Q.mean(axis=0)
        H = (world - Pc).T @ (Q - Qc)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(Vt.T @ U.T)))])
        R = Vt.T @ D @ U.T
        poses.append(Pose(project_rotation(R), Qc - R @ Pc))
    return poses


def refine_resection(
    pose: Pose,
    camera: Camera,
    world: np.ndarray,
    pixels: np.ndarray,
    iters: int = 15,
) -> Pose:
    """Gauss-Newton polish of a single camera pose over fixed 3D points."""
    R, t = pose.R.copy(), pose.t.copy()
    world = np.asarray(world, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    K = np.array([camera.fx, camera.fy])
    pp = np.array([camera.cx, camera.cy])
    best_cost = np.inf
    best = (R, t)
    for _ in range(iters):
        Xc = world @ R.T + t
        z = Xc[:, 2]
        ok = z > 1e-9
        if ok.sum() < 3:
            break
        Xc = Xc[ok]
        z = Xc[:, 2]
        uv = K * Xc[:, :2] / z[:, None] + pp
        res = (uv - pixels[ok]).ravel()
        cost = float(res @ res)
        if cost < best_cost:
            best_cost, best = cost, (R.copy(), t.copy())
        A = np.zeros((ok.sum(), 2, 3))
        A[:, 0, 0] = camera.fx / z
        A[:, 0, 2] = -camera.fx * Xc[:, 0] / z**2
        A[:, 1, 1] = camera.fy / z
        A[:, 1, 2] = -camera.fy * Xc[:, 1] / z**2
        RX = Xc - t
        S = np.zeros((ok.sum(), 3, 3))
        S[:, 0, 1] = -RX[:, 2]
        S[:, 0, 2] = RX[:, 1]
        S[:, 1, 0] = RX[:, 2]
        S[:, 1, 2] = -RX[:, 0]
        S[:, 2, 0] = -RX[:, 1]
        S[:, 2, 1] = RX[:, 0]
        Jw = -np.einsum("nab,nbc->nac", A, S)
        J = np.concatenate([Jw, A], axis=2).reshape(-1, 6)
        H = J.T @ J + 1e-9 * np.eye(6)
        g = J.T @ res
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        R = so3_exp(step[:3]) @ R
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-12:
            break
    Xc = world @ best[0].T + best[1]
    z = Xc[:, 2]
    if np.all(z > 1e-9):
        uv = K * Xc[:, :2] / z[:, None] + pp
        res = (uv - pixels).ravel()
        if float(res @ res) <= best_cost:
            return Pose(best[0], best[1])
    return Pose(best[0], best[1])


def estimate_pose_p3p(
    world: np.ndarray,
    pixels: np.ndarray,
    camera: Camera,
    *,
    iters: int = 256,
    inlier_px: float = 8.0,
    min_inliers: int = 4,
    rng: np.random.Generator | None = None,
) -> tuple[Pose, np.ndarray] | None:
    """RANSAC resection: P3P minimal solver, inliers by reprojection.

    Needs at least four correspondences (three to solve, one to pick among
    the quartic's solutions). Samples with collinear world points are
    skipped. The winning pose is polished by Gauss-Newton on its inliers.
    Returns (pose, inlier mask) or None when no pose reaches
    ``min_inliers`` support.
    """
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(world)
    if n < 4:
        return None
    if rng is None:
        rng = np.random.default_rng(0)
    rays = camera.normalize(pixels)
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    scale = float(np.max(np.linalg.norm(world - world.mean(axis=0), axis=1)))
    scale = max(scale, 1e-12)

    best_count = 0
    best_err = np.inf
    best_pose = None
    for _ in range(iters):
        idx = rng.choice(n, size=3, replace=False)
        tri = world[idx]
        area = np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        if area < 1e-9 * scale * scale:
            continue
        for cand in p3p_solutions(tri, rays[idx]):
            uv, depth = project_points(camera, cand, world)
            err = np.linalg.norm(uv - pixels, axis=1)
            inl = (depth > 0) & (err < inlier_px)
            count = int(inl.sum())
            mean_err = float(err[inl].mean()) if count else np.inf
            if count > best_count or (count == best_count and mean_err < best_err):
                best_count, best_err, best_pose = count, mean_err, (cand, inl)
    if best_pose is None or best_count < min_inliers:
        return None
    pose, inl = best_pose
    pose = refine_resection(pose, camera, world[inl], pixels[inl])
    uv, depth = project_points(camera, pose, world)
    err = np.linalg.norm(uv - pixels, axis=1)
    inl = (depth > 0) & (err < inlier_px)
    if int(inl.sum()) < min_inliers:
        return None
    return pose, inl


# ---------------------------------------------------------------------------
# Prior-pose hypothesis


def geodesic_median_so3(rotations: list[np.ndarray], max_iters: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Weiszfeld iteration for the rotation minimizing summed geodesic distance.

    Initialized at the chordal mean. A candidate list with one element (or
    all elements equal) is its own median and returns unchanged.
    """
    R = project_rotation(np.mean(np.stack(rotations), axis=0))
    for _ in range(max_iters):
        vs = np.stack([so3_log(Rk @ R.T) for Rk in rotations])
        ds = np.linalg.norm(vs, axis=1)
        w = 1.0 / np.maximum(ds, 1e-12)
        step = (w[:, None] * vs).sum(axis=0) / w.sum()
        if np.linalg.norm(step) < tol:
            break
        R = so3_exp(step) @ R
    return R


def pose_from_prior(
    image: int,
    neighbors: list[int],
    poses: dict[int, Pose],
    prior_poses: dict[int, Pose],
) -> Pose | None:
    """Compose a pose hypothesis from registered neighbors via prior poses.

    For each neighbor k the prior poses give a relative motion k -> image;
    chaining it through k's current estimate yields one absolute candidate.
    The rotation is the geodesic median of the candidates and the
    translation the per-dimension median, so a minority of bad neighbors
    cannot drag the hypothesis away.
    """
    if image not in prior_poses:
        return None
    cand_R = []
    cand_t = []
    for k in sorted(neighbors):
        if k not in poses or k not in prior_poses:
            continue
        R_ki = prior_poses[image].R @ prior_poses[k].R.T
        t_ki = prior_poses[image].t - R_ki @ prior_poses[k].t
        cand_R.append(R_ki @ poses[k].R)
        cand_t.append(t_ki + R_ki @ poses[k].t)
    if not cand_R:
        return None
    R = geodesic_median_so3(cand_R)
    t = np.median(np.stack(cand_t), axis=0)
    return Pose(R, t)


# ---------------------------------------------------------------------------
# Working state

_NO_TRACK = -1


@dataclass
class RegistrationCandidate:
    """One unregistered image queued for pose estimation.

    ``correspondences`` maps the image's keypoint index to a current track
    id. Hypothesis fields are filled during registration; ``chosen`` ends
    up "p3p", "prior", or "" when both hypotheses failed.
    """

    image: int
    visible_points: int
    correspondences: dict[int, int] = field(default_factory=dict)
    p3p_pose: Pose | None = None
    prior_pose: Pose | None = None
    p3p_inliers: int = 0
    prior_inliers: int = 0
    chosen: str = ""


@dataclass(frozen=True)
class LocalSfmResult:
    reconstruction: Reconstruction
    init_edge: tuple[int, int] | None
    registration_log: tuple[tuple[int, str], ...]  # (image, hypothesis) in order
    unregistered: tuple[int, ...]
    prior_fallback: bool
    ba_cost_history: tuple[tuple[float, ...], ...]
    deferral_counts: dict[int, int]


class _Engine:
    def __init__(
        self,
        graph: ViewGraph,
        keypoints: dict[int, np.ndarray],
        cfg: LocalSfmConfig,
        prior_poses: dict[int, Pose],
    ):
        self.graph = graph
        self.keypoints = keypoints
        self.cfg = cfg
        self.prior = dict(prior_poses)
        self.poses: dict[int, Pose] = {}
        self.points: list[np.ndarray] = []
        self.track_obs: list[dict[int, int]] = []  # per track: image -> keypoint
        self.obs_index: dict[tuple[int, int], int] = {}
        self.pair_pool: list[tuple[tuple[int, int], tuple[int, int]]] = []
        self.failed_groups: set[tuple[tuple[int, int], ...]] = set()
        self.registration_log: list[tuple[int, str]] = []
        self.cost_history: list[tuple[float, ...]] = []
        self.adj: dict[int, list[tuple[int, int]]] = {i: [] for i in graph.cameras}
        for key in sorted(graph.edges):
            i, j = key
            self.adj[i].append(key)
            self.adj[j].append(key)

    # -- bookkeeping ------------------------------------------------------

    def _add_track(self, X: np.ndarray, obs: dict[int, int]) -> None:
        tid = len(self.points)
        self.points.append(np.asarray(X, dtype=float))
        self.track_obs.append(dict(obs))
        for img, kp in obs.items():
            self.obs_index[(img, kp)] = tid

    def _add_observation(self, tid: int, img: int, kp: int) -> None:
        self.track_obs[tid][img] = kp
        self.obs_index[(img, kp)] = tid

    def correspondences(self, image: int) -> dict[int, int]:
        """2D-3D matches for an unregistered image: keypoint -> track id.

        Walks the image's edges to registered neighbors and looks the far
        keypoint up in the track index. First claim wins on both sides so
        no keypoint or track is used twice.
        """
        corr: dict[int, int] = {}
        claimed: set[int] = set()
        for key in self.adj[image]:
            e = self.graph.edges[key]
            other = e.j if e.i == image else e.i
            if other not in self.poses or len(e.matches) == 0:
                continue
            mine = e.matches[:, 0] if e.i == image else e.matches[:, 1]
            theirs = e.matches[:, 1] if e.i == image else e.matches[:, 0]
            for kp_m, kp_o in zip(mine, theirs):
                tid = self.obs_index.get((other, int(kp_o)), _NO_TRACK)
                if tid == _NO_TRACK or int(kp_m) in corr or tid in claimed:
                    continue
                corr[int(kp_m)] = tid
                claimed.add(tid)
        return corr

    def _count_inliers(self, image: int, pose: Pose, corr: dict[int, int]) -> tuple[int, np.ndarray]:
        kps = np.array(sorted(corr), dtype=int)
        world = np.stack([self.points[corr[k]] for k in kps])
        px = self.keypoints[image][kps]
        uv, depth = project_points(self.graph.cameras[image], pose, world)
        err = np.linalg.norm(uv - px, axis=1)
        inl = (depth > 0) & (err < self.cfg.register_inlier_px)
        return int(inl.sum()), kps[inl]

    # -- registration -----------------------------------------------------

    def register_image(self, cand: RegistrationCandidate) -> bool:
        corr = self.correspondences(cand.image)
        cand.correspondences = corr
        cand.visible_points = len(corr)
        if not corr:
            return False
        camera = self.graph.cameras[cand.image]
        kps = np.array(sorted(corr), dtype=int)
        world = np.stack([self.points[corr[k]] for k in kps])
        px = self.keypoints[cand.image][kps]

        if len(corr) >= 4:
            rng = np.random.default_rng([self.cfg.seed, cand.image])
            got = estimate_pose_p3p(
                world, px, camera,
                iters=self.cfg.ransac_iters,
                inlier_px=self.cfg.register_inlier_px,
                rng=rng,
            )
            if got is not None:
                cand.p3p_pose = got[0]

        neighbors = [k for k in self.adj_registered(cand.image)]
        cand.prior_pose = pose_from_prior(cand.image, neighbors, self.poses, self.prior)

        if cand.p3p_pose is not None:
            cand.p3p_inliers, p3p_kps = self._count_inliers(cand.image, cand.p3p_pose, corr)
        if cand.prior_pose is not None:
            cand.prior_inliers, prior_kps = self._count_inliers(cand.image, cand.prior_pose, corr)

        # more reprojection support wins; tie goes to the measured pose
        if cand.p3p_pose is not None and cand.p3p_inliers >= cand.prior_inliers:
            pose, inl_kps, label = cand.p3p_pose, p3p_kps, "p3p"
            count = cand.p3p_inliers
        elif cand.prior_pose is not None and cand.prior_inliers > 0:
            pose, inl_kps, label = cand.prior_pose, prior_kps, "prior"
            count = cand.prior_inliers
        else:
            return False
        # a pose explaining a sliver of the candidate's points is a RANSAC
        # accident, not a registration; defer and wait for better structure
        floor = max(4, int(np.ceil(self.cfg.register_min_inlier_frac * len(corr))))
        if count < floor:
            return False

        cand.chosen = label
        self.poses[cand.image] = pose
        for kp in inl_kps:
            tid = corr[int(kp)]
            if cand.image not in self.track_obs[tid]:
                self._add_observation(tid, cand.image, int(kp))
        self.registration_log.append((cand.image, label))
        return True

    def adj_registered(self, image: int) -> list[int]:
        """Registered images this one shares a registered track with."""
        out = set()
        for key in self.adj[image]:
            e = self.graph.edges[key]
            other = e.j if e.i == image else e.i
            if other not in self.poses or len(e.matches) == 0:
                continue
            theirs = e.matches[:, 1] if e.i == image else e.matches[:, 0]
            for kp_o in theirs:
                if (other, int(kp_o)) in self.obs_index:
                    out.add(other)
                    break
        return sorted(out)

    # -- growing structure -------------------------------------------------

    def absorb_edges(self, image: int) -> None:
        """Pull the matches of a newly registered image into the track pool.

        Matches whose far side already has a track become extension
        attempts (gated by reprojection); matches between two untracked
        keypoints wait in the pool until triangulation groups them.
        """
        for key in self.adj[image]:
            e = self.graph.edges[key]
            other = e.j if e.i == image else e.i
            if other not in self.poses or len(e.matches) == 0:
                continue
            mine = e.matches[:, 0] if e.i == image else e.matches[:, 1]
            theirs = e.matches[:, 1] if e.i == image else e.matches[:, 0]
            for kp_m, kp_o in zip(mine, theirs):
                a = (image, int(kp_m))
                b = (other, int(kp_o))
                ta = self.obs_index.get(a, _NO_TRACK)
                tb = self.obs_index.get(b, _NO_TRACK)
                if ta != _NO_TRACK and tb != _NO_TRACK:
                    continue
                if ta != _NO_TRACK:
                    self._try_extend(ta, b)
                elif tb != _NO_TRACK:
                    self._try_extend(tb, a)
                else:
                    self.pair_pool.append((a, b))

    def _try_extend(self, tid: int, obs: tuple[int, int]) -> None:
        img, kp = obs
        if img in self.track_obs[tid] or img not in self.poses:
            return
        X = self.points[tid].reshape(1, 3)
        uv, depth = project_points(self.graph.cameras[img], self.poses[img], X)
        if depth[0] <= 0:
            return
        if np.linalg.norm(uv[0] - self.keypoints[img][kp]) < self.cfg.tri_max_reproj_px:
            self._add_observation(tid, img, kp)

    def triangulate_new_points(self) -> int:
        """Group the pooled matches and triangulate what is well-conditioned.

        Pairs that fail (low parallax, inconsistent) stay pooled; a later
        registration can link them into a viable group. Groups that would
        observe an image through two keypoints are split by refusing the
        offending union, same policy as the global track builder.
        """
        parent: dict[tuple[int, int], tuple[int, int]] = {}
        payload: dict[tuple[int, int], dict[int, int]] = {}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        pairs = [p for p in self.pair_pool
                 if self.obs_index.get(p[0], _NO_TRACK) == _NO_TRACK
                 and self.obs_index.get(p[1], _NO_TRACK) == _NO_TRACK]
        for a, b in pairs:
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

        added = 0
        for root in sorted(payload):
            group = tuple(sorted(payload[root].items()))
            if len(group) < 2 or group in self.failed_groups:
                continue
            fit = triangulate_tolerant(
                group, self.poses, self.graph.cameras, self.keypoints,
                self.cfg.tri_min_angle_deg, self.cfg.tri_max_reproj_px,
            )
            if fit is None:
                self.failed_groups.add(group)
                continue
            X, verdict = fit
            obs = {img: kp for img, kp in group if verdict.get(img, False)}
            if len(obs) < 2:
                self.failed_groups.add(group)
                continue
            self._add_track(X, obs)
            added += 1
        # tracked endpoints leave the pool; failed groups stay, and are only
        # refit once a new registration links fresh observations into them
        self.pair_pool = [p for p in self.pair_pool
                          if self.obs_index.get(p[0], _NO_TRACK) == _NO_TRACK
                          and self.obs_index.get(p[1], _NO_TRACK) == _NO_TRACK]
        return added

    # -- bundle adjustment --------------------------------------------------

    def _prior_terms(self) -> tuple[PosePairPrior, ...]:
        out = []
        for key in sorted(self.graph.edges):
            e = self.graph.edges[key]
            if e.i in self.poses and e.j in self.poses:
                out.append(PosePairPrior(
                    e.i, e.j, e.rotation, e.direction,
                    self.cfg.lambda_rot, self.cfg.lambda_dir,
                ))
        return tuple(out)

    def bundle(self, max_inner: int, max_outer: int = 2) -> BAResult | None:
        obs = [
            (img, tid, *self.keypoints[img][kp])
            for tid, d in enumerate(self.track_obs)
            for img, kp in sorted(d.items())
        ]
        if not obs or not self.points:
            return None
        result = bundle_adjust(
            self.poses,
            np.stack(self.points),
            np.asarray(obs, dtype=float),
            self.graph.cameras,
            huber_px=self.cfg.ba_huber_px,
            max_inner=max_inner,
            max_outer=max_outer,
            filter_px=self.cfg.ba_filter_px,
            pair_priors=self._prior_terms(),
        )
        self.poses = dict(result.poses)
        self.cost_history.extend(result.cost_history)

        # rebuild tracks from the observations that survived filtering
        kept = [{} for _ in self.points]
        flat = [(img, tid, kp) for tid, d in enumerate(self.track_obs)
                for img, kp in sorted(d.items())]
        for (img, tid, kp), ok in zip(flat, result.inlier_mask):
            if ok:
                kept[tid][img] = kp
        self.points = []
        self.track_obs = []
        self.obs_index = {}
        for tid, obs_d in enumerate(kept):
            if len(obs_d) >= 2:
                self._add_track(result.points[tid], obs_d)
        return result

    # -- export -------------------------------------------------------------

    def reconstruction(self) -> Reconstruction:
        tracks = []
        for X, obs in zip(self.points, self.track_obs):
            items = tuple(sorted(obs.items()))
            tracks.append(Track(X, items, np.ones(len(items), dtype=bool)))
        return Reconstruction(dict(self.poses), tuple(tracks), frame="partition")


# ---------------------------------------------------------------------------
# Seeding


def _triangulate_pair(
    pose_i: Pose, pose_j: Pose,
    cam_i: Camera, cam_j: Camera,
    px_i: np.ndarray, px_j: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint triangulation of matched pixels from two posed cameras.

    Returns (points (n, 3), ray angles in degrees, valid mask). Valid
    needs positive ray parameters on both sides and non-parallel rays.
    """
    o1, o2 = pose_i.center, pose_j.center
    d1 = camera_rays(cam_i, pose_i, px_i)
    d2 = camera_rays(cam_j, pose_j, px_j)
    b = o2 - o1
    c = np.einsum("nd,nd->n", d1, d2)
    den = 1.0 - c * c
    ok = den > 1e-12
    den = np.where(ok, den, 1.0)
    bd1 = d1 @ b
    bd2 = d2 @ b
    l1 = (bd1 - c * bd2) / den
    l2 = (c * bd1 - bd2) / den
    X = 0.5 * (o1 + l1[:, None] * d1 + o2 + l2[:, None] * d2)
    ok &= (l1 > 0) & (l2 > 0)
    angles = np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))
    return X, angles, ok


def camera_rays(camera: Camera, pose: Pose, pixels: np.ndarray) -> np.ndarray:
    """Unit world-frame viewing rays through the given pixels."""
    f = camera.normalize(np.asarray(pixels, dtype=float))
    f = f / np.linalg.norm(f, axis=-1, keepdims=True)
    return f @ pose.R


def initialize_two_view(
    graph: ViewGraph,
    keypoints: dict[int, np.ndarray],
    cfg: LocalSfmConfig,
    prior_poses: dict[int, Pose] | None = None,
) -> tuple[tuple[int, int], dict[int, Pose], list[tuple[np.ndarray, dict[int, int]]]] | None:
    """Pick and triangulate the seed pair for incremental growth.

    Every edge with enough matches is scored by (matches surviving the
    two-view gates) x (median triangulation angle); the best edge seeds
    the frame with its first camera at identity. When prior poses cover
    both cameras the baseline is scaled to the prior distance so poses
    composed from priors later live at a consistent scale. Returns None
    when no edge qualifies, in which case the caller seeds from priors.
    """
    prior_poses = prior_poses or {}
    best = None
    for key in sorted(graph.edges):
        e = graph.edges[key]
        if len(e.matches) < cfg.min_init_matches:
            continue
        scale = 1.0
        if e.i in prior_poses and e.j in prior_poses:
            d = np.linalg.norm(prior_poses[e.i].center - prior_poses[e.j].center)
            if d > 1e-12:
                scale = float(d)
        pose_i = Pose(np.eye(3), np.zeros(3))
        # with C_i at the origin the second translation is the stored unit
        # baseline direction times the chosen metric baseline
        pose_j = Pose(e.rotation, scale * e.direction)
        px_i = keypoints[e.i][e.matches[:, 0]]
        px_j = keypoints[e.j][e.matches[:, 1]]
        X, angles, ok = _triangulate_pair(
            pose_i, pose_j, graph.cameras[e.i], graph.cameras[e.j], px_i, px_j)
        if ok.sum() < cfg.min_init_matches:
            continue
        uv_i, zi = project_points(graph.cameras[e.i], pose_i, X)
        uv_j, zj = project_points(graph.cameras[e.j], pose_j, X)
        ok &= (zi > 0) & (zj > 0)
        ok &= np.linalg.norm(uv_i - px_i, axis=1) < cfg.tri_max_reproj_px
        ok &= np.linalg.norm(uv_j - px_j, axis=1) < cfg.tri_max_reproj_px
        if ok.sum() < cfg.min_init_matches:
            continue
        med_angle = float(np.median(angles[ok]))
        if med_angle < cfg.min_init_angle_deg:
            continue
        score = float(ok.sum()) * med_angle
        if best is None or score > best[0]:
            tracks = [
                (X[m], {e.i: int(e.matches[m, 0]), e.j: int(e.matches[m, 1])})
                for m in np.flatnonzero(ok)
                if angles[m] >= cfg.tri_min_angle_deg
            ]
            best = (score, key, {e.i: pose_i, e.j: pose_j}, tracks)
    if best is None:
        return None
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# Public wrappers


def select_next_batch(engine: _Engine, min_points: int) -> list[RegistrationCandidate]:
    """Unregistered images ranked by how many registered points they see."""
    out = []
    for image in sorted(engine.graph.cameras):
        if image in engine.poses:
            continue
        corr = engine.correspondences(image)
        if len(corr) >= min_points:
            out.append(RegistrationCandidate(image, len(corr), corr))
    out.sort(key=lambda c: (-c.visible_points, c.image))
    return out


def local_bundle_adjust_with_priors(
    poses: dict[int, Pose],
    points: np.ndarray,
    observations: np.ndarray,
    cameras: dict[int, Camera],
    prior_edges,
    *,
    lambda_rot: float = 10.0,
    lambda_dir: float = 10.0,
    huber_px: float = 4.0,
    max_inner: int = 25,
    filter_px: float | None = 4.0,
    fixed: tuple[int, ...] = (),
) -> BAResult:
    """Bundle adjustment with soft relative-pose terms on view-graph edges.

    Each edge whose endpoints are both being optimized contributes an
    angular rotation residual against its stored relative rotation and an
    angular direction residual against its stored baseline direction.
    """
    priors = tuple(
        PosePairPrior(e.i, e.j, e.rotation, e.direction, lambda_rot, lambda_dir)
        for e in prior_edges
        if e.i in poses and e.j in poses
    )
    return bundle_adjust(
        poses, points, observations, cameras,
        huber_px=huber_px, max_inner=max_inner,
        max_outer=3 if filter_px is not None else 1,
        filter_px=filter_px, fixed=fixed, pair_priors=priors,
    )


def run_local_sfm(
    graph: ViewGraph,
    prior_poses: dict[int, Pose],
    keypoints: dict[int, np.ndarray],
    cfg: LocalSfmConfig = LocalSfmConfig(),
) -> LocalSfmResult:
    """Reconstruct one partition incrementally under pose-prior regularization.

    Seeds from the best two-view pair, registers batches of images by the
    dual-hypothesis vote, triangulates new structure as it becomes
    well-conditioned, and runs prior-regularized bundle adjustment
    periodically plus once at the end. If no seed pair qualifies the
    partition falls back to the prior poses outright. Images failing
    registration are retried in later batches and given up after
    ``cfg.max_deferrals`` attempts.
    """
    images = sorted(graph.cameras)
    engine = _Engine(graph, keypoints, cfg, prior_poses)
    deferrals: dict[int, int] = {i: 0 for i in images}

    if len(images) == 1:
        img = images[0]
        pose = prior_poses.get(img, Pose(np.eye(3), np.zeros(3)))
        recon = Reconstruction({img: pose}, (), frame="partition")
        return LocalSfmResult(recon, None, ((img, "prior-seed"),), (), True, (), deferrals)

    seed = initialize_two_view(graph, keypoints, cfg, prior_poses)
    prior_fallback = seed is None
    init_edge = None
    if seed is None:
        # no well-conditioned pair: adopt the prior poses and refine
        for img in images:
            if img in prior_poses:
                engine.poses[img] = prior_poses[img]
                engine.registration_log.append((img, "prior-seed"))
        for img in sorted(engine.poses):
            engine.absorb_edges(img)
        engine.triangulate_new_points()
        engine.bundle(cfg.ba_max_inner, max_outer=3)
    else:
        init_edge, seed_poses, seed_tracks = seed
        engine.poses.update(seed_poses)
        for img in sorted(seed_poses):
            engine.registration_log.append((img, "init"))
        for X, obs in seed_tracks:
            engine._add_track(X, obs)
        for img in sorted(seed_poses):
            engine.absorb_edges(img)
        engine.triangulate_new_points()

        last_ba = len(engine.poses)
        while True:
            batch = [
                c for c in select_next_batch(engine, cfg.batch_min_points)
                if deferrals[c.image] < cfg.max_deferrals
            ]
            if not batch:
                break
            for cand in batch:
                if cand.image in engine.poses:
                    continue
                if engine.register_image(cand):
                    engine.absorb_edges(cand.image)
                    engine.triangulate_new_points()
                    if len(engine.poses) >= last_ba * (1.0 + cfg.ba_growth_frac):
                        engine.bundle(cfg.ba_periodic_inner, max_outer=1)
                        last_ba = len(engine.poses)
                else:
                    deferrals[cand.image] += 1
        engine.bundle(cfg.ba_max_inner, max_outer=3)

    unregistered = tuple(i for i in images if i not in engine.poses)
    return LocalSfmResult(
        engine.reconstruction(),
        init_edge,
        tuple(engine.registration_log),
        unregistered,
        prior_fallback,
        tuple(engine.cost_history),
        deferrals,
    )
