"""Bundle adjustment: damped Gauss-Newton over poses and points.

One engine serves both the global refinement stage (free gauge, outer
rounds that filter bad observations and renormalize the frame) and the
local prior-regularized stage (fixed cameras, pairwise pose priors).
Points are eliminated through a Schur complement, so the linear solve is
over pose parameters only.

Pose updates are left-multiplicative on the rotation with an additive
translation: x_cam = exp(w)(R X) + (t + dt).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Pose, skew, so3_left_jacobian_inverse, so3_log


@dataclass(frozen=True)
class PosePairPrior:
    """Soft constraint tying the relative pose of images i and j.

    ``rotation`` is the expected R_ij in the x_j = R_ij x_i + t_ij sense;
    ``direction`` (optional) is the expected unit t_ij. Weights multiply the
    squared residuals, so sqrt(weight) scales the rows.
    """

    i: int
    j: int
    rotation: np.ndarray
    direction: np.ndarray | None
    rot_weight: float
    dir_weight: float


@dataclass(frozen=True)
class BAResult:
    poses: dict[int, Pose]
    points: np.ndarray
    inlier_mask: np.ndarray
    cost_history: tuple[tuple[float, ...], ...]  # one inner run per outer round
    outer_rounds: int
    filtered_per_round: tuple[int, ...]


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _so3_exp_batch(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(theta > 1e-12, w / np.maximum(theta, 1e-300), 0.0)
    K = _skew_batch(axis)
    th = theta[..., None]
    R = np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)
    R[small] = np.eye(3) + _skew_batch(w[small])
    return R


class _State:
    """Mutable pose/point arrays indexed by dense slots."""

    def __init__(self, poses: dict[int, Pose], points: np.ndarray, cameras: dict[int, Camera]):
        self.ids = sorted(poses)
        self.slot = {img: k for k, img in enumerate(self.ids)}
        self.R = np.stack([poses[i].R for i in self.ids])
        self.t = np.stack([poses[i].t for i in self.ids])
        self.X = np.asarray(points, dtype=float).copy().reshape(-1, 3)
        self.fx = np.array([cameras[i].fx for i in self.ids])
        self.fy = np.array([cameras[i].fy for i in self.ids])
        self.cx = np.array([cameras[i].cx for i in self.ids])
        self.cy = np.array([cameras[i].cy for i in self.ids])

    def copy(self):
        out = object.__new__(_State)
        out.ids, out.slot = self.ids, self.slot
        out.R, out.t, out.X = self.R.copy(), self.t.copy(), self.X.copy()
        out.fx, out.fy, out.cx, out.cy = self.fx, self.fy, self.cx, self.cy
        return out

    def apply(self, dp: np.ndarray, dx: np.ndarray):
        self.R = project_rotation_batch(_so3_exp_batch(dp[:, :3]) @ self.R)
        self.t = self.t + dp[:, 3:]
        self.X = self.X + dx

    def poses(self) -> dict[int, Pose]:
        return {img: Pose(self.R[k], self.t[k]) for k, img in enumerate(self.ids)}


def project_rotation_batch(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    bad = np.linalg.det(out) < 0
    if np.any(bad):
        U = U.copy()
        U[bad, :, -1] *= -1
        out = U @ Vt
    return out


def _residuals(state: _State, ci, pi, uv):
    """Residuals, camera-frame points, and the projection derivative."""
    Xc = np.einsum("nij,nj->ni", state.R[ci], state.X[pi]) + state.t[ci]
    z = np.maximum(Xc[:, 2], 1e-9)
    fx, fy = state.fx[ci], state.fy[ci]
    u = fx * Xc[:, 0] / z + state.cx[ci]
    v = fy * Xc[:, 1] / z + state.cy[ci]
    res = np.stack([u, v], axis=1) - uv
    A = np.zeros((len(ci), 2, 3))
    A[:, 0, 0] = fx / z
    A[:, 0, 2] = -fx * Xc[:, 0] / z**2
    A[:, 1, 1] = fy / z
    A[:, 1, 2] = -fy * Xc[:, 1] / z**2
    return res, Xc, A


def reprojection_rows(
    pose: Pose, camera: Camera, X: np.ndarray, uv: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unweighted residual and Jacobians of one observation.

    Returns (residual (2,), d res / d(w, dt) (2, 6), d res / dX (2, 3)),
    evaluated through the exact code path the optimizer batches over.
    """
    state = _State({0: pose}, X.reshape(1, 3), {0: camera})
    ci = np.zeros(1, dtype=int)
    pi = np.zeros(1, dtype=int)
    res, Xc, A = _residuals(state, ci, pi, np.asarray(uv, dtype=float).reshape(1, 2))
    RX = Xc - state.t[ci]
    Jw = -np.einsum("nab,nbc->nac", A, _skew_batch(RX))
    Jp = np.concatenate([Jw, A], axis=2)
    Jx = np.einsum("nab,nbc->nac", A, state.R[ci])
    return res[0], Jp[0], Jx[0]


def _huber_cost(norms: np.ndarray, delta: float) -> float:
    small = norms <= delta
    return float(np.sum(norms[small] ** 2) + np.sum(delta * (2 * norms[~small] - delta)))


def _pair_prior_cost(state: _State, priors) -> float:
    total = 0.0
    for p in priors:
        a, b = state.slot[p.i], state.slot[p.j]
        R_ij = state.R[b] @ state.R[a].T
        v = so3_log(R_ij @ p.rotation.T)
        total += p.rot_weight * float(v @ v)
        if p.direction is not None and p.dir_weight > 0:
            t_ij = state.t[b] - R_ij @ state.t[a]
            na = np.linalg.norm(t_ij)
            if na > 1e-12:
                cosq = float(np.clip(t_ij @ p.direction / na, -1.0, 1.0))
                theta = float(np.arccos(cosq))
                total += p.dir_weight * theta * theta
    return total


def _total_cost(state, ci, pi, uv, delta, priors) -> float:
    res, _, _ = _residuals(state, ci, pi, uv)
    return _huber_cost(np.linalg.norm(res, axis=1), delta) + _pair_prior_cost(state, priors)


def prior_residual_rows(
    R_i: np.ndarray,
    t_i: np.ndarray,
    R_j: np.ndarray,
    t_j: np.ndarray,
    prior: PosePairPrior,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted residual rows and their Jacobian for one pose-pair prior.

    Columns of the Jacobian are (w_i, dt_i, w_j, dt_j) for the same
    left-multiplicative update the optimizer uses: R <- exp(w) R, t <- t + dt.
    The rotation residual is log(R_ij_est prior_R^T); the direction residual
    is the angle between the estimated t_ij and the prior unit direction.
    """
    R_ij = R_j @ R_i.T
    rows: list[np.ndarray] = []
    jacs: list[np.ndarray] = []

    v = so3_log(R_ij @ prior.rotation.T)
    Jl = so3_left_jacobian_inverse(v)
    sw = np.sqrt(prior.rot_weight)
    J = np.zeros((3, 12))
    J[:, 0:3] = -Jl @ R_ij
    J[:, 6:9] = Jl
    rows.append(sw * v)
    jacs.append(sw * J)

    if prior.direction is not None and prior.dir_weight > 0:
        t_ij = t_j - R_ij @ t_i
        na = float(np.linalg.norm(t_ij))
        if na > 1e-12:
            ahat = t_ij / na
            bhat = prior.direction / np.linalg.norm(prior.direction)
            cosq = float(np.clip(ahat @ bhat, -1.0, 1.0))
            # atan2 keeps full precision near zero, where arccos loses half
            sinq = float(np.linalg.norm(np.cross(ahat, bhat)))
            theta = float(np.arctan2(sinq, cosq))
            if sinq > 1e-8:
                dth_da = -(bhat - cosq * ahat) / (na * sinq)
                # a = t_j - R_ij t_i under the left-perturbed rotations
                da = np.zeros((3, 12))
                da[:, 0:3] = -R_ij @ skew(t_i)
                da[:, 3:6] = -R_ij
                da[:, 6:9] = skew(R_ij @ t_i)
                da[:, 9:12] = np.eye(3)
                sd = np.sqrt(prior.dir_weight)
                rows.append(np.array([sd * theta]))
                jacs.append(sd * (dth_da @ da).reshape(1, 12))

    return np.concatenate(rows), np.vstack(jacs)


def _add_pair_prior_terms(state: _State, priors, free_of, Hpp, gp):
    """Accumulate prior rows straight into the dense reduced pose system."""
    for p in priors:
        a, b = state.slot[p.i], state.slot[p.j]
        r, J = prior_residual_rows(state.R[a], state.t[a], state.R[b], state.t[b], p)
        fa, fb = free_of[a], free_of[b]
        for s1, f1 in ((slice(0, 6), fa), (slice(6, 12), fb)):
            if f1 < 0:
                continue
            gp[6 * f1 : 6 * f1 + 6] += J[:, s1].T @ r
            for s2, f2 in ((slice(0, 6), fa), (slice(6, 12), fb)):
                if f2 < 0:
                    continue
                Hpp[6 * f1 : 6 * f1 + 6, 6 * f2 : 6 * f2 + 6] += J[:, s1].T @ J[:, s2]


def _lm_inner(
    state: _State,
    ci,
    pi,
    uv,
    huber_px: float,
    max_inner: int,
    fixed_slots: set[int],
    priors,
) -> tuple[_State, list[float]]:
    n = len(state.ids)
    m = len(state.X)
    free = [k for k in range(n) if k not in fixed_slots]
    free_of = {k: (free.index(k) if k in free else -1) for k in range(n)}
    free_of = np.array([free_of[k] for k in range(n)])
    nf = len(free)

    lam = 1e-4
    cost = _total_cost(state, ci, pi, uv, huber_px, priors)
    history = [cost]
    if nf == 0 and m == 0:
        return state, history

    for _ in range(max_inner):
        res, Xc, A = _residuals(state, ci, pi, uv)
        norms = np.linalg.norm(res, axis=1)
        w = np.minimum(1.0, huber_px / np.maximum(norms, 1e-12))
        sw = np.sqrt(w)[:, None]

        RX = Xc - state.t[ci]
        Jw = -np.einsum("nab,nbc->nac", A, _skew_batch(RX))
        Jp = np.concatenate([Jw, A], axis=2) * sw[:, :, None]
        Jx = np.einsum("nab,nbc->nac", A, state.R[ci]) * sw[:, :, None]
        rw = res * sw

        Hcc = np.zeros((n, 6, 6))
        np.add.at(Hcc, ci, np.einsum("nai,naj->nij", Jp, Jp))
        Hxx = np.zeros((m, 3, 3))
        np.add.at(Hxx, pi, np.einsum("nai,naj->nij", Jx, Jx))
        gp_full = np.zeros((n, 6))
        np.add.at(gp_full, ci, np.einsum("nai,na->ni", Jp, rw))
        gx = np.zeros((m, 3))
        np.add.at(gx, pi, np.einsum("nai,na->ni", Jx, rw))

        E = np.zeros((6 * nf, 3 * m))
        Eblocks = np.einsum("nai,naj->nij", Jp, Jx)
        cf = free_of[ci]
        keep = cf >= 0
        rows = (6 * cf[keep, None, None] + np.arange(6)[None, :, None]).astype(int)
        cols = (3 * pi[keep, None, None] + np.arange(3)[None, None, :]).astype(int)
        np.add.at(E, (np.broadcast_to(rows, (keep.sum(), 6, 3)), np.broadcast_to(cols, (keep.sum(), 6, 3))), Eblocks[keep])

        Hpp = np.zeros((6 * nf, 6 * nf))
        for k in range(n):
            f = free_of[k]
            if f >= 0:
                Hpp[6 * f : 6 * f + 6, 6 * f : 6 * f + 6] = Hcc[k]
        gp = np.concatenate([gp_full[k] for k in free]) if nf else np.zeros(0)
        if priors:
            _add_pair_prior_terms(state, priors, free_of, Hpp, gp)

        # isotropic damping keeps steps inside the Jacobian row space, so
        # rank-deficient systems (gauge freedoms, prior-only poses) cannot
        # leak large moves into their null directions
        s_pose = max(float(np.mean(np.diag(Hpp))), 1e-10) if nf else 1.0
        s_pt = np.maximum(np.einsum("mkk->m", Hxx) / 3.0, 1e-10) if m else np.zeros(0)

        accepted = False
        for _ in range(8):
            Hpp_d = Hpp.copy()
            Hpp_d[np.arange(6 * nf), np.arange(6 * nf)] += lam * s_pose
            Hxx_d = Hxx.copy()
            Hxx_d[:, np.arange(3), np.arange(3)] += (lam * s_pt)[:, None]
            Cinv = np.linalg.inv(Hxx_d) if m else np.zeros((0, 3, 3))

            if nf:
                Er = E.reshape(6 * nf, m, 3)
                EC = np.einsum("amk,mkl->aml", Er, Cinv).reshape(6 * nf, 3 * m)
                S = Hpp_d - EC @ E.T
                rhs = -gp + EC @ gx.reshape(-1)
                try:
                    dp_free = np.linalg.solve(S, rhs)
                except np.linalg.LinAlgError:
                    lam *= 10
                    continue
                back = gx.reshape(-1) + E.T @ dp_free
                dx = -np.einsum("mkl,ml->mk", Cinv, back.reshape(m, 3))
            else:
                dp_free = np.zeros(0)
                dx = -np.einsum("mkl,ml->mk", Cinv, gx)

            dp = np.zeros((n, 6))
            for k in range(n):
                f = free_of[k]
                if f >= 0:
                    dp[k] = dp_free[6 * f : 6 * f + 6]

            trial = state.copy()
            trial.apply(dp, dx)
            new_cost = _total_cost(trial, ci, pi, uv, huber_px, priors)
            if new_cost < cost:
                state = trial
                drop = cost - new_cost
                cost = new_cost
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if drop < 1e-12 * max(1.0, cost):
                    return state, history
                break
            lam *= 10
        if not accepted:
            break
    return state, history


def renormalize_scene(poses: dict[int, Pose], points: np.ndarray) -> tuple[dict[int, Pose], np.ndarray]:
    """Map the scene to the canonical frame: camera centroid at the origin,
    RMS center distance one. A similarity with identity rotation, so every
    reprojection is untouched; applying it twice is a no-op."""
    ids = sorted(poses)
    C = np.stack([poses[i].center for i in ids])
    mu = C.mean(axis=0)
    sigma = float(np.sqrt(((C - mu) ** 2).sum(axis=1).mean()))
    if sigma < 1e-12:
        sigma = 1.0
    newp = {i: Pose.from_center(poses[i].R, (poses[i].center - mu) / sigma) for i in ids}
    return newp, (np.asarray(points, dtype=float) - mu) / sigma


def bundle_adjust(
    poses: dict[int, Pose],
    points: np.ndarray,
    observations: np.ndarray,
    cameras: dict[int, Camera],
    *,
    huber_px: float = 4.0,
    max_inner: int = 25,
    max_outer: int = 1,
    filter_px: float | None = None,
    filter_stop_frac: float = 1e-3,
    renormalize: bool = False,
    fixed: tuple[int, ...] = (),
    pair_priors: tuple[PosePairPrior, ...] = (),
) -> BAResult:
    """Minimize Huber-robust reprojection error (plus optional pose priors).

    ``observations`` is (N, 4): image id, point index, u, v. When
    ``filter_px`` is set, observations whose residual exceeds it after an
    inner run are dropped and another round starts, until fewer than
    ``filter_stop_frac`` of all observations get dropped in a round or
    ``max_outer`` rounds have run.
    """
    observations = np.asarray(observations, dtype=float).reshape(-1, 4)
    state = _State(poses, points, cameras)
    ci_all = np.array([state.slot[int(i)] for i in observations[:, 0]], dtype=int)
    pi_all = observations[:, 1].astype(int)
    uv_all = observations[:, 2:4]
    active = np.ones(len(observations), dtype=bool)
    fixed_slots = {state.slot[i] for i in fixed if i in state.slot}

    histories: list[tuple[float, ...]] = []
    filtered: list[int] = []
    rounds = 0
    for _ in range(max(1, max_outer)):
        rounds += 1
        state, hist = _lm_inner(
            state, ci_all[active], pi_all[active], uv_all[active],
            huber_px, max_inner, fixed_slots, pair_priors,
        )
        histories.append(tuple(hist))
        if renormalize:
            newp, newx = renormalize_scene(state.poses(), state.X)
            state = _State(newp, newx, cameras)
        if filter_px is None:
            break
        res, _, _ = _residuals(state, ci_all, pi_all, uv_all)
        bad = active & (np.linalg.norm(res, axis=1) > filter_px)
        filtered.append(int(bad.sum()))
        active &= ~bad
        if filtered[-1] < filter_stop_frac * len(observations):
            break

    return BAResult(
        poses=state.poses(),
        points=state.X,
        inlier_mask=active,
        cost_history=tuple(histories),
        outer_rounds=rounds,
        filtered_per_round=tuple(filtered),
    )
