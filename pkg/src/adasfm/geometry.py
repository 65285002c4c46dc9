"""Rotation, pose, similarity-transform and pinhole camera primitives.

Conventions used across the package:

* Rotations are plain (3, 3) numpy arrays, orthonormal with det +1.
* A pose maps world to camera: ``x_cam = R @ x_world + t``. The camera
  center in world coordinates is ``C = -R.T @ t``.
* Relative pose between views i and j satisfies ``x_j = R_ij @ x_i + t_ij``
  with ``R_ij = R_j @ R_i.T``.
* Pixel coordinates follow the usual u-right, v-down convention; normalized
  keypoints are ``K^-1 @ [u, v, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "skew",
    "so3_exp",
    "so3_log",
    "so3_left_jacobian_inverse",
    "angular_distance",
    "chordal_distance",
    "project_rotation",
    "random_rotation",
    "rotation_to_quaternion",
    "quaternion_to_rotation",
    "Camera",
    "Pose",
    "relative_motion",
    "relative_pose",
    "project",
    "project_points",
    "Sim3Transform",
    "sim3_apply",
    "sim3_compose",
    "sim3_inverse",
    "sim3_transform_pose",
]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula mapping a rotation vector to a rotation matrix.

    Uses the series expansion of sin(t)/t and (1-cos(t))/t^2 below 1e-8 so
    the map is smooth through zero.
    """
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    W = skew(w)
    if theta < 1e-8:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix.

    Shepperd's branching on the largest diagonal combination keeps every
    case well conditioned. The sign is canonicalized to w >= 0; at w == 0
    the first nonzero vector component is made positive so antipodal
    quaternions resolve deterministically.
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > R[0, 0] and t > R[1, 1] and t > R[2, 2]:
        s = np.sqrt(1.0 + t) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    q = q / np.linalg.norm(q)
    if q[0] < -1e-14:
        q = -q
    elif abs(q[0]) <= 1e-14:
        # w == 0 within noise: half-turn, pick the canonical axis sign
        for c in q[1:]:
            if abs(c) > 1e-12:
                if c < 0.0:
                    q = -q
                break
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion (normalized internally)."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle, angle in [0, pi]) of a rotation matrix.

    Goes through the quaternion so both the small-angle and the half-turn
    regime stay accurate. Exactly antipodal rotations (angle pi) return the
    axis whose first nonzero component is positive.
    """
    q = rotation_to_quaternion(R)
    w = abs(q[0])
    v = q[1:]
    n = np.linalg.norm(v)
    if n < 1e-10:
        # theta/n -> 2/w as n -> 0
        return v * (2.0 / max(w, 1e-300)) * (1.0 - n * n / (3.0 * w * w) if w > 0 else 1.0)
    theta = 2.0 * np.arctan2(n, w)
    return v * (theta / n)


def so3_left_jacobian_inverse(w: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SO(3) at rotation vector w.

    Satisfies d/dt log(exp(t*e) exp(w)) = J_l(w)^-1 e at t = 0, which is what
    the Gauss-Newton linearization of rotation residuals needs.
    """
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    W = skew(w)
    if theta < 1e-5:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        c = (1.0 / theta2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + c * (W @ W)


def angular_distance(Ri: np.ndarray, Rj: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    return float(np.linalg.norm(so3_log(Rj @ Ri.T)))


def chordal_distance(Ri: np.ndarray, Rj: np.ndarray) -> float:
    """Frobenius distance between two rotation matrices."""
    return float(np.linalg.norm(Ri - Rj))


def project_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix to M in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    return U @ D @ Vt


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Uniform random axis, angle uniform in (0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics with a pixel-space image frame of width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coords (..., 2) -> normalized homogeneous coords (..., 3)."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image bounds."""
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= 0.0)
            & (uv[..., 0] <= self.width - 1)
            & (uv[..., 1] >= 0.0)
            & (uv[..., 1] <= self.height - 1)
        )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def from_center(cls, R: np.ndarray, center: np.ndarray) -> "Pose":
        R = np.asarray(R, dtype=float)
        return cls(R, -R @ np.asarray(center, dtype=float))

    def transform(self, X: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> camera frame."""
        return np.asarray(X, dtype=float) @ self.R.T + self.t


def relative_motion(pose_i: Pose, pose_j: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Metric relative pose (R_ij, t_ij) with x_j = R_ij x_i + t_ij."""
    R_ij = pose_j.R @ pose_i.R.T
    t_ij = pose_j.t - R_ij @ pose_i.t
    return R_ij, t_ij


def relative_pose(pose_i: Pose, pose_j: Pose) -> tuple[np.ndarray, np.ndarray | None]:
    """Relative rotation and unit translation direction between two poses.

    Returns (R_ij, None) when the camera centers coincide (baseline below
    1e-12), since the direction is undefined there.
    """
    R_ij, t_ij = relative_motion(pose_i, pose_j)
    norm = float(np.linalg.norm(t_ij))
    if norm < 1e-12:
        return R_ij, None
    return R_ij, t_ij / norm


def project_points(camera: Camera, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (n, 3). Returns pixel coords (n, 2) and depths (n,).

    Points at or behind the camera plane get non-positive depth; their pixel
    coords are computed against a clamped depth so callers can mask on depth.
    """
    Xc = np.atleast_2d(np.asarray(X, dtype=float)) @ pose.R.T + pose.t
    z = Xc[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = camera.fx * Xc[:, 0] / safe_z + camera.cx
    v = camera.fy * Xc[:, 1] / safe_z + camera.cy
    return np.stack([u, v], axis=1), z


def project(camera: Camera, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, bool]:
    """Project a single world point. Returns (pixel (2,), in_front flag)."""
    uv, z = project_points(camera, pose, np.asarray(X, dtype=float).reshape(1, 3))
    return uv[0], bool(z[0] > 0.0)


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform x -> s * R @ x + t with s > 0."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0.0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))


def sim3_apply(T: Sim3Transform, X: np.ndarray) -> np.ndarray:
    """Apply T to points of shape (..., 3)."""
    return T.s * (np.asarray(X, dtype=float) @ T.R.T) + T.t


def sim3_compose(A: Sim3Transform, B: Sim3Transform) -> Sim3Transform:
    """Composition A after B: (A o B)(x) = A(B(x))."""
    return Sim3Transform(A.s * B.s, A.R @ B.R, A.s * (A.R @ B.t) + A.t)


def sim3_inverse(T: Sim3Transform) -> Sim3Transform:
    return Sim3Transform(1.0 / T.s, T.R.T, -(T.R.T @ T.t) / T.s)


def sim3_transform_pose(T: Sim3Transform, pose: Pose) -> Pose:
    """Pose of the same camera after the world moves by T.

    The camera frame itself stays metric: only the center moves (and the
    orientation co-rotates), so reprojection of T-transformed points is
    unchanged up to the projective depth scale.
    """
    R_new = pose.R @ T.R.T
    return Pose.from_center(R_new, sim3_apply(T, pose.center))
