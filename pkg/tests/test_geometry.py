import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adasfm.geometry import (
    Camera,
    Pose,
    Sim3Transform,
    angular_distance,
    chordal_distance,
    project,
    project_points,
    project_rotation,
    quaternion_to_rotation,
    random_rotation,
    relative_motion,
    relative_pose,
    rotation_to_quaternion,
    sim3_apply,
    sim3_compose,
    sim3_inverse,
    sim3_transform_pose,
    skew,
    so3_exp,
    so3_left_jacobian_inverse,
    so3_log,
)
from adasfm.oracles import rodrigues_termwise, rotation_angle_trace

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def rot(seed, max_angle=np.pi):
    return random_rotation(np.random.default_rng(seed), max_angle)


def test_so3_exp_quarter_turn_frozen():
    # value computed with the termwise Rodrigues oracle
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    got = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(got, expected, atol=1e-12)
    assert np.allclose(rodrigues_termwise(np.array([0.0, 0.0, np.pi / 2])), expected, atol=1e-12)


@given(seeds)
def test_so3_exp_matches_termwise_oracle(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3) * rng.uniform(1e-3, 3.0)
    assert np.allclose(so3_exp(w), rodrigues_termwise(w), atol=1e-12)


@given(seeds)
def test_so3_exp_is_rotation(seed):
    R = rot(seed)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


@given(seeds)
def test_exp_log_roundtrip(seed):
    rng = np.random.default_rng(seed)
    # cover tiny, moderate and near-pi angles
    angle = rng.choice([rng.uniform(1e-12, 1e-8), rng.uniform(1e-6, 3.0), np.pi - rng.uniform(0, 1e-7)])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * angle
    back = so3_log(so3_exp(w))
    # same rotation, possibly the antipodal vector at exactly pi
    assert np.allclose(so3_exp(back), so3_exp(w), atol=1e-9)
    if angle < np.pi - 1e-6:
        assert np.allclose(back, w, atol=1e-9)


@given(seeds)
def test_log_exp_roundtrip_on_matrices(seed):
    R = rot(seed)
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-9)


def test_so3_log_half_turn_axis_sign_is_deterministic():
    # half turns about +/- the same axis must give one canonical answer
    cases = [
        (np.diag([1.0, -1.0, -1.0]), np.array([np.pi, 0.0, 0.0])),
        (np.diag([-1.0, 1.0, -1.0]), np.array([0.0, np.pi, 0.0])),
        (np.diag([-1.0, -1.0, 1.0]), np.array([0.0, 0.0, np.pi])),
    ]
    for R, expected in cases:
        assert np.allclose(so3_log(R), expected, atol=1e-9)
    axis = np.array([-1.0, 1.0, 0.0]) / np.sqrt(2.0)
    w = so3_log(so3_exp(axis * np.pi))
    # first nonzero component comes out positive
    assert w[0] > 0.0
    assert np.allclose(so3_exp(w), so3_exp(axis * np.pi), atol=1e-9)


@given(seeds)
def test_angular_distance_matches_trace_oracle(seed):
    Ra, Rb = rot(seed), rot(seed + 10_000_019)
    assert np.isclose(angular_distance(Ra, Rb), rotation_angle_trace(Rb @ Ra.T), atol=1e-7)


@given(seeds)
def test_chordal_angular_identity(seed):
    Ra, Rb = rot(seed), rot(seed + 77_000_003)
    theta = angular_distance(Ra, Rb)
    assert np.isclose(chordal_distance(Ra, Rb), 2.0 * np.sqrt(2.0) * np.sin(theta / 2.0), atol=1e-9)


@given(seeds)
def test_quaternion_roundtrip(seed):
    R = rot(seed)
    assert np.allclose(quaternion_to_rotation(rotation_to_quaternion(R)), R, atol=1e-9)


@given(seeds)
def test_left_jacobian_inverse_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * rng.uniform(0.01, 3.0)  # stay inside the principal domain
    J = so3_left_jacobian_inverse(w)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        plus = so3_log(so3_exp(h * e) @ so3_exp(w))
        minus = so3_log(so3_exp(-h * e) @ so3_exp(w))
        fd = (plus - minus) / (2 * h)
        assert np.allclose(J @ e, fd, atol=1e-5)


@given(seeds)
def test_relative_pose_composition_oracle(seed):
    rng = np.random.default_rng(seed)
    pi = Pose(rot(seed), rng.normal(size=3))
    pj = Pose(rot(seed + 1), rng.normal(size=3))
    R_ij, t_ij = relative_motion(pi, pj)
    X = rng.normal(size=(5, 3))
    assert np.allclose(pj.transform(X), pi.transform(X) @ R_ij.T + t_ij, atol=1e-9)
    _, d = relative_pose(pi, pj)
    if d is not None:
        assert np.isclose(np.linalg.norm(d), 1.0, atol=1e-12)
        assert np.allclose(d * np.linalg.norm(t_ij), t_ij, atol=1e-9)
        # direction points along C_i - C_j once rotated back to the world
        assert np.allclose(
            pj.R.T @ d,
            (pi.center - pj.center) / np.linalg.norm(pi.center - pj.center),
            atol=1e-9,
        )


def test_relative_pose_zero_baseline():
    R1, R2 = rot(3), rot(4)
    c = np.array([0.3, -0.2, 1.0])
    _, d = relative_pose(Pose.from_center(R1, c), Pose.from_center(R2, c))
    assert d is None


@given(seeds)
def test_project_matches_homogeneous_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(500.0, 480.0, 320.0, 240.0, 640, 480)
    pose = Pose(rot(seed), rng.normal(size=3))
    n = rng.normal(size=3)
    Xc = np.array([2.0 * n[0], 2.0 * n[1], 4.0 + 3.0 * abs(n[2])])  # strictly in front
    X = pose.R.T @ (Xc - pose.t)
    P = cam.K @ np.hstack([pose.R, pose.t[:, None]])
    xh = P @ np.append(X, 1.0)
    uv, in_front = project(cam, pose, X)
    assert in_front
    assert np.allclose(uv, xh[:2] / xh[2], atol=1e-9)


def test_project_behind_camera_flag():
    cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
    pose = Pose(np.eye(3), np.zeros(3))
    _, in_front = project(cam, pose, np.array([0.0, 0.0, -4.0]))
    assert not in_front
    _, z = project_points(cam, pose, np.array([[0.0, 0.0, -4.0], [0.0, 0.0, 4.0]]))
    assert z[0] < 0 < z[1]


@given(seeds)
def test_camera_normalize_recomputable(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(520.0, 500.0, 319.5, 239.5, 640, 480)
    uv = rng.uniform(0, 480, size=(7, 2))
    n = cam.normalize(uv)
    back = (np.linalg.inv(cam.K) @ np.hstack([uv, np.ones((7, 1))]).T).T
    assert np.allclose(n, back, atol=1e-12)


def test_sim3_apply_frozen_case():
    Rz = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    T = Sim3Transform(2.0, Rz, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(sim3_apply(T, np.array([1.0, 0.0, 0.0])), [1.0, 2.0, 0.0], atol=1e-12)


@given(seeds)
def test_sim3_compose_matches_sequential_application(seed):
    rng = np.random.default_rng(seed)
    A = Sim3Transform(rng.uniform(0.2, 3.0), rot(seed), rng.normal(size=3))
    B = Sim3Transform(rng.uniform(0.2, 3.0), rot(seed + 5), rng.normal(size=3))
    X = rng.normal(size=(6, 3))
    assert np.allclose(sim3_apply(sim3_compose(A, B), X), sim3_apply(A, sim3_apply(B, X)), atol=1e-9)


@given(seeds)
def test_sim3_inverse_roundtrip(seed):
    rng = np.random.default_rng(seed)
    T = Sim3Transform(rng.uniform(0.2, 3.0), rot(seed), rng.normal(size=3))
    X = rng.normal(size=(6, 3))
    assert np.allclose(sim3_apply(sim3_inverse(T), sim3_apply(T, X)), X, atol=1e-9)
    I = sim3_compose(T, sim3_inverse(T))
    assert np.isclose(I.s, 1.0, atol=1e-12)
    assert np.allclose(I.R, np.eye(3), atol=1e-12)
    assert np.allclose(I.t, 0.0, atol=1e-9)


def test_sim3_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        Sim3Transform(0.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Sim3Transform(-1.0, np.eye(3), np.zeros(3))


@given(seeds)
def test_sim3_transform_pose_preserves_projection(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
    pose = Pose(rot(seed), np.array([0.1, -0.2, 0.5]))
    X = pose.R.T @ (rng.normal(size=(4, 3)) + np.array([0, 0, 8.0])).T
    X = (X - (pose.R.T @ pose.t)[:, None]).T
    T = Sim3Transform(rng.uniform(0.3, 2.5), rot(seed + 9), rng.normal(size=3))
    uv0, _ = project_points(cam, pose, X)
    uv1, z1 = project_points(cam, sim3_transform_pose(T, pose), sim3_apply(T, X))
    assert np.allclose(uv0, uv1, atol=1e-6)
    assert np.all(z1 > 0)


@given(seeds)
def test_project_rotation_recovers_perturbed(seed):
    rng = np.random.default_rng(seed)
    R = rot(seed)
    M = R + rng.normal(size=(3, 3)) * 1e-6
    Rp = project_rotation(M)
    assert np.allclose(Rp.T @ Rp, np.eye(3), atol=1e-12)
    assert angular_distance(R, Rp) < 1e-4


def test_skew_is_cross_product():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-0.5, 0.7, 0.2])
    assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


def test_pose_center_roundtrip():
    R = rot(11)
    c = np.array([4.0, -1.0, 2.5])
    p = Pose.from_center(R, c)
    assert np.allclose(p.center, c, atol=1e-12)
    assert np.allclose(p.t, -R @ c, atol=1e-12)
