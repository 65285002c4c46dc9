"""Track building and multi-view triangulation."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from adasfm.geometry import Camera, Pose, random_rotation
from adasfm.scene import TwoViewEdge, ViewGraph
from adasfm.tracks import (
    build_correspondence_groups,
    depths,
    max_ray_angle_deg,
    reprojection_errors,
    triangulate_dlt,
    triangulate_strict,
    triangulate_tolerant,
)

CAM = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def _edge(i, j, matches):
    return TwoViewEdge(
        i=i,
        j=j,
        rotation=np.eye(3),
        direction=np.array([1.0, 0.0, 0.0]),
        matches=np.array(matches, dtype=np.int64).reshape(-1, 2),
        weight=float(len(matches)),
    )


def _graph(edges):
    nodes = sorted({e.i for e in edges} | {e.j for e in edges})
    cams = {v: CAM for v in nodes}
    return ViewGraph(cams, {(e.i, e.j): e for e in edges})


def test_groups_chain_across_three_images():
    g = _graph([
        _edge(0, 1, [(0, 0), (1, 1)]),
        _edge(1, 2, [(0, 0)]),
        _edge(0, 2, [(1, 1)]),
    ])
    groups = build_correspondence_groups(g)
    assert groups == [
        ((0, 0), (1, 0), (2, 0)),
        ((0, 1), (1, 1), (2, 1)),
    ]


def test_groups_conflicting_keypoint_collapses_to_smallest():
    # keypoints 0 and 1 of image 0 both matched to keypoint 0 of image 1
    g = _graph([_edge(0, 1, [(0, 0), (1, 0)])])
    groups = build_correspondence_groups(g)
    assert groups == [((0, 0), (1, 0))]


def test_groups_drop_singletons():
    g = _graph([_edge(0, 1, [(3, 5)]), _edge(1, 2, [(5, 7)])])
    groups = build_correspondence_groups(g)
    # the chain 0/3 - 1/5 - 2/7 is one group of three
    assert groups == [((0, 3), (1, 5), (2, 7))]


def _poses_around(X, n, radius=5.0, seed=0):
    rng = np.random.default_rng(seed)
    poses = []
    for k in range(n):
        ang = 2 * np.pi * k / max(n, 3)
        center = X + radius * np.array([np.cos(ang), np.sin(ang), -1.5])
        center += 0.3 * rng.standard_normal(3)
        z = X - center
        z = z / np.linalg.norm(z)
        up = np.array([0.0, 0.0, 1.0])
        x = np.cross(up, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        poses.append(Pose.from_center(R, center))
    return poses


def _pixels(poses, X):
    out = []
    for p in poses:
        xc = p.R @ X + p.t
        out.append([
            CAM.fx * xc[0] / xc[2] + CAM.cx,
            CAM.fy * xc[1] / xc[2] + CAM.cy,
        ])
    return np.array(out)


def test_dlt_exact_on_clean_observations():
    X = np.array([0.4, -1.2, 2.0])
    poses = _poses_around(X, 4)
    px = _pixels(poses, X)
    Xh = triangulate_dlt(poses, [CAM] * 4, px)
    assert Xh is not None
    np.testing.assert_allclose(Xh, X, atol=1e-8)
    assert np.all(depths(poses, Xh) > 0)
    assert np.all(reprojection_errors(poses, [CAM] * 4, px, Xh) < 1e-6)


@given(st.integers(0, 10_000))
def test_dlt_recovers_random_points(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=3)
    poses = _poses_around(X, 3, seed=seed + 1)
    px = _pixels(poses, X)
    Xh = triangulate_dlt(poses, [CAM] * 3, px)
    assert Xh is not None
    np.testing.assert_allclose(Xh, X, atol=1e-6)


def test_max_ray_angle_right_angle():
    X = np.zeros(3)
    centers = np.array([[1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]])
    assert max_ray_angle_deg(X, centers) == pytest.approx(90.0, abs=1e-9)


def test_max_ray_angle_needs_two_rays():
    assert max_ray_angle_deg(np.zeros(3), np.array([[1.0, 0, 0]])) == 0.0


def test_strict_accepts_wide_rejects_narrow():
    X = np.array([0.0, 0.0, 10.0])
    wide = [
        Pose.from_center(np.eye(3), np.array([-3.0, 0, 0])),
        Pose.from_center(np.eye(3), np.array([3.0, 0, 0])),
    ]
    narrow = [
        Pose.from_center(np.eye(3), np.array([-0.05, 0, 0])),
        Pose.from_center(np.eye(3), np.array([0.05, 0, 0])),
    ]
    kp = {
        0: _pixels(wide, X)[:1],
        1: _pixels(wide, X)[1:],
        2: _pixels(narrow, X)[:1],
        3: _pixels(narrow, X)[1:],
    }
    poses = {0: wide[0], 1: wide[1], 2: narrow[0], 3: narrow[1]}
    cams = {k: CAM for k in poses}
    obs_wide = ((0, 0), (1, 0))
    obs_narrow = ((2, 0), (3, 0))
    tr = triangulate_strict(obs_wide, poses, cams, kp, min_angle_deg=5.0)
    assert tr is not None
    np.testing.assert_allclose(tr.point, X, atol=1e-8)
    assert triangulate_strict(obs_narrow, poses, cams, kp, min_angle_deg=5.0) is None


def test_strict_rejects_point_behind_camera():
    X = np.array([0.0, 0.0, 10.0])
    front = Pose.from_center(np.eye(3), np.array([-3.0, 0, 0]))
    # camera past the point, looking further along +z: sees it behind
    behind = Pose.from_center(np.eye(3), np.array([3.0, 0.0, 20.0]))
    kp = {0: _pixels([front], X), 1: np.array([[320.0, 240.0]])}
    poses = {0: front, 1: behind}
    cams = {0: CAM, 1: CAM}
    assert triangulate_strict(((0, 0), (1, 0)), poses, cams, kp, 1.0) is None


def test_tolerant_flags_corrupted_observation():
    X = np.array([0.2, 0.7, 1.1])
    poses = _poses_around(X, 5)
    px = _pixels(poses, X)
    px[2] += np.array([40.0, -25.0])  # one bad detection
    kp = {k: px[k : k + 1] for k in range(5)}
    pd = {k: poses[k] for k in range(5)}
    cams = {k: CAM for k in range(5)}
    obs = tuple((k, 0) for k in range(5))
    got = triangulate_tolerant(obs, pd, cams, kp, min_angle_deg=1.5, max_reproj_px=4.0)
    assert got is not None
    Xh, flags = got
    np.testing.assert_allclose(Xh, X, atol=1e-6)
    assert flags == {0: True, 1: True, 2: False, 3: True, 4: True}


def test_tolerant_gives_up_without_two_good_views():
    X = np.array([0.0, 0.0, 2.0])
    poses = _poses_around(X, 2)
    px = _pixels(poses, X) + 80.0  # both wrecked
    kp = {k: px[k : k + 1] for k in range(2)}
    pd = {k: poses[k] for k in range(2)}
    cams = {k: CAM for k in range(2)}
    got = triangulate_tolerant(
        tuple((k, 0) for k in range(2)), pd, cams, kp, 1.5, 4.0
    )
    assert got is None


def test_strict_skips_unregistered_images():
    X = np.array([0.1, -0.3, 1.4])
    poses = _poses_around(X, 3)
    px = _pixels(poses, X)
    kp = {k: px[k : k + 1] for k in range(3)}
    pd = {0: poses[0], 2: poses[2]}  # image 1 not registered
    cams = {k: CAM for k in range(3)}
    tr = triangulate_strict(tuple((k, 0) for k in range(3)), pd, cams, kp, 1.0)
    assert tr is not None
    assert [i for i, _ in tr.observations] == [0, 2]
