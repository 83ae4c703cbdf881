import numpy as np
import pytest

from rft.evalkit import PoseRecord, pose_error, quat_to_rot, rot_to_quat
from rft.extract import FeatureSet
from rft.localize import (
    CameraIntrinsics,
    PlaneGeometry,
    _look_at_pose,
    backproject_to_plane,
    default_intrinsics,
    localize,
    make_retrieval,
    project_points,
    ransac_pnp_plane,
    render_plane_view,
    synth_benchmark,
)


def smooth_texture(size=513, seed=0):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 1, size=(size // 16 + 2, size // 16 + 2, 3))
    import cv2

    return cv2.resize(coarse.astype(np.float32), (size, size),
                      interpolation=cv2.INTER_CUBIC).clip(0, 1)


def z0_plane(size=10.0):
    return PlaneGeometry(origin=np.zeros(3), e_u=np.array([1.0, 0, 0]),
                         e_v=np.array([0, 1.0, 0]), size_u=size, size_v=size)


def test_synth_benchmark_counts_and_unit_quaternions():
    bench = synth_benchmark(10, 5, smooth_texture(257), seed=3)
    assert len(bench.db_images) == 10 and len(bench.query_images) == 5
    assert len(bench.db_poses) == 10 and len(bench.query_poses) == 5
    for p in bench.db_poses + bench.query_poses:
        assert abs(np.linalg.norm(p.q) - 1.0) <= 1e-6
    for img in bench.db_images + bench.query_images:
        assert img.shape == (448, 448, 3)
        assert np.isfinite(img).all()


def test_synth_benchmark_deterministic():
    tex = smooth_texture(257, seed=1)
    b1 = synth_benchmark(4, 2, tex, seed=7)
    b2 = synth_benchmark(4, 2, tex, seed=7)
    for i1, i2 in zip(b1.db_images + b1.query_images, b2.db_images + b2.query_images):
        assert np.array_equal(i1, i2)
    for p1, p2 in zip(b1.db_poses, b2.db_poses):
        assert np.array_equal(p1.q, p2.q) and np.array_equal(p1.t, p2.t)


def test_render_identity_facing_pose_is_scaled_crop():
    # geometry chosen so texture pixels land exactly on image pixels:
    # tex_x = u + 32, tex_y = 480 - v
    tex = smooth_texture(513, seed=2)
    intr = CameraIntrinsics(fx=512.0, fy=512.0, cx=224.0, cy=224.0, width=448, height=448)
    pose = _look_at_pose("nadir", np.array([5.0, 5.0, 10.0]), np.array([5.0, 5.0, 0.0]), 0.0)
    img = render_plane_view(tex, z0_plane(), intr, pose)
    us = np.arange(448)
    vs = np.arange(448)
    expected = tex[(480 - vs)[:, None], (us + 32)[None, :]]
    a = img.mean(axis=2).ravel()
    b = expected.mean(axis=2).ravel()
    corr = np.corrcoef(a, b)[0, 1]
    assert corr > 0.99
    assert np.abs(img - expected).max() < 1e-5


def test_backproject_project_round_trip():
    intr = default_intrinsics()
    plane = z0_plane()
    pose = _look_at_pose("cam", np.array([4.0, 6.0, 7.0]), np.array([5.0, 5.0, 0.0]), 5.0)
    rng = np.random.default_rng(4)
    px = rng.uniform(50, 400, size=(40, 2))
    pts3d, valid = backproject_to_plane(px, pose, intr, plane)
    assert valid.all()
    assert np.abs(pts3d[:, 2]).max() < 1e-9  # points land on z=0
    reproj, z = project_points(pts3d, pose.rotation, pose.t, intr)
    assert (z > 0).all()
    assert np.abs(reproj - px).max() < 1e-8


def test_ransac_pnp_noise_free_exact_recovery():
    intr = default_intrinsics()
    plane = z0_plane()
    gt = _look_at_pose("gt", np.array([5.5, 4.5, 6.5]), np.array([5.0, 5.2, 0.0]), -4.0)
    rng = np.random.default_rng(5)
    ab = rng.uniform(1.0, 9.0, size=(60, 2))
    pts3d = plane.origin + ab[:, :1] * plane.e_u + ab[:, 1:] * plane.e_v
    px, z = project_points(pts3d, gt.rotation, gt.t, intr)
    assert (z > 0).all()
    rot, t, inliers = ransac_pnp_plane(px, pts3d, intr, plane, seed=0)
    est = PoseRecord("est", q=rot_to_quat(rot), t=t)
    m, d = pose_error(est, gt)
    assert m < 1e-3 and d < 1e-2
    assert inliers.sum() == 60


def test_ransac_pnp_tolerates_outliers():
    intr = default_intrinsics()
    plane = z0_plane()
    gt = _look_at_pose("gt", np.array([5.0, 5.0, 7.0]), np.array([5.0, 5.0, 0.0]), 0.0)
    rng = np.random.default_rng(6)
    ab = rng.uniform(1.5, 8.5, size=(50, 2))
    pts3d = plane.origin + ab[:, :1] * plane.e_u + ab[:, 1:] * plane.e_v
    px, _ = project_points(pts3d, gt.rotation, gt.t, intr)
    px_noisy = px.copy()
    px_noisy[:20] = rng.uniform(0, 447, size=(20, 2))  # 40% outliers
    rot, t, inliers = ransac_pnp_plane(px_noisy, pts3d, intr, plane, seed=1)
    est = PoseRecord("est", q=rot_to_quat(rot), t=t)
    m, d = pose_error(est, gt)
    assert m < 0.01 and d < 0.1
    assert inliers.sum() >= 30


def test_ransac_pnp_fails_below_min_inliers():
    intr = default_intrinsics()
    plane = z0_plane()
    rng = np.random.default_rng(7)
    px = rng.uniform(0, 447, size=(11, 2))
    ab = rng.uniform(1, 9, size=(11, 2))
    pts3d = plane.origin + ab[:, :1] * plane.e_u + ab[:, 1:] * plane.e_v
    # 11 points < 12 required inliers, however consistent they might be
    assert ransac_pnp_plane(px, pts3d, intr, plane, seed=0) is None


def synthetic_feature_world(n_world=120, n_views=4, seed=8):
    """World points on the plane observed by several cameras, with a shared
    random descriptor per world point (perfect matching)."""
    rng = np.random.default_rng(seed)
    intr = default_intrinsics()
    plane = z0_plane()
    ab = rng.uniform(1.0, 9.0, size=(n_world, 2))
    pts3d = plane.origin + ab[:, :1] * plane.e_u + ab[:, 1:] * plane.e_v
    desc = rng.normal(size=(n_world, 16))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    views = []
    for i in range(n_views):
        pose = _look_at_pose(
            f"db_{i:03d}.png",
            np.array([5.0 + rng.uniform(-1.5, 1.5), 5.0 + rng.uniform(-1.5, 1.5),
                      rng.uniform(6.0, 8.0)]),
            np.array([5.0 + rng.uniform(-1, 1), 5.0 + rng.uniform(-1, 1), 0.0]),
            rng.uniform(-8, 8),
        )
        px, z = project_points(pts3d, pose.rotation, pose.t, intr)
        inside = (z > 0) & (px >= 0).all(1) & (px[:, 0] <= 447) & (px[:, 1] <= 447)
        fs = FeatureSet(
            keypoints=np.hstack([px[inside], np.ones((inside.sum(), 1))]).astype(np.float32),
            repeatability=np.full(inside.sum(), 0.9, np.float32),
            reliability=np.full(inside.sum(), 0.9, np.float32),
            descriptors=desc[inside].astype(np.float32),
        )
        views.append((pose, fs))
    return intr, plane, views


def test_localize_self_query_recovers_db_pose():
    intr, plane, views = synthetic_feature_world()
    db_feats = {p.name: f for p, f in views}
    db_poses = {p.name: p for p, f in views}
    target_pose, target_feats = views[0]
    est = localize(target_feats, [p.name for p, _ in views], db_feats, db_poses,
                   plane, intr, query_name="q", seed=0)
    assert est is not None
    m, d = pose_error(est, target_pose)
    assert m < 0.01 and d < 0.1


def test_localize_zero_matches_fails():
    intr, plane, views = synthetic_feature_world(n_views=2)
    db_feats = {p.name: f for p, f in views}
    db_poses = {p.name: p for p, f in views}
    empty = FeatureSet.empty(16)
    assert localize(empty, [views[0][0].name], db_feats, db_poses, plane, intr) is None


def test_localize_unknown_retrieved_name_errors():
    intr, plane, views = synthetic_feature_world(n_views=1)
    db_feats = {p.name: f for p, f in views}
    db_poses = {p.name: p for p, f in views}
    with pytest.raises(KeyError, match="missing"):
        localize(views[0][1], ["nonexistent.png"], db_feats, db_poses, plane, intr)


def rigid_transform(seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.2, 1.2)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)
    return rot, rng.uniform(-5, 5, size=3)


def test_localize_invariant_to_global_rigid_transform():
    intr, plane, views = synthetic_feature_world(seed=11)
    names = [p.name for p, _ in views]
    db_feats = {p.name: f for p, f in views}
    db_poses = {p.name: p for p, f in views}
    query_pose, query_feats = views[1]

    est = localize(query_feats, names, db_feats, db_poses, plane, intr, seed=3)
    err = pose_error(est, query_pose)

    rot_g, t_g = rigid_transform(12)
    plane2 = plane.transformed(rot_g, t_g)

    def move(p):
        r_new = p.rotation @ rot_g.T
        t_new = p.t - r_new @ t_g
        return PoseRecord(p.name, q=rot_to_quat(r_new), t=t_new)

    db_poses2 = {n: move(p) for n, p in db_poses.items()}
    est2 = localize(query_feats, names, db_feats, db_poses2, plane2, intr, seed=3)
    err2 = pose_error(est2, move(query_pose))
    assert abs(err[0] - err2[0]) < 1e-6
    assert abs(err[1] - err2[1]) < 1e-6


def test_make_retrieval_orders_by_pose_distance():
    poses = [
        PoseRecord("db_a", q=np.array([1.0, 0, 0, 0]), t=np.array([0.0, 0, -5])),
        PoseRecord("db_b", q=np.array([1.0, 0, 0, 0]), t=np.array([3.0, 0, -5])),
        PoseRecord("db_c", q=np.array([1.0, 0, 0, 0]), t=np.array([9.0, 0, -5])),
    ]
    q = PoseRecord("q", q=np.array([1.0, 0, 0, 0]), t=np.array([2.5, 0, -5]))
    entries = make_retrieval(poses, [q], k=2)
    assert entries["q"] == ["db_b", "db_a"]


def test_plane_geometry_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        PlaneGeometry(origin=np.zeros(3), e_u=np.array([2.0, 0, 0]),
                      e_v=np.array([0, 1.0, 0]), size_u=1, size_v=1)
    p = z0_plane()
    p.save(tmp_path / "plane.txt")
    back = PlaneGeometry.load(tmp_path / "plane.txt")
    assert np.allclose(back.origin, p.origin) and back.size_u == p.size_u
    intr = default_intrinsics()
    intr.save(tmp_path / "intr.txt")
    intr2 = CameraIntrinsics.load(tmp_path / "intr.txt")
    assert intr2 == intr
