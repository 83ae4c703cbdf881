"""Synthetic planar localization benchmark and the pose solver.

A textured world plane is rendered through a pinhole camera at randomized
poses to produce database and query images with exact ground truth. A
query is localized by matching against retrieved database images,
back-projecting database keypoints onto the plane through their known
poses, and solving the pooled 2D-3D set with a plane-homography PnP inside
a random-sample-consensus loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit import PoseRecord, mutual_nn, quat_to_rot, rot_to_quat
from .extract import FeatureSet
from .homography import sample_bilinear

log = logging.getLogger(__name__)

RANSAC_ITERS = 1000
RANSAC_INLIER_PX = 3.0
RANSAC_MIN_SET = 4
MIN_INLIERS = 12


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def save(self, path) -> None:
        Path(path).write_text(
            f"{self.fx:.12g} {self.fy:.12g} {self.cx:.12g} {self.cy:.12g} "
            f"{self.width} {self.height}\n"
        )

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        v = Path(path).read_text().split()
        return cls(fx=float(v[0]), fy=float(v[1]), cx=float(v[2]), cy=float(v[3]),
                   width=int(v[4]), height=int(v[5]))


@dataclass
class PlaneGeometry:
    """World plane carrying the benchmark texture.

    Points on the plane: origin + a * e_u + b * e_v for (a, b) in
    [0, size_u] x [0, size_v] meters.
    """

    origin: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    size_u: float
    size_v: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.e_u = np.asarray(self.e_u, dtype=np.float64).reshape(3)
        self.e_v = np.asarray(self.e_v, dtype=np.float64).reshape(3)
        for v in (self.e_u, self.e_v):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError("plane axes must be unit length")
        if abs(self.e_u @ self.e_v) > 1e-9:
            raise ValueError("plane axes must be orthogonal")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.e_u, self.e_v)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "PlaneGeometry":
        return PlaneGeometry(
            origin=rot @ self.origin + shift,
            e_u=rot @ self.e_u, e_v=rot @ self.e_v,
            size_u=self.size_u, size_v=self.size_v,
        )

    def save(self, path) -> None:
        vals = np.concatenate([self.origin, self.e_u, self.e_v, [self.size_u, self.size_v]])
        Path(path).write_text(" ".join(f"{v:.12g}" for v in vals) + "\n")

    @classmethod
    def load(cls, path) -> "PlaneGeometry":
        v = [float(x) for x in Path(path).read_text().split()]
        return cls(origin=np.array(v[0:3]), e_u=np.array(v[3:6]), e_v=np.array(v[6:9]),
                   size_u=v[9], size_v=v[10])


def default_intrinsics(size: int = 448, focal: float = 520.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=focal, fy=focal, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                            width=size, height=size)


def render_plane_view(texture: np.ndarray, plane: PlaneGeometry,
                      intr: CameraIntrinsics, pose: PoseRecord,
                      background: float = 0.5) -> np.ndarray:
    """Ray-cast the textured plane through a pinhole camera."""
    r = pose.rotation
    c = pose.camera_center
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    rays = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy,
                     np.ones_like(us, dtype=np.float64)], axis=-1)
    dirs = rays @ r  # camera ray directions expressed in world coordinates
    n = plane.normal
    denom = dirs @ n
    num = (plane.origin - c) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = num / denom
    pts = c + dirs * depth[..., None]
    a = (pts - plane.origin) @ plane.e_u
    b = (pts - plane.origin) @ plane.e_v
    th, tw = texture.shape[:2]
    tex_xy = np.stack([a / plane.size_u * (tw - 1), b / plane.size_v * (th - 1)], axis=-1)
    vals, inside = sample_bilinear(texture, tex_xy)
    ok = inside & (depth > 1e-6) & (np.abs(denom) > 1e-9)
    img = np.where(ok[..., None], vals, background)
    return img.astype(np.float32)


def _look_at_pose(name: str, center: np.ndarray, target: np.ndarray,
                  roll_deg: float) -> PoseRecord:
    """World-to-camera pose looking from center toward target; camera z
    forward, y down (image convention)."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up_hint = np.array([np.sin(np.deg2rad(roll_deg)), np.cos(np.deg2rad(roll_deg)), 0.0])
    x = np.cross(fwd, up_hint)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)  # right-handed with z=fwd; points image-down
    r = np.stack([x, y, fwd])  # rows: camera axes in world coordinates
    t = -r @ center
    return PoseRecord(name=name, q=rot_to_quat(r), t=t)


@dataclass
class SynthBenchmark:
    db_images: list[np.ndarray]
    db_poses: list[PoseRecord]
    query_images: list[np.ndarray]
    query_poses: list[PoseRecord]
    plane: PlaneGeometry
    intrinsics: CameraIntrinsics
    extras: dict = field(default_factory=dict)


def synth_benchmark(n_db: int, n_q: int, texture_image: np.ndarray, seed: int,
                    intr: CameraIntrinsics | None = None,
                    plane_size_m: float = 10.0,
                    height_range=(5.5, 8.0),
                    center_jitter_m: float = 1.6,
                    target_jitter_m: float = 1.0,
                    max_roll_deg: float = 10.0,
                    query_shift=None) -> SynthBenchmark:
    """Textured z=0 plane viewed from randomized overhead poses.

    Poses keep the full view on the texture (bounded tilt via separate
    center/target jitter, bounded height). query_shift, when given, is
    applied to rendered query images (appearance change with unchanged
    geometry and ground truth). Deterministic given seed.
    """
    th, tw = texture_image.shape[:2]
    if min(th, tw) < 64:
        raise ValueError("texture too small to render from")
    intr = intr or default_intrinsics()
    plane = PlaneGeometry(origin=np.zeros(3), e_u=np.array([1.0, 0, 0]),
                          e_v=np.array([0, 1.0, 0]), size_u=plane_size_m,
                          size_v=plane_size_m)
    rng = np.random.default_rng(seed)
    mid = plane_size_m / 2.0

    def draw_pose(name):
        for _ in range(100):
            cx, cy = mid + rng.uniform(-center_jitter_m, center_jitter_m, size=2)
            h = rng.uniform(*height_range)
            tx, ty = mid + rng.uniform(-target_jitter_m, target_jitter_m, size=2)
            roll = rng.uniform(-max_roll_deg, max_roll_deg)
            center = np.array([cx, cy, h])
            target = np.array([tx, ty, 0.0])
            if abs(center[2]) < 0.5:  # degenerate: camera (almost) in the plane
                continue
            return _look_at_pose(name, center, target, roll)
        raise RuntimeError("could not draw a non-degenerate pose")

    db_poses = [draw_pose(f"db_{i:03d}.png") for i in range(n_db)]
    q_poses = [draw_pose(f"query_{i:03d}.png") for i in range(n_q)]
    db_images = [render_plane_view(texture_image, plane, intr, p) for p in db_poses]
    q_images = [render_plane_view(texture_image, plane, intr, p) for p in q_poses]
    if query_shift is not None:
        q_images = [query_shift(img) for img in q_images]
    return SynthBenchmark(db_images=db_images, db_poses=db_poses,
                          query_images=q_images, query_poses=q_poses,
                          plane=plane, intrinsics=intr)


def make_retrieval(db_poses: list[PoseRecord], query_poses: list[PoseRecord],
                   k: int = 20):
    """Stand-in retrieval: database images ordered by camera-center distance."""
    entries = {}
    for q in query_poses:
        dists = [np.linalg.norm(q.camera_center - d.camera_center) for d in db_poses]
        order = np.argsort(dists, kind="stable")[:k]
        entries[q.name] = [db_poses[i].name for i in order]
    return entries


def backproject_to_plane(points_xy: np.ndarray, pose: PoseRecord,
                         intr: CameraIntrinsics, plane: PlaneGeometry):
    """Intersect pixel rays with the plane; returns (points3d, valid)."""
    pts = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    r = pose.rotation
    c = pose.camera_center
    rays = np.stack([(pts[:, 0] - intr.cx) / intr.fx,
                     (pts[:, 1] - intr.cy) / intr.fy,
                     np.ones(len(pts))], axis=1)
    dirs = rays @ r
    n = plane.normal
    denom = dirs @ n
    num = (plane.origin - c) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = num / denom
    valid = (np.abs(denom) > 1e-9) & (depth > 1e-6)
    pts3d = c + dirs * np.where(valid, depth, 0.0)[:, None]
    return pts3d, valid


def project_points(points3d: np.ndarray, rot: np.ndarray, t: np.ndarray,
                   intr: CameraIntrinsics):
    """World points -> (pixels, depths) through a world-to-camera pose."""
    cam = points3d @ rot.T + t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def _normalize_2d(pts: np.ndarray):
    mean = pts.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
    m = np.array([[scale, 0, -scale * mean[0]],
                  [0, scale, -scale * mean[1]],
                  [0, 0, 1.0]])
    return m


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT for src (N,2) plane coords -> dst (N,2) pixels."""
    n = len(src)
    ts, td = _normalize_2d(src), _normalize_2d(dst)
    s = (np.hstack([src, np.ones((n, 1))]) @ ts.T)
    d = (np.hstack([dst, np.ones((n, 1))]) @ td.T)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = s
    a[0::2, 6:9] = -d[:, 0:1] * s
    a[1::2, 3:6] = s
    a[1::2, 6:9] = -d[:, 1:2] * s
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if sv[-2] < 1e-12:  # degenerate configuration (collinear points)
        return None
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def _pose_from_plane_homography(h: np.ndarray, intr: CameraIntrinsics,
                                plane: PlaneGeometry, sample_ab: np.ndarray):
    """Decompose K^-1 H into the camera pose (world frame).

    The projective sign is fixed by requiring the sampled plane points to
    sit in front of the camera.
    """
    m = np.linalg.inv(intr.matrix) @ h
    m1, m2, m3 = m[:, 0], m[:, 1], m[:, 2]
    norm = (np.linalg.norm(m1) + np.linalg.norm(m2)) / 2.0
    if norm < 1e-12:
        return None
    r1, r2, tp = m1 / norm, m2 / norm, m3 / norm
    depths = sample_ab @ np.stack([r1[2], r2[2]]) + tp[2]
    if depths.sum() < 0:
        r1, r2, tp = -r1, -r2, -tp
    r3 = np.cross(r1, r2)
    rp = np.stack([r1, r2, r3], axis=1)
    u, _, vt = np.linalg.svd(rp)
    rp = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    # plane frame -> world frame
    basis = np.stack([plane.e_u, plane.e_v, plane.normal], axis=1)
    rot = rp @ basis.T
    t = tp - rot @ plane.origin
    return rot, t


def ransac_pnp_plane(points2d: np.ndarray, points3d: np.ndarray,
                     intr: CameraIntrinsics, plane: PlaneGeometry, seed: int = 0,
                     iters: int = RANSAC_ITERS, inlier_px: float = RANSAC_INLIER_PX,
                     min_inliers: int = MIN_INLIERS):
    """Robust pose from coplanar 2D-3D correspondences.

    Returns (rot, t, inlier_mask) or None when consensus stays below
    min_inliers. Deterministic given seed.
    """
    pts2d = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    pts3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    n = len(pts2d)
    if n < max(RANSAC_MIN_SET, 1):
        return None
    plane_ab = np.stack([(pts3d - plane.origin) @ plane.e_u,
                         (pts3d - plane.origin) @ plane.e_v], axis=1)

    def score(rot, t):
        proj, z = project_points(pts3d, rot, t, intr)
        err = np.linalg.norm(proj - pts2d, axis=1)
        return (z > 0) & (err <= inlier_px), err

    rng = np.random.default_rng(seed)
    best = None  # (count, -mean_err, rot, t, mask)
    for _ in range(iters):
        pick = rng.choice(n, size=RANSAC_MIN_SET, replace=False)
        h = _dlt_homography(plane_ab[pick], pts2d[pick])
        if h is None:
            continue
        pose = _pose_from_plane_homography(h, intr, plane, plane_ab[pick])
        if pose is None:
            continue
        mask, err = score(*pose)
        count = int(mask.sum())
        if count == 0:
            continue
        key = (count, -float(err[mask].mean()))
        if best is None or key > best[0]:
            best = (key, pose, mask)

    if best is None or int(best[2].sum()) < min_inliers:
        return None

    mask = best[2]
    for _ in range(2):  # refit on consensus, then re-score
        h = _dlt_homography(plane_ab[mask], pts2d[mask])
        if h is None:
            break
        pose = _pose_from_plane_homography(h, intr, plane, plane_ab[mask])
        if pose is None:
            break
        new_mask, _ = score(*pose)
        if int(new_mask.sum()) < min_inliers:
            break
        best = (best[0], pose, new_mask)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask

    (_, pose, mask) = best
    return pose[0], pose[1], mask


def localize(query_features: FeatureSet, retrieved_names: list[str],
             db_features: dict[str, FeatureSet], db_poses: dict[str, PoseRecord],
             plane: PlaneGeometry, intr: CameraIntrinsics,
             query_name: str = "query", seed: int = 0) -> PoseRecord | None:
    """Estimate a query pose from pooled 2D-3D matches; None on failure."""
    pts2d, pts3d = [], []
    for name in retrieved_names:
        db = db_features.get(name)
        pose = db_poses.get(name)
        if db is None or pose is None:
            raise KeyError(f"retrieved image '{name}' missing features or pose")
        if len(db) == 0 or len(query_features) == 0:
            continue
        matches = mutual_nn(query_features.descriptors, db.descriptors)
        if len(matches) == 0:
            continue
        q_xy = query_features.keypoints[matches.pairs[:, 0], :2]
        d_xy = db.keypoints[matches.pairs[:, 1], :2]
        p3d, valid = backproject_to_plane(d_xy, pose, intr, plane)
        pts2d.append(q_xy[valid])
        pts3d.append(p3d[valid])

    if not pts2d:
        return None
    pts2d = np.concatenate(pts2d)
    pts3d = np.concatenate(pts3d)
    result = ransac_pnp_plane(pts2d, pts3d, intr, plane, seed=seed)
    if result is None:
        return None
    rot, t, _ = result
    return PoseRecord(name=query_name, q=rot_to_quat(rot), t=t)
