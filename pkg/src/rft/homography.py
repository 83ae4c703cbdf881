"""Random homographies, crop pairs and dense ground-truth warp fields.

Coordinate conventions used throughout:
  * points are (x, y) with pixel centers at integer coordinates,
  * a warp field lives on the second crop's pixel grid and stores, per pixel,
    the matching (x, y) location in the first crop plus a validity flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DET = 1e-8
MIN_HOMOGENEOUS_W = 1e-12


@dataclass
class Homography:
    """3x3 projective transform, normalized so mat[2, 2] == 1."""

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < MIN_HOMOGENEOUS_W:
            raise ValueError("homography has vanishing normalization element")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= MIN_DET:
            raise ValueError("homography is singular")
        self.mat = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.mat))

    def compose(self, other: "Homography") -> "Homography":
        """Return the transform applying `other` first, then `self`."""
        return Homography(self.mat @ other.mat)


@dataclass
class HomographyConfig:
    max_rotation_deg: float = 25.0
    scale_range: tuple[float, float] = (0.7, 1.4)
    max_perspective: float = 0.1
    max_translation_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        smin, smax = self.scale_range
        if smin <= 0 or smax < smin:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if min(self.max_rotation_deg, self.max_perspective, self.max_translation_frac) < 0:
            raise ValueError("homography magnitudes must be >= 0")


@dataclass
class WarpField:
    """Per-pixel correspondences from the second crop into the first.

    grid[y, x] = (u, v) position in the first crop matching pixel (x, y) of
    the second crop; valid[y, x] marks pixels whose correspondence lands
    inside the first crop.
    """

    grid: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.grid.ndim != 3 or self.grid.shape[2] != 2:
            raise ValueError(f"warp grid must be HxWx2, got {self.grid.shape}")
        if self.valid.shape != self.grid.shape[:2]:
            raise ValueError("warp valid mask does not match grid")
        if not np.all(np.isfinite(self.grid[self.valid])):
            raise ValueError("warp grid has non-finite values on valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]


@dataclass
class CropPair:
    crop_a: np.ndarray
    crop_b: np.ndarray
    warp: WarpField
    offset_a: tuple[int, int] = (0, 0)
    offset_b: tuple[int, int] = (0, 0)
    overlap: float = field(default=1.0)

    def __post_init__(self):
        ha, wa = self.crop_a.shape[:2]
        hb, wb = self.crop_b.shape[:2]
        if (ha, wa) != (hb, wb):
            raise ValueError("crops must share dimensions")
        if self.warp.shape != (hb, wb):
            raise ValueError("warp field does not match the second crop")


def warp_points(points, H: Homography, return_valid: bool = False):
    """Apply a projective transform to (N, 2) points.

    Points whose homogeneous coordinate collapses (|w| < 1e-12) come back as
    NaN; pass return_valid=True to get the mask as well.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ H.mat.T
    w = proj[:, 2]
    ok = np.abs(w) >= MIN_HOMOGENEOUS_W
    out = np.full_like(pts, np.nan)
    out[ok] = proj[ok, :2] / w[ok, None]
    if return_valid:
        return out, ok
    return out


def sample_homography(cfg: HomographyConfig, draw_seed: int, ref_size: int = 192) -> Homography:
    """Draw a random homography as translation * rotation * scale * perspective.

    Rotation, scale and perspective are anchored at the center of a
    ref_size x ref_size crop; translation and perspective magnitudes are
    expressed as fractions of ref_size. Deterministic given (cfg.seed,
    draw_seed); degenerate draws are rejected and resampled.
    """
    rng = np.random.default_rng((cfg.seed, int(draw_seed)))
    c = ref_size / 2.0
    to_center = np.array([[1, 0, c], [0, 1, c], [0, 0, 1]], dtype=np.float64)
    from_center = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1]], dtype=np.float64)

    for _ in range(100):
        theta = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        s = rng.uniform(*cfg.scale_range)
        t = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac, size=2) * ref_size
        p = rng.uniform(-cfg.max_perspective, cfg.max_perspective, size=2) / ref_size

        rot = np.array(
            [[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]]
        )
        scale = np.diag([s, s, 1.0])
        persp = np.array([[1, 0, 0], [0, 1, 0], [p[0], p[1], 1]], dtype=np.float64)
        trans = np.array([[1, 0, t[0]], [0, 1, t[1]], [0, 0, 1]], dtype=np.float64)

        m = trans @ to_center @ rot @ scale @ persp @ from_center
        if abs(np.linalg.det(m / m[2, 2])) > MIN_DET:
            return Homography(m)
    raise RuntimeError("could not sample a non-degenerate homography in 100 tries")


def sample_bilinear(image: np.ndarray, xy: np.ndarray):
    """Bilinearly sample an HxW[,C] image at (..., 2) locations.

    Returns (values, inside) where inside marks samples fully contained in
    [0, W-1] x [0, H-1]; outside samples are zero-filled.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    pts = np.asarray(xy, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None]

    vals = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    vals = np.where(inside[..., None], vals, 0.0)
    if squeeze:
        vals = vals[..., 0]
    return vals, inside


def warp_field_from_homography(
    H: Homography,
    offset_a: tuple[int, int],
    offset_b: tuple[int, int],
    crop_size: int,
    image_shape: tuple[int, int],
) -> tuple[WarpField, np.ndarray]:
    """Build the dense warp for a crop pair cut at the given offsets.

    The second crop shows image pixels H(p + offset_b); its warp entry is
    that source location expressed in first-crop coordinates. Also returns
    the source sampling coordinates so the caller can cut the actual crop.
    """
    ih, iw = image_shape
    ox_a, oy_a = offset_a
    ox_b, oy_b = offset_b
    ys, xs = np.mgrid[0:crop_size, 0:crop_size]
    canvas = np.stack([xs + ox_b, ys + oy_b], axis=-1).reshape(-1, 2)
    src, w_ok = warp_points(canvas, H, return_valid=True)
    src = src.reshape(crop_size, crop_size, 2)
    w_ok = w_ok.reshape(crop_size, crop_size)

    with np.errstate(invalid="ignore"):
        src_inside = (
            w_ok
            & (src[..., 0] >= 0)
            & (src[..., 0] <= iw - 1)
            & (src[..., 1] >= 0)
            & (src[..., 1] <= ih - 1)
        )
        grid = src - np.array([ox_a, oy_a], dtype=np.float64)
        in_a = (
            (grid[..., 0] >= 0)
            & (grid[..., 0] <= crop_size - 1)
            & (grid[..., 1] >= 0)
            & (grid[..., 1] <= crop_size - 1)
        )
    valid = src_inside & in_a
    grid = np.where(np.isfinite(grid), grid, 0.0)
    return WarpField(grid=grid, valid=valid), src


def make_crop_pair(
    image_a: np.ndarray,
    image_b: np.ndarray,
    H_ab: Homography,
    crop_size: int = 192,
    draw_seed: int = 0,
    min_overlap: float = 0.30,
    max_tries: int = 50,
) -> CropPair:
    """Cut a matched crop pair from two geometrically identical images.

    crop_a comes straight from image_a; crop_b is cut from the H-warped
    image_b (bilinear resampling, out-of-source pixels zero-filled and
    marked invalid). Placement is retried until at least min_overlap of
    crop_b's pixels have a valid correspondence into crop_a.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape[:2] != b.shape[:2]:
        raise ValueError("images must share pixel geometry")
    ih, iw = a.shape[:2]
    if ih < crop_size or iw < crop_size:
        raise ValueError(f"images must be at least {crop_size}px in both dimensions")

    rng = np.random.default_rng(int(draw_seed))
    H_inv = H_ab.inverse()
    half = crop_size / 2.0

    for _ in range(max_tries):
        ox_a = int(rng.integers(0, iw - crop_size + 1))
        oy_a = int(rng.integers(0, ih - crop_size + 1))
        # aim crop_b so its center back-projects near crop_a's center
        center_a = np.array([ox_a + half, oy_a + half])
        ideal = warp_points(center_a[None], H_inv)[0]
        if not np.all(np.isfinite(ideal)):
            continue
        jitter = rng.uniform(-crop_size / 4.0, crop_size / 4.0, size=2)
        ox_b, oy_b = np.round(ideal - half + jitter).astype(int)

        warp, src = warp_field_from_homography(
            H_ab, (ox_a, oy_a), (ox_b, oy_b), crop_size, (ih, iw)
        )
        overlap = float(warp.valid.mean())
        if overlap < min_overlap:
            continue

        crop_a = a[oy_a : oy_a + crop_size, ox_a : ox_a + crop_size].copy()
        crop_b, _ = sample_bilinear(b, src)
        return CropPair(
            crop_a=crop_a,
            crop_b=crop_b,
            warp=warp,
            offset_a=(ox_a, oy_a),
            offset_b=(int(ox_b), int(oy_b)),
            overlap=overlap,
        )
    raise RuntimeError(f"insufficient overlap: no >={min_overlap:.0%} placement in {max_tries} tries")
