"""Test-time multi-scale keypoint extraction.

The image is pre-scaled down by fourth-root-of-two steps until its long
side fits max_dim, then processed and further downsampled level by level
while either dimension is still >= min_dim (tiny inputs get exactly one
level). Per level: forward pass, NMS on the repeatability map, dual 0.7
score thresholds, bilinear descriptor lookup. Levels are pooled, sorted by
detection score (repeatability x reliability) and cut to top_k.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import minimum_filter

from .model import FeatureNet, infer

RFT1_MAGIC = b"RFT1"


@dataclass
class ExtractConfig:
    max_dim: int = 1024
    min_dim: int = 256
    scale_factor: float = 2 ** 0.25
    score_threshold: float = 0.7
    nms_radius_px: int = 3
    top_k: int = 5000

    def __post_init__(self):
        if self.max_dim <= self.min_dim:
            raise ValueError("max_dim must exceed min_dim")
        if self.scale_factor <= 1.0:
            raise ValueError("scale_factor must be > 1")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must be in (0, 1)")
        if self.nms_radius_px < 1:
            raise ValueError("nms_radius_px must be >= 1")


@dataclass
class FeatureSet:
    """Sparse keypoints: (x, y, scale) in original-image pixels + scores."""

    keypoints: np.ndarray  # (K, 3) float32: x, y, scale
    repeatability: np.ndarray  # (K,)
    reliability: np.ndarray  # (K,)
    descriptors: np.ndarray  # (K, D) float32, unit rows

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def detection_scores(self) -> np.ndarray:
        return self.repeatability * self.reliability

    @classmethod
    def empty(cls, descriptor_dim: int) -> "FeatureSet":
        return cls(
            keypoints=np.zeros((0, 3), np.float32),
            repeatability=np.zeros(0, np.float32),
            reliability=np.zeros(0, np.float32),
            descriptors=np.zeros((0, descriptor_dim), np.float32),
        )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def build_pyramid(image_dims: tuple[int, int], cfg: ExtractConfig) -> list[tuple[int, int]]:
    """Level dimensions (H_i, W_i) for an image of the given size.

    Dimensions are tracked as floats against the cumulative scale and
    rounded half-up at emission; an input already smaller than min_dim in
    both dimensions still yields one level.
    """
    h, w = float(image_dims[0]), float(image_dims[1])
    inv = 1.0 / cfg.scale_factor
    while max(h, w) > cfg.max_dim * (1 + 1e-9):
        h *= inv
        w *= inv
    levels: list[tuple[int, int]] = []
    while True:
        rh, rw = _round_half_up(h), _round_half_up(w)
        if levels and max(rh, rw) < cfg.min_dim:
            break
        levels.append((rh, rw))
        h *= inv
        w *= inv
    return levels


def nms(score_map: np.ndarray, radius: int) -> np.ndarray:
    """Strict local maxima of a (2*radius+1)^2 window, as (x, y) rows.

    Ties go to the smaller (y, x) pixel; windows are truncated at the
    border. Output is ordered by descending score (then y, x).
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    s = np.asarray(score_map)
    h, w = s.shape
    ys, xs = np.unravel_index(np.arange(h * w), (h, w))
    # total order: score desc, then y, then x -- strict minimum of rank
    # inside the window is exactly the tie-broken local maximum
    order = np.lexsort((xs, ys, -s.ravel()))
    rank = np.empty(h * w, dtype=np.int64)
    rank[order] = np.arange(h * w)
    rank = rank.reshape(h, w)
    best = minimum_filter(rank, size=2 * radius + 1, mode="constant", cval=h * w)
    ky, kx = np.nonzero(rank == best)
    by_rank = np.argsort(rank[ky, kx])
    return np.stack([kx[by_rank], ky[by_rank]], axis=1)


def _sample_descriptors(desc_map: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear descriptor lookup + renormalization at (x, y) locations."""
    from .homography import sample_bilinear

    vals, _ = sample_bilinear(desc_map, xy)
    norms = np.linalg.norm(vals, axis=-1, keepdims=True)
    return vals / np.clip(norms, 1e-12, None)


def extract_multiscale(image: np.ndarray, net, cfg: ExtractConfig) -> FeatureSet:
    """Run the pyramid and pool keypoints into one sorted, truncated set.

    net is either a FeatureNet or any callable image -> FeatureMaps (handy
    for stubs). An empty result is valid, not an error.
    """
    feature_fn = (lambda img: infer(net, img)) if isinstance(net, FeatureNet) else net
    h0, w0 = image.shape[:2]
    levels = build_pyramid((h0, w0), cfg)

    # cumulative downsampling factor of the first level (pre-scaling steps)
    pre_steps = 0
    h, w = float(h0), float(w0)
    while max(h, w) > cfg.max_dim * (1 + 1e-9):
        h /= cfg.scale_factor
        w /= cfg.scale_factor
        pre_steps += 1

    kp_all, rep_all, rel_all, desc_all = [], [], [], []
    for i, (lh, lw) in enumerate(levels):
        resized = image if (lh, lw) == (h0, w0) else cv2.resize(
            image.astype(np.float32), (lw, lh), interpolation=cv2.INTER_AREA
        )
        maps = feature_fn(resized)
        peaks = nms(np.asarray(maps.repeatability), cfg.nms_radius_px)
        if len(peaks) == 0:
            continue
        px, py = peaks[:, 0], peaks[:, 1]
        rep = np.asarray(maps.repeatability)[py, px]
        rel = np.asarray(maps.reliability)[py, px]
        keep = (rep >= cfg.score_threshold) & (rel >= cfg.score_threshold)
        if not keep.any():
            continue
        px, py, rep, rel = px[keep], py[keep], rep[keep], rel[keep]

        desc = _sample_descriptors(
            np.asarray(maps.descriptors), np.stack([px, py], axis=1).astype(np.float64)
        )
        # map back to original pixels through the pixel-center convention
        ox = np.clip((px + 0.5) * (w0 / lw) - 0.5, 0, w0 - 1)
        oy = np.clip((py + 0.5) * (h0 / lh) - 0.5, 0, h0 - 1)
        scale = cfg.scale_factor ** (pre_steps + i)
        kp_all.append(np.stack([ox, oy, np.full_like(ox, scale, dtype=np.float64)], axis=1))
        rep_all.append(rep)
        rel_all.append(rel)
        desc_all.append(desc)

    if not kp_all:
        d = getattr(getattr(net, "cfg", None), "descriptor_dim", 0)
        return FeatureSet.empty(d)

    kp = np.concatenate(kp_all).astype(np.float32)
    rep = np.concatenate(rep_all).astype(np.float32)
    rel = np.concatenate(rel_all).astype(np.float32)
    desc = np.concatenate(desc_all).astype(np.float32)
    order = np.argsort(-(rep.astype(np.float64) * rel.astype(np.float64)), kind="stable")
    order = order[: cfg.top_k]
    return FeatureSet(
        keypoints=kp[order],
        repeatability=rep[order],
        reliability=rel[order],
        descriptors=desc[order],
    )


def write_feature_file(path, features: FeatureSet) -> None:
    """RFT1: magic, uint32 K, uint32 D, K records of 5 float32
    (x, y, scale, repeatability, reliability), then KxD float32
    descriptors. Everything little-endian."""
    k = len(features)
    d = features.descriptors.shape[1]
    records = np.empty((k, 5), dtype="<f4")
    records[:, 0:3] = features.keypoints
    records[:, 3] = features.repeatability
    records[:, 4] = features.reliability
    with open(path, "wb") as fh:
        fh.write(RFT1_MAGIC)
        fh.write(struct.pack("<II", k, d))
        fh.write(records.tobytes())
        fh.write(features.descriptors.astype("<f4").tobytes())


def read_feature_file(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if raw[:4] != RFT1_MAGIC:
        raise ValueError(f"not an RFT1 file: {path}")
    k, d = struct.unpack("<II", raw[4:12])
    records = np.frombuffer(raw[12 : 12 + k * 5 * 4], dtype="<f4").reshape(k, 5)
    desc = np.frombuffer(raw[12 + k * 5 * 4 : 12 + k * 5 * 4 + k * d * 4], dtype="<f4")
    return FeatureSet(
        keypoints=records[:, 0:3].copy(),
        repeatability=records[:, 3].copy(),
        reliability=records[:, 4].copy(),
        descriptors=desc.reshape(k, d).copy(),
    )
