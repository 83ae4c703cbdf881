"""Photorealistic appearance transfer via linear covariance matching.

The mapping is the closed-form symmetric linear transport between two
Gaussian color models: content pixels are recentered, pushed through
T = Sc^(-1/2) (Sc^(1/2) Ss Sc^(1/2))^(1/2) Sc^(-1/2) and shifted onto the
style mean. Edges and structure are preserved exactly because the map is
the same affine function at every pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, StylePool, StylizedIndex
from .imio import load_image, save_image

log = logging.getLogger(__name__)


@dataclass
class ColorStats:
    """Per-channel mean and pixel covariance of an image."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        if np.abs(self.covariance - self.covariance.T).max() > 1e-8:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance).min() < -1e-10:
            raise ValueError("covariance must be positive semi-definite")


def fit_color_stats(image: np.ndarray) -> ColorStats:
    """Mean and (1/N-normalized) covariance over all pixels."""
    px = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    if px.shape[0] < 2:
        raise ValueError("need at least 2 pixels to fit color statistics")
    mean = px.mean(axis=0)
    centered = px - mean
    cov = centered.T @ centered / px.shape[0]
    return ColorStats(mean=mean, covariance=cov)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _inv_sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v / np.sqrt(np.clip(w, 1e-300, None))) @ v.T


def transfer_matrix(content_cov: np.ndarray, style_cov: np.ndarray, eps: float) -> np.ndarray:
    """Symmetric linear map aligning content covariance to style covariance."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    sc = np.asarray(content_cov, dtype=np.float64) + eps * np.eye(3)
    ss = np.asarray(style_cov, dtype=np.float64) + eps * np.eye(3)
    sc_half = _sqrtm_psd(sc)
    sc_inv_half = _inv_sqrtm_psd(sc)
    inner = _sqrtm_psd(sc_half @ ss @ sc_half)
    return sc_inv_half @ inner @ sc_inv_half


def apply_transfer(
    content: np.ndarray,
    style_stats: ColorStats,
    strength: float = 1.0,
    eps: float = 1e-5,
) -> np.ndarray:
    """Push content pixels toward the style's color statistics.

    strength blends between the input (0) and the fully mapped image (1);
    the result is clamped to [0, 1].
    """
    img = np.asarray(content, dtype=np.float64)
    if strength == 0.0:
        return img.copy()
    content_stats = fit_color_stats(img)
    t = transfer_matrix(content_stats.covariance, style_stats.covariance, eps)
    flat = img.reshape(-1, 3)
    mapped = (flat - content_stats.mean) @ t.T + style_stats.mean
    out = (1.0 - strength) * flat + strength * mapped
    return np.clip(out.reshape(img.shape), 0.0, 1.0)


def stylized_name(original, category: str, exemplar_id: str) -> str:
    return f"{Path(original).stem}__{category}_{exemplar_id}.png"


def build_stylized_index(
    manifest: DatasetManifest,
    pool: StylePool,
    out_dir,
    strength: float = 1.0,
    eps: float = 1e-5,
) -> StylizedIndex:
    """Write one stylization per (image, category, exemplar) and index them.

    Re-runs skip files that already exist; images that fail to stylize are
    logged and left out of the index.
    """
    if pool.size() == 0:
        raise ValueError("style pool is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    style_stats = [(c, ex, fit_color_stats(load_image(p))) for c, ex, p in pool.items()]

    index = StylizedIndex()
    for scene, img_path in manifest.entries:
        # scene subdirectory keeps same-stem originals from clobbering each other
        scene_dir = out_dir / scene
        try:
            content = None
            for category, exemplar_id, stats in style_stats:
                dest = scene_dir / stylized_name(img_path, category, exemplar_id)
                if not dest.exists():
                    if content is None:
                        content = load_image(img_path)
                    save_image(dest, apply_transfer(content, stats, strength=strength, eps=eps))
                index.add(str(Path(img_path).resolve()), category, exemplar_id, str(dest.resolve()))
        except Exception:
            log.exception("stylization failed for %s; skipping", img_path)
            index.entries.pop(str(Path(img_path).resolve()), None)
    return index
