"""Dataset manifests, style-pool bookkeeping, color augmentation and the
per-epoch pair sampler."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .imio import IMAGE_EXTENSIONS, looks_like_image

log = logging.getLogger(__name__)

STYLE_CATEGORIES = ("cloud", "dusk", "mist", "night", "rain", "snow")


@dataclass
class DatasetManifest:
    """Per-scene capped list of (scene_id, image_path) entries."""

    entries: list[tuple[str, str]]
    per_scene_cap: int

    def __post_init__(self):
        if self.per_scene_cap < 1:
            raise ValueError("per_scene_cap must be positive")
        paths = [p for _, p in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest contains duplicate image paths")
        counts: dict[str, int] = {}
        for scene, _ in self.entries:
            counts[scene] = counts.get(scene, 0) + 1
        over = [s for s, n in counts.items() if n > self.per_scene_cap]
        if over:
            raise ValueError(f"scenes exceed per_scene_cap: {over}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def image_paths(self) -> list[str]:
        return [p for _, p in self.entries]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent
        lines = [f"# per_scene_cap={self.per_scene_cap}"]
        for scene, img in self.entries:
            lines.append(f"{scene}\t{_relativize(img, base)}")
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        cap = None
        entries = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "per_scene_cap=" in line:
                    cap = int(line.split("per_scene_cap=")[1])
                continue
            scene, rel = line.split("\t")
            entries.append((scene, str((base / rel).resolve())))
        if cap is None:
            cap = max(1, len(entries))
        return cls(entries=entries, per_scene_cap=cap)


@dataclass
class StylePool:
    """Style exemplar images grouped by appearance category."""

    categories: list[str]
    exemplars: dict[str, list[str]]

    def __post_init__(self):
        unknown = [c for c in self.categories if c not in STYLE_CATEGORIES]
        if unknown:
            raise ValueError(f"unknown style categories {unknown}; allowed: {STYLE_CATEGORIES}")
        for c in self.categories:
            if not self.exemplars.get(c):
                raise ValueError(f"style category '{c}' has no exemplars")

    @classmethod
    def from_dir(cls, style_dir) -> "StylePool":
        style_dir = Path(style_dir)
        cats = sorted(
            d.name for d in style_dir.iterdir() if d.is_dir() and d.name in STYLE_CATEGORIES
        )
        if not cats:
            raise ValueError(f"no style category directories under {style_dir}")
        exemplars = {
            c: sorted(
                str(p) for p in (style_dir / c).iterdir()
                if p.suffix.lower() in IMAGE_EXTENSIONS
            )
            for c in cats
        }
        return cls(categories=cats, exemplars=exemplars)

    def items(self):
        """Yield (category, exemplar_id, path) over the whole pool."""
        for c in self.categories:
            for i, p in enumerate(self.exemplars[c]):
                yield c, str(i), p

    def size(self) -> int:
        return sum(len(self.exemplars[c]) for c in self.categories)


@dataclass
class StylizedIndex:
    """original image -> [(category, exemplar_id, stylized_path)]."""

    entries: dict[str, list[tuple[str, str, str]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def paths_for(self, original: str) -> list[str]:
        return [p for _, _, p in self.entries[original]]

    def add(self, original: str, category: str, exemplar_id: str, stylized: str) -> None:
        self.entries.setdefault(original, []).append((category, exemplar_id, stylized))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent
        lines = []
        for original in sorted(self.entries):
            for cat, ex, styl in self.entries[original]:
                lines.append(
                    f"{_relativize(original, base)}\t{cat}\t{ex}\t{_relativize(styl, base)}"
                )
        path.write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path) -> "StylizedIndex":
        path = Path(path)
        base = path.parent
        idx = cls()
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            original, cat, ex, styl = line.split("\t")
            idx.add(str((base / original).resolve()), cat, ex, str((base / styl).resolve()))
        return idx


def _relativize(p, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())


def build_manifest(root_dir, per_scene_cap: int, seed: int) -> DatasetManifest:
    """Sample up to per_scene_cap images per scene subdirectory of root_dir.

    Selection is uniform without replacement and deterministic given seed;
    files that do not look like images are skipped with a warning.
    """
    root = Path(root_dir)
    scenes = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if not scenes:
        raise ValueError(f"no scenes found under {root_dir}")

    entries: list[tuple[str, str]] = []
    for scene_dir in scenes:
        candidates = sorted(
            p for p in scene_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        usable = []
        for p in candidates:
            if looks_like_image(p):
                usable.append(p)
            else:
                log.warning("skipping unreadable image %s", p)
        if not usable:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(scene_dir.name.encode())])
        take = min(per_scene_cap, len(usable))
        chosen = rng.choice(len(usable), size=take, replace=False)
        for i in sorted(chosen):
            entries.append((scene_dir.name, str(usable[i].resolve())))
    return DatasetManifest(entries=entries, per_scene_cap=per_scene_cap)


def sample_epoch_pairs(
    manifest: DatasetManifest,
    index: StylizedIndex | None,
    epoch: int,
    seed: int,
) -> list[tuple[str, str, str]]:
    """Pick one training partner per manifest image for this epoch.

    With a non-empty stylized index the partner is one uniformly drawn
    stylization of the original ('stylized'); otherwise the image itself
    ('self'). Deterministic given (epoch, seed).
    """
    styled = index is not None and len(index) > 0
    pairs = []
    for i, (_, img) in enumerate(manifest.entries):
        if not styled:
            pairs.append((img, img, "self"))
            continue
        if img not in index.entries:
            raise KeyError(f"image missing from stylized index: {img}")
        options = index.paths_for(img)
        rng = np.random.default_rng([seed, epoch, i])
        pairs.append((img, options[int(rng.integers(len(options)))], "stylized"))
    return pairs


@dataclass
class ColorAugConfig:
    """Random photometric jitter; each transform fires with its own probability.

    Ranges collapsed onto their identity value (and jpeg quality 100) make
    the corresponding transform a no-op.
    """

    brightness_delta_range: tuple[float, float] = (-0.2, 0.2)
    contrast_factor_range: tuple[float, float] = (0.7, 1.3)
    hue_shift_range: tuple[float, float] = (-18.0, 18.0)
    saturation_factor_range: tuple[float, float] = (0.7, 1.3)
    gaussian_noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    jpeg_quality_range: tuple[int, int] = (60, 100)
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_hue_saturation: float = 0.5
    p_noise: float = 0.5
    p_jpeg: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in (
            "brightness_delta_range", "contrast_factor_range", "hue_shift_range",
            "saturation_factor_range", "gaussian_noise_sigma_range", "jpeg_quality_range",
        ):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is not well-ordered: {(lo, hi)}")
        for name in ("p_brightness", "p_contrast", "p_hue_saturation", "p_noise", "p_jpeg"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def disabled(cls) -> "ColorAugConfig":
        return cls(p_brightness=0, p_contrast=0, p_hue_saturation=0, p_noise=0, p_jpeg=0)


def color_augment(image: np.ndarray, cfg: ColorAugConfig, draw_seed: int) -> np.ndarray:
    """Apply the configured random color transforms; output clamped to [0, 1].

    Deterministic given (cfg.seed, draw_seed). Degenerate configurations
    reduce to the identity.
    """
    rng = np.random.default_rng((cfg.seed, int(draw_seed)))
    out = np.asarray(image, dtype=np.float32)

    if rng.random() < cfg.p_brightness:
        delta = rng.uniform(*cfg.brightness_delta_range)
        if delta != 0.0:
            out = np.clip(out + np.float32(delta), 0.0, 1.0)

    if rng.random() < cfg.p_contrast:
        factor = rng.uniform(*cfg.contrast_factor_range)
        if factor != 1.0:
            out = np.clip((out - 0.5) * np.float32(factor) + 0.5, 0.0, 1.0)

    if rng.random() < cfg.p_hue_saturation:
        hue = rng.uniform(*cfg.hue_shift_range)
        sat = rng.uniform(*cfg.saturation_factor_range)
        if hue != 0.0 or sat != 1.0:
            hsv = cv2.cvtColor(np.ascontiguousarray(out), cv2.COLOR_RGB2HSV)
            hsv[..., 0] = np.mod(hsv[..., 0] + np.float32(hue), 360.0)
            hsv[..., 1] = np.clip(hsv[..., 1] * np.float32(sat), 0.0, 1.0)
            out = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)

    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(*cfg.gaussian_noise_sigma_range)
        if sigma > 0.0:
            noise = rng.normal(0.0, sigma, size=out.shape).astype(np.float32)
            out = np.clip(out + noise, 0.0, 1.0)

    if rng.random() < cfg.p_jpeg:
        quality = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))
        if quality < 100:
            u8 = np.rint(out * 255.0).astype(np.uint8)
            ok, buf = cv2.imencode(".jpg", u8[:, :, ::-1], [cv2.IMWRITE_JPEG_QUALITY, quality])
            if ok:
                out = cv2.imdecode(buf, cv2.IMREAD_COLOR)[:, :, ::-1].astype(np.float32) / 255.0

    return out
