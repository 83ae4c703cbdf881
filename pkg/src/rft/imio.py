"""Image file helpers: everything in-memory is RGB float32 in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

# magic byte prefixes we accept without attempting a full decode
_SIGNATURES = (
    b"\x89PNG\r\n\x1a\n",
    b"\xff\xd8\xff",  # jpeg
    b"BM",  # bmp
)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


def looks_like_image(path) -> bool:
    try:
        with open(path, "rb") as f:
            head = f.read(8)
    except OSError:
        return False
    return any(head.startswith(sig) for sig in _SIGNATURES)


def load_image(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(f"cannot read image: {path}")
    return bgr[:, :, ::-1].astype(np.float32) / 255.0


def save_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), u8[:, :, ::-1]):
        raise IOError(f"cannot write image: {path}")


def resize_max_dim(image: np.ndarray, max_dim: int) -> np.ndarray:
    h, w = image.shape[:2]
    if max(h, w) <= max_dim:
        return image
    scale = max_dim / max(h, w)
    out = cv2.resize(image, (max(1, round(w * scale)), max(1, round(h * scale))),
                     interpolation=cv2.INTER_AREA)
    return out
