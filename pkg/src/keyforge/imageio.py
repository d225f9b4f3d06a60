"""8-bit PNG I/O for float rasters in [0, 1] and boolean masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoFailure


def read_image(path: str | Path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]; shape (H, W) for gray, (H, W, 3) for color."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "1", "I;16", "I", "P", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    data = to_uint8(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    try:
        Image.fromarray(data).save(path, format="PNG", compress_level=1)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mask(path: str | Path) -> np.ndarray:
    """Load a 1-bit or 8-bit PNG mask; pixels above mid-gray are foreground."""
    img = read_image(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img > 0.5


def write_mask(path: str | Path, bits: np.ndarray) -> None:
    write_image(path, np.asarray(bits, dtype=np.float64))
