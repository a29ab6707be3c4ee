"""Binary PPM (P6) / PGM (P5) reading and writing via Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """``(3, H, W)`` float64 in ``[0, 1]``; greyscale is replicated to RGB."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            raise ValueError(f"{path}: unsupported mode {im.mode}")
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write ``(3, H, W)`` as P6 or ``(H, W)`` / ``(1, H, W)`` as P5."""
    path = Path(path)
    a = to_uint8(img)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 2:
        Image.fromarray(a, "L").save(path, format="PPM")
    elif a.ndim == 3 and a.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(a.transpose(1, 2, 0)), "RGB").save(path, format="PPM")
    else:
        raise ValueError(f"cannot write array of shape {img.shape}")
