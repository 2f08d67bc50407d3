"""8-bit RGB image I/O and conversions between HxWx3 uint8 and 1x3xHxW float tensors."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path, image: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path, format=fmt)


def to_tensor(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) / 255.0).transpose(2, 0, 1)[None]


def to_uint8(tensor: np.ndarray) -> np.ndarray:
    return np.clip(np.round(tensor[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def gray_to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(gray, dtype=np.uint8)[..., None], 3, axis=2)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]
