"""PPM colour images, 16-bit PGM depth maps and image resizing through Pillow."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from exceptions import DataError, MissingArtifactError

logger = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0  # stored unit: millimeters
DEPTH_MAX = 65535


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def image_write(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write an ``[H, W, 3]`` image (uint8, or floats in [0, 1]) as binary PPM."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DataError(f"PPM images must be [H, W, 3], got {image.shape}")
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Image.fromarray(image).save(path, format="PPM")
    return path


def image_read(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def depth_sidecar(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def quantize_depth(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Meters to integer millimeters; 0 marks pixels without depth."""
    mm = np.clip(np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE), 1, DEPTH_MAX)
    return np.where(valid, mm, 0).astype(np.uint16)


def depth_write(depth: np.ndarray, valid: np.ndarray, path: Union[str, Path], near: float, far: float) -> Path:
    """16-bit PGM in millimeters plus a ``<name>.txt`` sidecar holding near/far."""
    path = Path(path)
    mm = quantize_depth(depth, valid)
    Image.fromarray(mm.astype(np.int32)).save(path, format="PPM")
    depth_sidecar(path).write_text(f"near {near:.17g}\nfar {far:.17g}\nunit mm\n", encoding="utf-8")
    return path


def depth_read(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Depth in meters and the mask of pixels that carry a depth value."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    with Image.open(path) as img:
        mm = np.asarray(img, dtype=np.int64)
    return mm / DEPTH_SCALE, mm > 0


def read_depth_range(path: Union[str, Path]) -> Tuple[float, float]:
    sidecar = depth_sidecar(path)
    if not sidecar.is_file():
        raise MissingArtifactError(sidecar)
    fields = dict(line.split(None, 1) for line in sidecar.read_text(encoding="utf-8").splitlines() if line.strip())
    try:
        return float(fields["near"]), float(fields["far"])
    except (KeyError, ValueError):
        raise DataError(f"malformed depth sidecar {sidecar}")


def resize_images(images: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[N, h, w, 3]`` float images to ``size = (H, W)``."""
    images = np.asarray(images, dtype=np.float64)
    height, width = size
    out = np.empty((images.shape[0], height, width, images.shape[-1]))
    for n, frame in enumerate(images):
        for c in range(frame.shape[-1]):
            channel = Image.fromarray(frame[..., c].astype(np.float32))
            out[n, ..., c] = np.asarray(channel.resize((width, height), Image.Resampling.BILINEAR))
    return out
