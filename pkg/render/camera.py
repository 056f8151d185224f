"""Pinhole camera rig, ray generation and the rig text file.

Camera axes follow the usual image convention (x right, y down, z forward);
the ego frame is x forward, y left, z up. Pixel ``(u, v)`` is column ``u`` and
row ``v``, with pixel centers at integer coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from exceptions import ConfigurationError, DataError, MissingArtifactError
from geometry.pose import EgoPose

logger = logging.getLogger(__name__)

# Columns are the camera axes expressed in the ego frame.
_CAMERA_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraRig:
    K: np.ndarray
    cam_to_ego: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        extrinsic = np.asarray(self.cam_to_ego, dtype=np.float64)
        if K.shape != (3, 3) or extrinsic.shape != (4, 4):
            raise ConfigurationError(f"camera rig needs a 3x3 K and a 4x4 extrinsic, got {K.shape} and {extrinsic.shape}")
        if np.any(np.tril(K, -1) != 0.0):
            raise ConfigurationError("camera intrinsics must be upper-triangular")
        if K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise ConfigurationError(f"focal lengths must be positive, got fx={K[0, 0]} fy={K[1, 1]}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "cam_to_ego", extrinsic)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_ego[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_ego[:3, 3].copy()

    def pixel_grid(self) -> np.ndarray:
        """``[H, W, 2]`` pixel coordinates ``(u, v)`` of every pixel center."""
        h, w = self.image_size
        vs, us = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        return np.stack([us, vs], axis=-1)


def default_rig(image_size: Tuple[int, int], focal: float, height: float, pitch: float = 0.0) -> CameraRig:
    """Forward-looking camera at ``height`` meters above the ego origin.

    Positive ``pitch`` tilts the optical axis towards the ground.
    """
    h, w = image_size
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    c, s = math.cos(pitch), math.sin(pitch)
    tilt = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = tilt @ _CAMERA_AXES
    extrinsic[:3, 3] = (0.0, 0.0, height)
    return CameraRig(K, extrinsic, (h, w))


def ego_pose_matrix(pose: EgoPose) -> np.ndarray:
    """Lift a planar ego pose to a 4x4 rigid transform (z unchanged)."""
    m = np.eye(4)
    m[:2, :2] = pose.rotation()
    m[:2, 3] = pose.translation()
    return m


def camera_directions(rig: CameraRig, pixels: Optional[np.ndarray] = None) -> np.ndarray:
    """Unit ray directions in the camera frame for ``[..., 2]`` pixels."""
    if abs(np.linalg.det(rig.K)) < 1e-12:
        raise ConfigurationError("camera intrinsics are singular")
    pixels = rig.pixel_grid() if pixels is None else np.asarray(pixels, dtype=np.float64)
    homogeneous = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    dirs = homogeneous @ np.linalg.inv(rig.K).T
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def generate_rays(rig: CameraRig, pixels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit directions in the ego frame, one per pixel."""
    dirs = camera_directions(rig, pixels) @ rig.rotation.T
    origins = np.broadcast_to(rig.center, dirs.shape).copy()
    return origins, dirs


def project(rig: CameraRig, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project ego-frame points; returns ``[..., 2]`` pixels and camera-frame depth z."""
    local = (np.asarray(points, dtype=np.float64) - rig.center) @ rig.rotation
    z = local[..., 2]
    image = local @ rig.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = image[..., :2] / z[..., None]
    return pixels, z


# -- rig.txt -----------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def rig_write(rig: CameraRig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(
        f"image_size {rig.image_size[0]} {rig.image_size[1]}\n"
        f"K {_fmt(rig.K)}\n"
        f"cam_to_ego {_fmt(rig.cam_to_ego)}\n",
        encoding="utf-8",
    )
    return path


def rig_read(path: Union[str, Path]) -> CameraRig:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    fields = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, *values = line.split()
            fields[key] = values
    try:
        size = tuple(int(v) for v in fields["image_size"])
        K = np.array([float(v) for v in fields["K"]]).reshape(3, 3)
        extrinsic = np.array([float(v) for v in fields["cam_to_ego"]]).reshape(4, 4)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed rig file {path}: {exc}")
    return CameraRig(K, extrinsic, size)
