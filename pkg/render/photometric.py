"""Reprojection of adjacent frames through rendered depth and the photometric consistency loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError
from geometry.pose import EgoPose
from render.camera import CameraRig, camera_directions, ego_pose_matrix
from tensor.core import Tensor, as_tensor, getitem, reshape, stack, tabs
from tensor.ops import amin, grid_sample, matmul

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
INVALID_ERROR = 1e3
_MIN_Z = 1e-3


def relative_camera_transform(rig: CameraRig, target_pose: EgoPose, source_pose: EgoPose) -> np.ndarray:
    """4x4 transform taking target-camera coordinates to source-camera coordinates."""
    target_to_world = ego_pose_matrix(target_pose) @ rig.cam_to_ego
    source_to_world = ego_pose_matrix(source_pose) @ rig.cam_to_ego
    return np.linalg.inv(source_to_world) @ target_to_world


def reproject(
    source_image,
    depth,
    target_pose: EgoPose,
    source_pose: EgoPose,
    rig: CameraRig,
) -> Tuple[Tensor, np.ndarray]:
    """Warp ``source_image`` into the target view using per-pixel target ray distances.

    Returns the warped ``[H, W, 3]`` image and the mask of target pixels whose
    reprojection lands inside the source frame in front of the camera.
    """
    source_image, depth = as_tensor(source_image), as_tensor(depth)
    h, w = rig.image_size
    if tuple(depth.shape) != (h, w) or tuple(source_image.shape[:2]) != (h, w):
        raise DimensionError(f"depth {depth.shape} and image {source_image.shape} must match rig size {(h, w)}")

    dirs = camera_directions(rig).reshape(h * w, 3)
    points = reshape(depth, (h * w, 1)) * dirs
    m = relative_camera_transform(rig, target_pose, source_pose)
    moved = matmul(points, m[:3, :3].T) + m[:3, 3]
    x = getitem(moved, (slice(None), 0))
    y = getitem(moved, (slice(None), 1))
    z = getitem(moved, (slice(None), 2))
    in_front = z.values > _MIN_Z
    # shift z by a constant where it is too small so projection stays finite
    z_safe = z + Tensor(np.where(in_front, 0.0, _MIN_Z - z.values))
    K = rig.K
    u = (x * K[0, 0] + y * K[0, 1]) / z_safe + K[0, 2]
    v = (y * K[1, 1]) / z_safe + K[1, 2]
    inside = (u.values >= 0.0) & (u.values <= w - 1) & (v.values >= 0.0) & (v.values <= h - 1)
    valid = (in_front & inside).reshape(h, w)

    warped = grid_sample(source_image, reshape(v, (h, w)), reshape(u, (h, w)))
    return warped, valid


def _box_mean(x: Tensor) -> Tensor:
    """3x3 local mean with reflection at the borders."""
    h, w = x.shape[:2]
    rows = np.pad(np.arange(h), 1, mode="reflect")
    cols = np.pad(np.arange(w), 1, mode="reflect")
    padded = getitem(x, (rows[:, None], cols[None, :]))
    total = None
    for di in range(3):
        for dj in range(3):
            window = getitem(padded, (slice(di, di + h), slice(dj, dj + w)))
            total = window if total is None else total + window
    return total * (1.0 / 9.0)


def ssim(a, b) -> Tensor:
    """Per-pixel, per-channel structural similarity over 3x3 windows; values in [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    mu_a, mu_b = _box_mean(a), _box_mean(b)
    var_a = _box_mean(a * a) - mu_a * mu_a
    var_b = _box_mean(b * b) - mu_b * mu_b
    cov = _box_mean(a * b) - mu_a * mu_b
    numerator = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return numerator / denominator


def photometric_error(a, b, alpha: float = 0.85) -> Tensor:
    """``alpha/2 (1 - SSIM) + (1 - alpha) |a - b|``, averaged over channels; ``[H, W]``."""
    a, b = as_tensor(a), as_tensor(b)
    structural = (1.0 - ssim(a, b)).mean(axis=-1)
    absolute = tabs(a - b).mean(axis=-1)
    return structural * (alpha / 2.0) + absolute * (1.0 - alpha)


@dataclass
class RpcResult:
    loss: Tensor
    pixels: int
    frames: int
    all_masked: bool


def rpc_loss(
    targets: Sequence,
    sources: Sequence[Sequence],
    depths: Sequence,
    target_poses: Sequence[EgoPose],
    source_poses: Sequence[Sequence[EgoPose]],
    rig: CameraRig,
    alpha: float = 0.85,
    depth_valid: Optional[Sequence[np.ndarray]] = None,
    auto_mask: bool = True,
) -> RpcResult:
    """Rendering-based photometric consistency over target frames.

    Per target pixel the error is the minimum over its source frames of the
    photometric error against the reprojected source. With ``auto_mask`` a pixel
    counts only when that minimum beats the minimum error against the raw,
    unwarped sources. The loss averages kept pixels per frame, then frames.
    """
    if not (len(targets) == len(sources) == len(depths) == len(target_poses) == len(source_poses)):
        raise DimensionError("rpc_loss needs one source list, depth map and pose per target frame")
    frame_losses = []
    kept_pixels = 0
    for idx, (target, srcs, depth, pose, src_poses) in enumerate(zip(targets, sources, depths, target_poses, source_poses)):
        if not srcs:
            raise ConfigurationError(f"target frame {idx} has no source frames")
        target = as_tensor(target)
        warped_errors, raw_errors = [], []
        for source, source_pose in zip(srcs, src_poses):
            warped, valid = reproject(source, depth, pose, source_pose, rig)
            penalty = Tensor(np.where(valid, 0.0, INVALID_ERROR).astype(target.values.dtype))
            warped_errors.append(photometric_error(target, warped, alpha) + penalty)
            raw_errors.append(photometric_error(target, as_tensor(source), alpha).values)
        best = amin(stack(warped_errors, axis=0), axis=0)
        keep = best.values < INVALID_ERROR
        if depth_valid is not None:
            keep &= np.asarray(depth_valid[idx], dtype=bool)
        if auto_mask:
            keep &= best.values < np.min(np.stack(raw_errors), axis=0)
        count = int(keep.sum())
        if count == 0:
            continue
        kept_pixels += count
        frame_losses.append((best * keep.astype(best.values.dtype)).sum() * (1.0 / count))

    if not frame_losses:
        logger.warning("photometric consistency: every target pixel was masked, loss set to 0")
        return RpcResult(Tensor(0.0), 0, 0, True)
    total = frame_losses[0]
    for part in frame_losses[1:]:
        total = total + part
    return RpcResult(total * (1.0 / len(frame_losses)), kept_pixels, len(frame_losses), False)
