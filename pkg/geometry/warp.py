"""Decoupled backward warping of BEV features.

For every future frame the current feature map is split into two layers:

* the static layer keeps static columns and holds the free-space feature in
  dynamic columns; it follows the ego motion only (flow assumed zero).
* the dynamic layer keeps dynamic columns and holds the free-space feature
  elsewhere; destination cell ``i`` samples it at ``i - flow / voxel_size``.

The warped dynamic mask serves as the blend weight between the two, so moving
objects are drawn over the transported static scene. Flow values carry the
combined object and ego displacement (``transform_flow``); under ego rotation
the dynamic sample is a first-order approximation of the exact transport.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from exceptions import DataError, DimensionError, StateError
from geometry.flow import FUTURE, FlowField
from geometry.pose import EgoPose
from occupancy.grid import OccupancyGrid
from tensor.core import Tensor, as_tensor, stack
from tensor.ops import grid_sample

logger = logging.getLogger(__name__)

DECOUPLED = "decoupled"
PLAIN = "plain"


@dataclass(frozen=True)
class BevFrame:
    """Horizontal layout of a grid: cell counts, metric cell size and corner origin."""

    dims: Tuple[int, int]
    voxel_size: Tuple[float, float]
    origin: Tuple[float, float]

    @classmethod
    def of(cls, grid: OccupancyGrid) -> "BevFrame":
        return cls(grid.dims[:2], grid.voxel_size[:2], grid.origin[:2])

    def cell_centers(self) -> np.ndarray:
        """``[H, W, 2]`` metric (x, y) centers; axis h runs along x, axis w along y."""
        h, w = self.dims
        xs = self.origin[0] + (np.arange(h) + 0.5) * self.voxel_size[0]
        ys = self.origin[1] + (np.arange(w) + 0.5) * self.voxel_size[1]
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous cell indices of metric points (cell centers map to integers)."""
        vs = np.asarray(self.voxel_size)
        return (np.asarray(points) - np.asarray(self.origin)) / vs - 0.5


@dataclass(frozen=True)
class DynamicMask:
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.mask.ndim != 2:
            raise DimensionError(f"dynamic mask must be 2-D, got {self.mask.shape}")


def dynamic_mask(grid: OccupancyGrid) -> DynamicMask:
    """Columns holding at least one voxel of a dynamic class."""
    return DynamicMask(grid.dynamic_voxels().any(axis=2))


def static_sample_offsets(frame: BevFrame, motion: EgoPose) -> np.ndarray:
    """``[H, W, 2]`` index offsets sending each future cell to its source in the current grid.

    ``motion`` is the future ego pose expressed in the current ego frame.
    """
    centers = frame.cell_centers()
    source = motion.apply(centers)
    return (source - centers) / np.asarray(frame.voxel_size)


def warp_features(
    feat,
    flow: FlowField,
    mask: DynamicMask,
    frame: BevFrame,
    motions: Sequence[EgoPose],
    fill=None,
    mode: str = DECOUPLED,
) -> Tensor:
    """Warp ``feat[H, W, C]`` into each future frame; returns ``[N_f, H, W, C]``.

    ``flow`` must be in the future frame. ``motions[k]`` is future ego pose k in
    the current ego frame. ``mode="plain"`` treats every cell as dynamic.
    """
    feat = as_tensor(feat)
    if flow.frame != FUTURE:
        raise StateError("warp_features needs flow expressed in the future frame")
    h, w, channels = feat.shape
    if flow.flow.shape[1:3] != (h, w) or tuple(frame.dims) != (h, w):
        raise DimensionError(f"feature map {feat.shape} does not match flow {flow.flow.shape} and frame {frame.dims}")
    if len(motions) != flow.num_frames:
        raise DimensionError(f"{len(motions)} ego motions for {flow.num_frames} flow frames")
    if not np.all(np.isfinite(flow.values())):
        raise DataError("warp_features received NaN or infinite flow")

    fill_t = as_tensor(np.zeros(channels) if fill is None else fill)
    m = np.ones((h, w), dtype=bool) if mode == PLAIN else mask.mask
    m_f = m[..., None].astype(feat.values.dtype)
    static_layer = feat * (1.0 - m_f) + fill_t * m_f
    dynamic_layer = feat * m_f + fill_t * (1.0 - m_f)
    alpha_src = Tensor(m_f)

    rows0, cols0 = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    vs = np.asarray(frame.voxel_size)
    frames = []
    for k, motion in enumerate(motions):
        offsets = static_sample_offsets(frame, motion)
        static = grid_sample(static_layer, Tensor(rows0 + offsets[..., 0]), Tensor(cols0 + offsets[..., 1]), fill_t)

        step = flow.flow[k]
        rows = step[:, :, 0] * (-1.0 / vs[0]) + rows0
        cols = step[:, :, 1] * (-1.0 / vs[1]) + cols0
        moved = grid_sample(dynamic_layer, rows, cols, fill_t)
        alpha = grid_sample(alpha_src, rows, cols)
        frames.append(alpha * moved + (1.0 - alpha) * static)
    return stack(frames, axis=0)


def warp_oracle(
    feat: np.ndarray,
    flow: np.ndarray,
    mask: np.ndarray,
    frame: BevFrame,
    motions: Sequence[EgoPose],
    fill: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Reference decoupled warp written as an explicit per-cell loop in float64."""
    feat = np.asarray(feat, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w, c = feat.shape
    fill = np.zeros(c) if fill is None else np.asarray(fill, dtype=np.float64)
    dyn = np.asarray(mask, dtype=bool)

    def static_at(i, j):
        if 0 <= i < h and 0 <= j < w:
            return fill if dyn[i, j] else feat[i, j]
        return fill

    def moving_at(i, j):
        if 0 <= i < h and 0 <= j < w:
            return feat[i, j] if dyn[i, j] else fill
        return fill

    def alpha_at(i, j):
        if 0 <= i < h and 0 <= j < w:
            return 1.0 if dyn[i, j] else 0.0
        return 0.0

    def bilinear(lookup, r, s):
        i0, j0 = int(np.floor(r)), int(np.floor(s))
        fr, fs = r - i0, s - j0
        return (
            (1 - fr) * (1 - fs) * lookup(i0, j0)
            + (1 - fr) * fs * lookup(i0, j0 + 1)
            + fr * (1 - fs) * lookup(i0 + 1, j0)
            + fr * fs * lookup(i0 + 1, j0 + 1)
        )

    out = np.zeros((len(motions), h, w, c))
    for k, motion in enumerate(motions):
        cos, sin = np.cos(motion.yaw), np.sin(motion.yaw)
        for i in range(h):
            for j in range(w):
                x = frame.origin[0] + (i + 0.5) * frame.voxel_size[0]
                y = frame.origin[1] + (j + 0.5) * frame.voxel_size[1]
                sx = cos * x - sin * y + motion.x
                sy = sin * x + cos * y + motion.y
                r_static = (sx - frame.origin[0]) / frame.voxel_size[0] - 0.5
                s_static = (sy - frame.origin[1]) / frame.voxel_size[1] - 0.5
                static = bilinear(static_at, r_static, s_static)
                r_dyn = i - flow[k, i, j, 0] / frame.voxel_size[0]
                s_dyn = j - flow[k, i, j, 1] / frame.voxel_size[1]
                moving = bilinear(moving_at, r_dyn, s_dyn)
                a = bilinear(alpha_at, r_dyn, s_dyn)
                out[k, i, j] = a * moving + (1 - a) * static
    return out
