"""Nearest-neighbour transport of static voxels under ego motion."""

from __future__ import annotations

import logging
import math

import numpy as np

from geometry.pose import EgoPose
from geometry.warp import BevFrame
from occupancy.grid import FREE, OccupancyGrid

logger = logging.getLogger(__name__)

_SNAP = 1e-12


def _snapped_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    c, s = (round(v) if abs(v - round(v)) < _SNAP else v for v in (c, s))
    return np.array([[c, -s], [s, c]])


def _source_indices(frame: BevFrame, motion: EgoPose):
    centers = frame.cell_centers()
    source = centers @ _snapped_rotation(motion.yaw).T + motion.translation()
    idx = np.floor(frame.to_index(source) + 0.5).astype(np.int64)
    h, w = frame.dims
    valid = (idx[..., 0] >= 0) & (idx[..., 0] < h) & (idx[..., 1] >= 0) & (idx[..., 1] < w)
    return idx, valid


def transportable_mask(grid: OccupancyGrid, current: EgoPose, future: EgoPose) -> np.ndarray:
    """Future BEV cells whose source cell lies inside the current grid."""
    _, valid = _source_indices(BevFrame.of(grid), current.between(future))
    return valid


def transport_grid(grid: OccupancyGrid, current: EgoPose, future: EgoPose, keep_dynamic: bool = True) -> OccupancyGrid:
    """Re-express ``grid`` in the ``future`` ego frame by nearest-voxel lookup.

    Cells whose source falls outside the current grid become free, and so do
    dynamic voxels unless ``keep_dynamic`` is set.
    """
    frame = BevFrame.of(grid)
    idx, valid = _source_indices(frame, current.between(future))
    rows = np.where(valid, idx[..., 0], 0)
    cols = np.where(valid, idx[..., 1], 0)
    moved = grid.classes[rows, cols, :]
    keep = valid[..., None]
    if not keep_dynamic:
        keep = keep & ~grid.class_table.dynamic_lookup()[moved]
    out = np.where(keep, moved, FREE).astype(np.uint8)
    logger.debug("transport kept %d of %d cells", int(valid.sum()), valid.size)
    return grid.with_classes(out)


def static_transport(grid: OccupancyGrid, current: EgoPose, future: EgoPose) -> OccupancyGrid:
    """Static voxels of ``grid`` in the ``future`` ego frame; dynamic classes and unknown cells become free."""
    return transport_grid(grid, current, future, keep_dynamic=False)
