"""Evaluation metrics: occupancy IoU/mIoU, planning L2 and collisions, Chamfer distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from exceptions import DimensionError
from geometry.pose import EgoPose
from occupancy.grid import FREE, ClassTable, OccupancyGrid

logger = logging.getLogger(__name__)


# -- occupancy ---------------------------------------------------------------


def class_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union voxel counts."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction has {pred.size} voxels, ground truth {gt.size}")
    hits = np.bincount(gt[pred == gt], minlength=num_classes)[:num_classes]
    pred_count = np.bincount(pred, minlength=num_classes)[:num_classes]
    gt_count = np.bincount(gt, minlength=num_classes)[:num_classes]
    return hits, pred_count + gt_count - hits


def mean_iou(inter: np.ndarray, union: np.ndarray, class_ids: Optional[Sequence[int]] = None) -> float:
    """Mean IoU in percent over non-free classes with a non-empty union."""
    ids = np.arange(len(union)) if class_ids is None else np.asarray(class_ids, dtype=np.int64)
    ids = ids[(ids != FREE) & (union[ids] > 0)]
    if ids.size == 0:
        return 100.0
    return float(np.mean(inter[ids] / union[ids]) * 100.0)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> Tuple[int, int]:
    p = np.asarray(pred) != FREE
    g = np.asarray(gt) != FREE
    return int(np.sum(p & g)), int(np.sum(p | g))


def miou_iou(pred: Sequence[OccupancyGrid], gt: Sequence[OccupancyGrid]) -> List[Tuple[float, float]]:
    """Per-horizon ``(mIoU, IoU)`` percentages for one forecast."""
    if len(pred) != len(gt):
        raise DimensionError(f"{len(pred)} predicted frames for {len(gt)} ground-truth frames")
    out = []
    for p, g in zip(pred, gt):
        inter, union = class_counts(p.classes, g.classes, len(g.class_table))
        b_inter, b_union = binary_iou(p.classes, g.classes)
        out.append((mean_iou(inter, union), 100.0 if b_union == 0 else 100.0 * b_inter / b_union))
    return out


class OccupancyScores:
    """Dataset-level IoU accumulation per horizon (counts are summed before dividing)."""

    def __init__(self, class_table: ClassTable, horizons: int):
        self.class_table = class_table
        self.inter = np.zeros((horizons, len(class_table)), dtype=np.int64)
        self.union = np.zeros((horizons, len(class_table)), dtype=np.int64)
        self.b_inter = np.zeros(horizons, dtype=np.int64)
        self.b_union = np.zeros(horizons, dtype=np.int64)

    def add(self, horizon: int, pred: OccupancyGrid, gt: OccupancyGrid) -> None:
        inter, union = class_counts(pred.classes, gt.classes, len(self.class_table))
        self.inter[horizon] += inter
        self.union[horizon] += union
        b_inter, b_union = binary_iou(pred.classes, gt.classes)
        self.b_inter[horizon] += b_inter
        self.b_union[horizon] += b_union

    def miou(self, horizon: int) -> float:
        return mean_iou(self.inter[horizon], self.union[horizon])

    def dynamic_miou(self, horizon: int) -> float:
        return mean_iou(self.inter[horizon], self.union[horizon], self.class_table.dynamic_ids())

    def iou(self, horizon: int) -> float:
        if self.b_union[horizon] == 0:
            return 100.0
        return float(100.0 * self.b_inter[horizon] / self.b_union[horizon])


# -- planning ----------------------------------------------------------------


@dataclass(frozen=True)
class Footprint:
    length: float = 4.0
    width: float = 1.8


def obstacle_columns(grid: OccupancyGrid, exclude_ids: Sequence[int] = ()) -> np.ndarray:
    """BEV cells holding any voxel that is neither free nor an excluded class."""
    blocked = grid.classes != FREE
    for cid in exclude_ids:
        blocked &= grid.classes != cid
    return blocked.any(axis=2)


def footprint_collides(center: np.ndarray, footprint: Footprint, grid: OccupancyGrid, exclude_ids=()) -> bool:
    """Axis-aligned ego rectangle centered at ``center`` (grid ego frame) against obstacle cells.

    Touching edges do not count as overlap.
    """
    blocked = obstacle_columns(grid, exclude_ids)
    if not blocked.any():
        return False
    half = np.array([footprint.length / 2.0, footprint.width / 2.0])
    lo_rect, hi_rect = np.asarray(center) - half, np.asarray(center) + half
    origin = np.asarray(grid.origin[:2])
    vs = np.asarray(grid.voxel_size[:2])
    h, w = blocked.shape
    x_lo = origin[0] + np.arange(h) * vs[0]
    y_lo = origin[1] + np.arange(w) * vs[1]
    x_hit = (lo_rect[0] < x_lo + vs[0]) & (hi_rect[0] > x_lo)
    y_hit = (lo_rect[1] < y_lo + vs[1]) & (hi_rect[1] > y_lo)
    return bool(np.any(blocked & x_hit[:, None] & y_hit[None, :]))


@dataclass
class PlanningResult:
    l2: np.ndarray
    collisions: np.ndarray


def planning_metrics(
    pred_waypoints: np.ndarray,
    gt_waypoints: np.ndarray,
    gt_grids: Sequence[OccupancyGrid],
    gt_motions: Sequence[EgoPose],
    footprint: Footprint = Footprint(),
    exclude_ids: Sequence[int] = (),
) -> PlanningResult:
    """L2 waypoint error and footprint collision per horizon.

    Waypoints are ``[N, 2]`` in the current ego frame; ``gt_motions[k]`` is the
    true future ego pose k in that frame and ``gt_grids[k]`` its occupancy.
    """
    pred = np.asarray(pred_waypoints, dtype=np.float64)
    gt = np.asarray(gt_waypoints, dtype=np.float64)
    if pred.shape != gt.shape or len(gt_grids) != len(pred) or len(gt_motions) != len(pred):
        raise DimensionError(
            f"planning inputs disagree: pred {pred.shape}, gt {gt.shape}, "
            f"{len(gt_grids)} grids, {len(gt_motions)} motions"
        )
    l2 = np.linalg.norm(pred - gt, axis=-1)
    collisions = np.array(
        [
            footprint_collides(motion.inverse().apply(point), footprint, grid, exclude_ids)
            for point, motion, grid in zip(pred, gt_motions, gt_grids)
        ]
    )
    return PlanningResult(l2, collisions)


class PlanningScores:
    def __init__(self, horizons: int):
        self.l2_sum = np.zeros(horizons)
        self.collisions = np.zeros(horizons, dtype=np.int64)
        self.count = np.zeros(horizons, dtype=np.int64)

    def add(self, result: PlanningResult) -> None:
        self.l2_sum += result.l2
        self.collisions += result.collisions.astype(np.int64)
        self.count += 1

    def l2(self, horizon: int) -> float:
        return float(self.l2_sum[horizon] / max(self.count[horizon], 1))

    def collision_pct(self, horizon: int) -> float:
        return float(100.0 * self.collisions[horizon] / max(self.count[horizon], 1))


# -- point clouds ------------------------------------------------------------


def sensor_rays(azimuths: int, elevations: Sequence[float]) -> np.ndarray:
    """Unit directions on an azimuth x elevation lattice (ego frame, z up)."""
    az = np.arange(azimuths) * (2.0 * np.pi / azimuths)
    el = np.asarray(elevations, dtype=np.float64)
    a, e = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return dirs.reshape(-1, 3)


def ray_cast_points(grid: OccupancyGrid, sensor: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """First occupied-voxel entry point along each ray (voxel traversal on all rays at once)."""
    occupied = grid.classes != FREE
    dims = np.array(grid.dims)
    vs = np.asarray(grid.voxel_size)
    origin = np.asarray(grid.origin)
    sensor = np.asarray(sensor, dtype=np.float64)
    dirs = np.asarray(directions, dtype=np.float64)
    n = len(dirs)

    lower, upper = origin, origin + dims * vs
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (lower - sensor) / dirs
        t_b = (upper - sensor) / dirs
    t_a = np.where(np.isnan(t_a), -np.inf, t_a)
    t_b = np.where(np.isnan(t_b), np.inf, t_b)
    t_enter = np.maximum(np.minimum(t_a, t_b).max(axis=-1), 0.0)
    t_exit = np.maximum(t_a, t_b).min(axis=-1)
    alive = t_exit > t_enter

    start = sensor + t_enter[:, None] * dirs
    cell = np.clip(np.floor((start - origin) / vs).astype(np.int64), 0, dims - 1)
    step = np.where(dirs > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = origin + (cell + (step > 0)) * vs
        t_next = np.where(dirs != 0, (boundary - sensor) / dirs, np.inf)
        t_delta = np.where(dirs != 0, vs / np.abs(dirs), np.inf)
    t_cell = t_enter.copy()
    hit_t = np.full(n, np.nan)

    for _ in range(int(dims.sum()) + 3):
        if not alive.any():
            break
        inside = np.all((cell >= 0) & (cell < dims), axis=-1)
        alive &= inside
        idx = np.where(alive)[0]
        occ = occupied[cell[idx, 0], cell[idx, 1], cell[idx, 2]]
        hit_t[idx[occ]] = t_cell[idx[occ]]
        alive[idx[occ]] = False
        axis = np.argmin(t_next, axis=-1)
        rows = np.arange(n)
        t_cell = np.where(alive, t_next[rows, axis], t_cell)
        cell[rows, axis] += np.where(alive, step[rows, axis], 0)
        t_next[rows, axis] += np.where(alive, t_delta[rows, axis], 0.0)

    found = ~np.isnan(hit_t)
    return sensor + hit_t[found, None] * dirs[found]


def chamfer_distance(a: np.ndarray, b: np.ndarray, far: float) -> Tuple[float, bool]:
    """Mean of both directed mean squared nearest-neighbour distances.

    An empty cloud on one side yields ``far**2`` and the flag set.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 and len(b) == 0:
        return 0.0, False
    if len(a) == 0 or len(b) == 0:
        return float(far**2), True
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float((d2.min(axis=1).mean() + d2.min(axis=0).mean()) / 2.0), False


def chamfer(
    pred: OccupancyGrid,
    gt_points: np.ndarray,
    sensor: np.ndarray,
    directions: np.ndarray,
    far: Optional[float] = None,
) -> Tuple[float, bool]:
    """Chamfer distance between a ray-cast forecast cloud and a ground-truth cloud (m^2)."""
    if far is None:
        far = float(np.linalg.norm(np.array(pred.dims) * np.asarray(pred.voxel_size)))
    points = ray_cast_points(pred, sensor, directions)
    value, empty = chamfer_distance(points, gt_points, far)
    if empty:
        logger.warning("chamfer: empty point cloud, using far bound %.2f m", far)
    return value, empty


class ChamferScores:
    def __init__(self, horizons: int):
        self.total = np.zeros(horizons)
        self.count = np.zeros(horizons, dtype=np.int64)
        self.empty = np.zeros(horizons, dtype=np.int64)

    def add(self, horizon: int, value: float, empty: bool) -> None:
        self.total[horizon] += value
        self.count[horizon] += 1
        self.empty[horizon] += int(empty)

    def mean(self, horizon: int) -> float:
        return float(self.total[horizon] / max(self.count[horizon], 1))


def depth_mae(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth error over ``mask``; NaN when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.abs(np.asarray(pred)[mask] - np.asarray(target)[mask])))
