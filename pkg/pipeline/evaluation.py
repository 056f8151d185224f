"""Accumulates forecast metrics and the copy-last baseline over evaluation windows."""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np

from exceptions import DimensionError
from objectives.baseline import copy_last_baseline
from objectives.metrics import (
    ChamferScores,
    Footprint,
    OccupancyScores,
    PlanningScores,
    chamfer,
    depth_mae,
    planning_metrics,
    ray_cast_points,
    sensor_rays,
)
from objectives.report import MetricReport
from occupancy.grid import OccupancyGrid
from pipeline.trainer import TrainingWindow
from render.volume import DepthMap
from schemas.config import RunConfig

logger = logging.getLogger(__name__)


class Evaluator:
    def __init__(self, config: RunConfig):
        self.config = config
        cfg, ev = config.model, config.eval
        self.class_table = cfg.class_table()
        self.horizons = cfg.future
        self.footprint = Footprint(ev.footprint_length, ev.footprint_width)
        self.exclude_ids = [self.class_table.id_of(name) for name in ev.obstacle_exclude]
        self.sensor = np.array([0.0, 0.0, ev.sensor_height])
        self.directions = sensor_rays(ev.chamfer_azimuths, ev.chamfer_elevations)
        self.occupancy = OccupancyScores(self.class_table, self.horizons)
        self.planning = PlanningScores(self.horizons)
        self.chamfer = ChamferScores(self.horizons)
        self.baseline = OccupancyScores(self.class_table, self.horizons)
        self.baseline_chamfer = ChamferScores(self.horizons)
        self.depth_errors: List[float] = []
        self.windows = 0

    def add(self, window: TrainingWindow, pred_grids: Sequence[OccupancyGrid], pred_waypoints: np.ndarray) -> None:
        if len(pred_grids) != self.horizons:
            raise DimensionError(f"expected {self.horizons} forecast grids, got {len(pred_grids)}")
        gt_grids = window.future_grids()
        future_poses = window.future_poses()
        current = window.scene.frames[window.current].pose
        hist = window.scene.frames[window.history_range()[0] : window.history_range()[1]]
        baseline = copy_last_baseline(
            [f.grid for f in hist],
            [f.pose for f in hist],
            self.horizons,
            future_poses if self.config.eval.baseline_transport else None,
        )
        for k, (pred, gt, base) in enumerate(zip(pred_grids, gt_grids, baseline)):
            self.occupancy.add(k, pred, gt)
            self.baseline.add(k, base, gt)
            gt_points = ray_cast_points(gt, self.sensor, self.directions)
            self.chamfer.add(k, *chamfer(pred, gt_points, self.sensor, self.directions))
            self.baseline_chamfer.add(k, *chamfer(base, gt_points, self.sensor, self.directions))
        motions = [current.between(p) for p in future_poses]
        self.planning.add(
            planning_metrics(pred_waypoints, window.gt_waypoints(), gt_grids, motions, self.footprint, self.exclude_ids)
        )
        self.windows += 1

    def add_depths(self, window: TrainingWindow, depth_maps: Sequence[DepthMap]) -> None:
        """Rendered depth error against the analytic depth of the future frames.

        Every ray that crosses the volume counts, including rays below the opacity
        threshold, so models are scored on the same pixels whatever their density.
        """
        gt_depth, gt_valid = window.future_depths()
        for k, depth in enumerate(depth_maps):
            both = depth.in_volume & gt_valid[k]
            if both.any():
                self.depth_errors.append(depth_mae(depth.depths.values, gt_depth[k], both))

    def mean_depth_mae(self) -> Optional[float]:
        return float(np.mean(self.depth_errors)) if self.depth_errors else None

    def report(self) -> MetricReport:
        logger.info("evaluated %d windows", self.windows)
        return MetricReport.from_scores(
            self.config.model.horizons_s(),
            self.occupancy,
            self.planning,
            self.chamfer,
            self.baseline,
            self.baseline_chamfer,
        )
