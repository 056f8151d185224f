"""Training windows, loss assembly and the SGD training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from exceptions import DataError
from geometry.pose import EgoPose
from model.world_model import ForecastInput, ForecastOutput, WorldModel
from objectives.losses import LossBreakdown, LossParts, img_loss, occ_loss, pose_loss, total_loss
from occupancy.grid import OccupancyGrid
from render.camera import CameraRig
from render.imageio import resize_images
from render.photometric import RpcResult, rpc_loss
from render.volume import DepthMap, VolumeBounds, render_future_depths
from scenes.generator import Scene
from schemas.config import RunConfig
from tensor.core import backward
from tensor.optim import SGD

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "total", "occ_ce", "occ_lovasz", "img_l2", "pose_l1", "rpc", "grad_norm"]


@dataclass(frozen=True)
class TrainingWindow:
    """``history + future`` consecutive frames of one scene starting at ``start``."""

    scene: Scene
    start: int
    history: int
    future: int

    @property
    def current(self) -> int:
        return self.start + self.history - 1

    def _frames(self, lo: int, hi: int):
        return self.scene.frames[lo:hi]

    def history_range(self) -> Tuple[int, int]:
        return self.start, self.start + self.history

    def future_range(self) -> Tuple[int, int]:
        return self.start + self.history, self.start + self.history + self.future

    def forecast_input(self, with_images: bool, with_future_poses: bool = True) -> ForecastInput:
        hist = self._frames(*self.history_range())
        images = np.stack([f.image_float() for f in hist]) if with_images else None
        future_poses = self.future_poses() if with_future_poses else None
        return ForecastInput([f.grid for f in hist], [f.pose for f in hist], images, future_poses)

    def future_grids(self) -> List[OccupancyGrid]:
        return [f.grid for f in self._frames(*self.future_range())]

    def future_poses(self) -> List[EgoPose]:
        return [f.pose for f in self._frames(*self.future_range())]

    def future_images(self) -> np.ndarray:
        return np.stack([f.image_float() for f in self._frames(*self.future_range())])

    def future_depths(self) -> Tuple[np.ndarray, np.ndarray]:
        frames = self._frames(*self.future_range())
        return np.stack([f.depth for f in frames]), np.stack([f.depth_valid for f in frames])

    def gt_waypoints(self) -> np.ndarray:
        """Future ego positions in the current ego frame, ``[N_f, 2]``."""
        current = self.scene.frames[self.current].pose
        return np.stack([current.between(p).translation() for p in self.future_poses()])


def build_windows(scenes: Sequence[Scene], history: int, future: int, stride: int = 1) -> List[TrainingWindow]:
    windows = []
    for scene in scenes:
        last_start = len(scene.frames) - history - future
        windows.extend(TrainingWindow(scene, s, history, future) for s in range(0, last_start + 1, stride))
    if not windows:
        raise DataError(f"no scene is long enough for {history} history and {future} future frames")
    return windows


def forecast_depths(
    model: WorldModel,
    output: ForecastOutput,
    rig: CameraRig,
    rng: Optional[np.random.Generator] = None,
) -> List[DepthMap]:
    """Depth maps rendered from every forecast frame's voxel features."""
    cfg = model.config
    return render_future_depths(
        output.voxel_features,
        model.density_head,
        rig,
        VolumeBounds.of(output.template),
        cfg.near,
        cfg.far,
        cfg.num_ray_samples,
        cfg.min_opacity,
        rng,
    )


def window_rpc(
    model: WorldModel,
    window: TrainingWindow,
    output: ForecastOutput,
    rng: Optional[np.random.Generator] = None,
) -> RpcResult:
    """Photometric consistency of every forecast frame against its neighbouring ground-truth frames."""
    scene = window.scene
    depths = forecast_depths(model, output, scene.rig, rng)
    targets, sources, target_poses, source_poses = [], [], [], []
    first, _ = window.future_range()
    for k in range(window.future):
        t = first + k
        neighbours = [i for i in (t - 1, t + 1) if 0 <= i < len(scene.frames)]
        targets.append(scene.frames[t].image_float())
        sources.append([scene.frames[i].image_float() for i in neighbours])
        target_poses.append(scene.frames[t].pose)
        source_poses.append([scene.frames[i].pose for i in neighbours])
    return rpc_loss(
        targets,
        sources,
        [d.depths for d in depths],
        target_poses,
        source_poses,
        scene.rig,
        alpha=model.config.photometric_alpha,
        depth_valid=[d.valid for d in depths],
    )


def window_losses(
    model: WorldModel,
    window: TrainingWindow,
    config: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LossBreakdown, ForecastOutput]:
    cfg = config.model
    output = model.forecast(window.forecast_input(with_images=model.img_encoder is not None))
    ce, lovasz = occ_loss(output.logits, window.future_grids())
    parts = LossParts(ce, lovasz, pose_l1=pose_loss(output.waypoints, window.gt_waypoints()))
    if output.images is not None:
        h0, w0 = cfg.grid_dims[:2]
        parts.img_l2 = img_loss(output.images, resize_images(window.future_images(), (h0, w0)))
    if cfg.use_rpc and cfg.loss_weights.rpc > 0:
        parts.rpc = window_rpc(model, window, output, rng).loss
    return total_loss(parts, cfg.loss_weights), output


class Trainer:
    """Mini-batch SGD over randomly drawn training windows.

    Each window builds its own graph; its objective is scaled by ``1 / batch``
    so the accumulated gradient is the batch mean.
    """

    def __init__(self, model: WorldModel, config: RunConfig, scenes: Sequence[Scene]):
        self.model = model
        self.config = config
        self.windows = build_windows(scenes, config.model.history, config.model.future)
        train = config.train
        self.optimizer = SGD(model.parameters(), train.learning_rate, train.momentum, train.clip_norm)
        self.rng = np.random.default_rng(config.seed)
        self.history: List[Dict[str, float]] = []

    def _batch(self) -> List[TrainingWindow]:
        size = self.config.train.batch_size
        picks = self.rng.choice(len(self.windows), size=size, replace=len(self.windows) < size)
        return [self.windows[i] for i in picks]

    def train_step(self, step: int) -> Dict[str, float]:
        batch = self._batch()
        self.optimizer.zero_grad()
        totals: Dict[str, float] = {}
        for window in batch:
            breakdown, _ = window_losses(self.model, window, self.config, self.rng)
            backward(breakdown.objective * (1.0 / len(batch)))
            for name, value in breakdown.as_dict().items():
                totals[name] = totals.get(name, 0.0) + value / len(batch)
        grad_norm = self.optimizer.step()
        record = {"step": step, **totals, "grad_norm": grad_norm}
        if not np.isfinite(record["total"]):
            logger.warning("non-finite loss at step %d", step)
        return record

    def fit(self, steps: Optional[int] = None) -> List[Dict[str, float]]:
        train = self.config.train
        steps = train.steps if steps is None else steps
        deadline = None if train.max_minutes is None else time.monotonic() + 60.0 * train.max_minutes
        logger.info("training for %d steps on %d windows (batch %d)", steps, len(self.windows), train.batch_size)
        for step in tqdm(range(steps), desc="train", disable=not train.progress):
            record = self.train_step(step)
            self.history.append(record)
            if step % train.log_every == 0 or step == steps - 1:
                logger.info(
                    "step %d total=%.4f occ_ce=%.4f occ_lovasz=%.4f img_l2=%.4f pose_l1=%.4f rpc=%.4f grad_norm=%.3f",
                    step,
                    record["total"],
                    record["occ_ce"],
                    record["occ_lovasz"],
                    record["img_l2"],
                    record["pose_l1"],
                    record["rpc"],
                    record["grad_norm"],
                )
            if deadline is not None and time.monotonic() > deadline:
                logger.warning("stopping after %d steps: time limit of %.1f minutes reached", step + 1, train.max_minutes)
                break
        return self.history
