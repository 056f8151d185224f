"""One function per CLI subcommand.

Every command records itself in the run registry; artifacts never depend on
what the registry holds.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from database import crud
from database.connection import create_tables, get_sync_db
from exceptions import ConfigurationError, DataError, MissingArtifactError, WorldModelError
from geometry.flow import flow_write
from model.world_model import ForecastOutput, WorldModel, build_model
from objectives.report import MetricReport, write_report, write_table
from occupancy.grid import grid_read, grid_write
from pipeline.evaluation import Evaluator
from pipeline.trainer import LOSS_COLUMNS, Trainer, TrainingWindow, build_windows, forecast_depths
from render.imageio import depth_write, image_write
from scenes.dataset import (
    dataset_read,
    generate_dataset,
    list_scenes,
    load_scenes,
    read_poses,
    scene_specs,
    write_poses,
)
from scenes.generator import Scene, generate
from schemas.config import RunConfig, build_config, dump_flat, load_config, save_config
from tensor.checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ow4d"
CONFIG_NAME = "config.txt"
LOSS_CURVE_NAME = "loss_curve.csv"
METRICS_NAME = "metrics.csv"
ABLATION_NAME = "ablation.csv"
TRAJECTORY_NAME = "trajectory.csv"
PathLike = Union[str, Path]


@dataclass(frozen=True)
class AblationVariant:
    """Model overrides for one ablation row.

    ``reuse`` names an earlier variant whose trained model is evaluated again
    instead of training a new one.
    """

    overrides: Dict[str, object] = field(default_factory=dict)
    images_at_inference: bool = False
    reuse: Optional[str] = None


_NO_IMAGES = {"use_rpc": False, "use_images": False}
_IMAGES = {"flow_mode": "decoupled", "use_rpc": True, "use_images": True}

# Forecasting-head ladder: direct regression, plain flow, decoupled flow, then
# rendering supervision, image-assisted training with unmasked and masked
# attention, and the unmasked model fed images at inference.
ABLATION_VARIANTS: Dict[str, AblationVariant] = {
    "baseline": AblationVariant({"flow_mode": "none", **_NO_IMAGES}),
    "plain_flow": AblationVariant({"flow_mode": "plain", **_NO_IMAGES}),
    "decoupled_flow": AblationVariant({"flow_mode": "decoupled", **_NO_IMAGES}),
    "decoupled_rpc": AblationVariant({"flow_mode": "decoupled", "use_rpc": True, "use_images": False}),
    "decoupled_rpc_images_unmasked": AblationVariant({**_IMAGES, "masked_attention": False}),
    "decoupled_rpc_images": AblationVariant({**_IMAGES, "masked_attention": True}),
    "decoupled_rpc_images_unmasked_multimodal": AblationVariant(
        images_at_inference=True, reuse="decoupled_rpc_images_unmasked"
    ),
}
FULL_MODEL = "decoupled_rpc_images"


@dataclass(frozen=True)
class LearningTrendTargets:
    """Margins, in mIoU points or relative depth error, that the ablation table
    must show when trained on the default dataset."""

    dyn_miou_over_baseline: float = 5.0
    flow_over_direct: float = 0.0
    rpc_miou_tolerance: float = 0.5
    rpc_depth_reduction: float = 0.2


LEARNING_TREND = LearningTrendTargets()


@dataclass
class RunRecord:
    run_id: str
    artifact: Optional[str] = None
    report: Optional[pd.DataFrame] = None


@contextmanager
def tracked_run(command: str, config: RunConfig, registry_url: Optional[str] = None) -> Iterator[RunRecord]:
    """Register a run as running, then completed or failed with the error line."""
    create_tables(registry_url)
    with get_sync_db(registry_url) as db:
        run = crud.create_run(db, command, dump_flat(config), config.seed)
        crud.mark_running(db, run.run_id)
        record = RunRecord(run.run_id)
        try:
            yield record
        except WorldModelError as exc:
            crud.fail_run(db, run.run_id, exc.error_line())
            raise
        except Exception as exc:
            crud.fail_run(db, run.run_id, f"{type(exc).__name__}: {exc}")
            raise
        crud.complete_run(db, run.run_id, record.artifact)
        if record.report is not None:
            crud.add_metrics(db, run.run_id, record.report)
    logger.debug("run %s (%s) completed", record.run_id, command)


def with_model_overrides(config: RunConfig, **overrides) -> RunConfig:
    data = config.model_dump()
    data["model"].update(overrides)
    return build_config(data)


def config_for_checkpoint(checkpoint: PathLike, config: Optional[RunConfig]) -> RunConfig:
    """An explicit config wins; otherwise the one saved next to the checkpoint."""
    if config is not None:
        return config
    saved = Path(checkpoint).parent / CONFIG_NAME
    return load_config(saved) if saved.is_file() else build_config()


def load_model(checkpoint: PathLike, config: RunConfig) -> WorldModel:
    model = build_model(config.model)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _scene_dirs(path: PathLike) -> List[Path]:
    path = Path(path)
    if (path / "spec.json").is_file():
        return [path]
    dirs = list_scenes(path)
    if not dirs:
        raise DataError(f"no scenes found under {path}")
    return dirs


def _windows(scene: Scene, config: RunConfig) -> List[TrainingWindow]:
    return build_windows([scene], config.model.history, config.model.future, config.eval.window_stride)


def _forecast(model: WorldModel, window: TrainingWindow, use_images: Optional[bool]) -> ForecastOutput:
    with_images = model.img_encoder is not None and use_images is not False
    return model.forecast(window.forecast_input(with_images), use_images=with_images)


# -- gen ---------------------------------------------------------------------


def cmd_gen(config: RunConfig, out_dir: PathLike, threads: int = 1, registry_url: Optional[str] = None) -> List[Path]:
    with tracked_run("gen", config, registry_url) as run:
        specs = scene_specs(config.scene, config.num_scenes, first_seed=config.scene.seed)
        paths = generate_dataset(specs, out_dir, threads)
        save_config(config, Path(out_dir) / CONFIG_NAME)
        run.artifact = str(out_dir)
    return paths


# -- train -------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    loss_curve: Path
    history: List[Dict[str, float]] = field(default_factory=list)


def train_model(config: RunConfig, scenes: List[Scene]) -> Trainer:
    model = build_model(config.model)
    trainer = Trainer(model, config, scenes)
    trainer.fit()
    return trainer


def cmd_train(config: RunConfig, data_dir: PathLike, out_dir: PathLike, registry_url: Optional[str] = None) -> TrainResult:
    out_dir = Path(out_dir)
    with tracked_run("train", config, registry_url) as run:
        trainer = train_model(config, load_scenes(data_dir))
        checkpoint = save_checkpoint(trainer.model.state_dict(), out_dir / CHECKPOINT_NAME)
        curve = write_table(trainer.history, out_dir / LOSS_CURVE_NAME, LOSS_COLUMNS)
        save_config(config, out_dir / CONFIG_NAME)
        run.artifact = str(checkpoint)
    return TrainResult(checkpoint, curve, trainer.history)


# -- forecast ----------------------------------------------------------------


def write_forecast(output: ForecastOutput, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, grid in enumerate(output.grids()):
        grid_write(grid, directory / f"frame_{k}.ogrd")
    write_poses(output.trajectory, directory / TRAJECTORY_NAME)
    if output.images is not None:
        for k in range(output.images.shape[0]):
            image_write(output.images.values[k], directory / f"frame_{k}.ppm")
    if output.flow_future is not None:
        flow_write(output.flow_future, directory / "flow.oflw")
    return directory


def cmd_forecast(
    config: Optional[RunConfig],
    checkpoint: PathLike,
    scene_dir: PathLike,
    out_dir: PathLike,
    use_images: Optional[bool] = None,
    registry_url: Optional[str] = None,
) -> List[Path]:
    config = config_for_checkpoint(checkpoint, config)
    out_dir = Path(out_dir)
    written = []
    with tracked_run("forecast", config, registry_url) as run:
        model = load_model(checkpoint, config)
        for path in _scene_dirs(scene_dir):
            scene = dataset_read(path)
            for window in _windows(scene, config):
                output = _forecast(model, window, use_images)
                written.append(write_forecast(output, out_dir / path.name / f"window_{window.start}"))
        run.artifact = str(out_dir)
    logger.info("wrote %d forecasts under %s", len(written), out_dir)
    return written


# -- eval --------------------------------------------------------------------


def _window_dirs(scene_pred: Path) -> List[Path]:
    found = [p for p in scene_pred.glob("window_*") if p.is_dir() and p.name[len("window_"):].isdigit()]
    return sorted(found, key=lambda p: int(p.name[len("window_"):]))


def cmd_eval(
    config: RunConfig,
    pred_dir: PathLike,
    gt_dir: PathLike,
    out_path: PathLike,
    registry_url: Optional[str] = None,
) -> MetricReport:
    """Score stored forecasts against ground truth, next to the copy-last baseline."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir():
        raise MissingArtifactError(pred_dir)
    with tracked_run("eval", config, registry_url) as run:
        evaluator = Evaluator(config)
        scene_preds = sorted(p for p in pred_dir.glob("scene_*") if p.is_dir())
        if not scene_preds:
            raise DataError(f"no scene_<seed> forecast directories under {pred_dir}")
        for scene_pred in scene_preds:
            scene = dataset_read(gt_dir / scene_pred.name)
            for window_dir in _window_dirs(scene_pred):
                window = TrainingWindow(scene, int(window_dir.name[len("window_"):]), config.model.history, config.model.future)
                if window.future_range()[1] > len(scene.frames):
                    raise DataError(f"{window_dir} reaches past the {len(scene.frames)} frames of {scene_pred.name}")
                grids = [grid_read(window_dir / f"frame_{k}.ogrd") for k in range(config.model.future)]
                current = scene.frames[window.current].pose
                trajectory = read_poses(window_dir / TRAJECTORY_NAME)
                waypoints = np.stack([current.between(p).translation() for p in trajectory])
                evaluator.add(window, grids, waypoints)
        report = evaluator.report()
        write_report(report, out_path)
        run.artifact = str(out_path)
        run.report = report.to_frame()
    return report


# -- render-depth ------------------------------------------------------------


def cmd_render_depth(
    config: Optional[RunConfig],
    checkpoint: PathLike,
    scene_dir: PathLike,
    out_dir: PathLike,
    registry_url: Optional[str] = None,
) -> List[Path]:
    config = config_for_checkpoint(checkpoint, config)
    out_dir = Path(out_dir)
    written = []
    with tracked_run("render-depth", config, registry_url) as run:
        model = load_model(checkpoint, config)
        evaluator = Evaluator(config)
        for path in _scene_dirs(scene_dir):
            scene = dataset_read(path)
            far = config.model.far or scene.spec.diagonal
            for window in _windows(scene, config):
                depths = forecast_depths(model, _forecast(model, window, None), scene.rig)
                evaluator.add_depths(window, depths)
                target = out_dir / path.name / f"window_{window.start}"
                target.mkdir(parents=True, exist_ok=True)
                for k, depth in enumerate(depths):
                    written.append(depth_write(depth.numpy(), depth.valid, target / f"depth_{k}.pgm", config.model.near, far))
        mae = evaluator.mean_depth_mae()
        if mae is not None:
            logger.info("rendered depth MAE against analytic depth: %.4f m", mae)
        run.artifact = str(out_dir)
    return written


# -- bench -------------------------------------------------------------------


@dataclass
class BenchResult:
    iterations: int
    seconds: float

    @property
    def forecasts_per_second(self) -> float:
        return self.iterations / self.seconds if self.seconds > 0 else float("inf")


def cmd_bench(
    config: Optional[RunConfig],
    checkpoint: Optional[PathLike] = None,
    iterations: int = 100,
    warmup: int = 5,
    use_images: Optional[bool] = None,
    registry_url: Optional[str] = None,
) -> BenchResult:
    """Forecast throughput on one generated scene, timed after ``warmup`` untimed calls."""
    if iterations < 1:
        raise ConfigurationError(f"bench needs at least one iteration, got {iterations}")
    config = config_for_checkpoint(checkpoint, config) if checkpoint is not None else (config or build_config())
    with tracked_run("bench", config, registry_url) as run:
        model = load_model(checkpoint, config) if checkpoint is not None else build_model(config.model)
        window = _windows(generate(config.scene), config)[0]
        for _ in range(warmup):
            _forecast(model, window, use_images)
        started = time.perf_counter()
        for _ in range(iterations):
            _forecast(model, window, use_images)
        result = BenchResult(iterations, time.perf_counter() - started)
        logger.info("%d forecasts in %.2f s: %.2f forecasts/s", iterations, result.seconds, result.forecasts_per_second)
        run.artifact = None if checkpoint is None else str(checkpoint)
    return result


# -- ablate ------------------------------------------------------------------


def split_scenes(scenes: List[Scene]) -> Tuple[List[Scene], List[Scene]]:
    """Hold out the last fifth of the scenes (at least one) for evaluation."""
    if len(scenes) < 2:
        return scenes, scenes
    held_out = max(1, len(scenes) // 5)
    return scenes[:-held_out], scenes[-held_out:]


def evaluate_model(
    model: WorldModel, config: RunConfig, scenes: List[Scene], use_images: Optional[bool] = None
) -> Evaluator:
    evaluator = Evaluator(config)
    for scene in scenes:
        for window in _windows(scene, config):
            output = _forecast(model, window, use_images)
            evaluator.add(window, output.grids(), output.waypoints.values)
            evaluator.add_depths(window, forecast_depths(model, output, scene.rig))
    return evaluator


def ablation_row(name: str, variant: AblationVariant, evaluator: Evaluator) -> Dict[str, object]:
    report = evaluator.report()
    mae = evaluator.mean_depth_mae()
    return {
        "variant": name,
        "images_at_inference": variant.images_at_inference,
        "mIoU": report.average("mIoU"),
        "IoU": report.average("IoU"),
        "dyn_mIoU": report.average("dyn_mIoU"),
        "L2_m": report.average("L2_m"),
        "collision_pct": report.average("collision_pct"),
        "depth_mae_m": float("nan") if mae is None else mae,
        "baseline_dyn_mIoU": report.average("baseline_dyn_mIoU"),
    }


def learning_trend_failures(table: pd.DataFrame, targets: LearningTrendTargets = LEARNING_TREND) -> List[str]:
    """Every learning-trend margin the ablation table misses; empty when all hold."""
    rows = table.set_index("variant")
    full, direct = rows.loc[FULL_MODEL], rows.loc["baseline"]
    flow, rpc = rows.loc["decoupled_flow"], rows.loc["decoupled_rpc"]
    failures = []
    gain = full["dyn_mIoU"] - full["baseline_dyn_mIoU"]
    if not gain >= targets.dyn_miou_over_baseline:
        failures.append(f"{FULL_MODEL} dynamic mIoU beats copy-last by {gain:.2f}, needs {targets.dyn_miou_over_baseline}")
    if not flow["mIoU"] - direct["mIoU"] >= targets.flow_over_direct:
        failures.append(f"decoupled flow mIoU {flow['mIoU']:.2f} is below direct regression {direct['mIoU']:.2f}")
    if not rpc["mIoU"] >= flow["mIoU"] - targets.rpc_miou_tolerance:
        failures.append(f"rpc costs {flow['mIoU'] - rpc['mIoU']:.2f} mIoU, allowed {targets.rpc_miou_tolerance}")
    ceiling = (1.0 - targets.rpc_depth_reduction) * flow["depth_mae_m"]
    if not rpc["depth_mae_m"] <= ceiling:
        failures.append(f"rpc depth MAE {rpc['depth_mae_m']:.3f} m exceeds {ceiling:.3f} m")
    return failures


def cmd_ablate(config: RunConfig, data_dir: PathLike, out_dir: PathLike, registry_url: Optional[str] = None) -> pd.DataFrame:
    """Train every forecasting-head variant on the same data and compare them."""
    out_dir = Path(out_dir)
    with tracked_run("ablate", config, registry_url) as run:
        train_scenes, eval_scenes = split_scenes(load_scenes(data_dir))
        trained: Dict[str, Tuple[WorldModel, RunConfig]] = {}
        rows = []
        for name, variant in ABLATION_VARIANTS.items():
            logger.info("ablation variant %s", name)
            if variant.reuse is None:
                variant_config = with_model_overrides(config, **variant.overrides)
                model = train_model(variant_config, train_scenes).model
                save_checkpoint(model.state_dict(), out_dir / name / CHECKPOINT_NAME)
                trained[name] = model, variant_config
            else:
                model, variant_config = trained[variant.reuse]
            evaluator = evaluate_model(model, variant_config, eval_scenes, use_images=variant.images_at_inference)
            rows.append(ablation_row(name, variant, evaluator))
        path = write_table(rows, out_dir / ABLATION_NAME)
        run.artifact = str(path)
    table = pd.DataFrame(rows)
    for failure in learning_trend_failures(table):
        logger.warning("learning trend: %s", failure)
    return table
