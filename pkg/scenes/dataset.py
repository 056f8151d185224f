"""On-disk scene layout.

``scene_<seed>/`` holds ``frame_<k>.ogrd``, ``frame_<k>.ppm``, ``frame_<k>.pgm``
(with its near/far sidecar), ``flow_<k>.oflw`` for every frame but the last,
``poses.csv``, ``rig.txt`` and ``spec.json``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from exceptions import DataError, MissingArtifactError
from geometry.flow import flow_read, flow_write
from geometry.pose import EgoPose
from occupancy.grid import grid_read, grid_write
from render.camera import rig_read, rig_write
from render.imageio import depth_read, depth_write, image_read, image_write
from scenes.generator import Scene, SceneFrame, generate
from schemas.config import SceneSpec

logger = logging.getLogger(__name__)

POSE_COLUMNS = ["frame", "x", "y", "yaw"]


def scene_dir_name(seed: int) -> str:
    return f"scene_{seed}"


def write_poses(poses: Sequence[EgoPose], path: Union[str, Path]) -> Path:
    path = Path(path)
    rows = [{"frame": k, "x": p.x, "y": p.y, "yaw": p.yaw} for k, p in enumerate(poses)]
    pd.DataFrame(rows, columns=POSE_COLUMNS).to_csv(path, index=False, float_format="%.17g")
    return path


def read_poses(path: Union[str, Path]) -> List[EgoPose]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != POSE_COLUMNS:
        raise DataError(f"{path} must have columns {POSE_COLUMNS}, got {list(frame.columns)}")
    if list(frame["frame"]) != list(range(len(frame))):
        raise DataError(f"{path} frames must be numbered 0..{len(frame) - 1}")
    return [EgoPose(row.x, row.y, row.yaw) for row in frame.itertuples(index=False)]


def dataset_write(scene: Scene, directory: Union[str, Path]) -> Path:
    """Write every artifact of ``scene`` into ``directory`` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    far = scene.spec.diagonal
    for k, frame in enumerate(scene.frames):
        grid_write(frame.grid, directory / f"frame_{k}.ogrd")
        image_write(frame.image, directory / f"frame_{k}.ppm")
        depth_write(frame.depth, frame.depth_valid, directory / f"frame_{k}.pgm", 0.0, far)
        if frame.flow is not None:
            flow_write(frame.flow, directory / f"flow_{k}.oflw")
    write_poses(scene.poses, directory / "poses.csv")
    rig_write(scene.rig, directory / "rig.txt")
    (directory / "spec.json").write_text(scene.spec.model_dump_json(indent=2), encoding="utf-8")
    logger.debug("wrote %d frames to %s", len(scene.frames), directory)
    return directory


def read_spec(directory: Union[str, Path]) -> SceneSpec:
    path = Path(directory) / "spec.json"
    if not path.is_file():
        raise MissingArtifactError(path)
    try:
        return SceneSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise DataError(f"malformed scene spec {path}: {exc}")


def dataset_read(directory: Union[str, Path]) -> Scene:
    """Read a scene written by :func:`dataset_write`; world boxes are not restored."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(directory)
    spec = read_spec(directory)
    poses = read_poses(directory / "poses.csv")
    if len(poses) != spec.sequence_length:
        raise DataError(f"{directory / 'poses.csv'} has {len(poses)} rows, expected {spec.sequence_length}")
    rig = rig_read(directory / "rig.txt")
    frames = []
    for k, pose in enumerate(poses):
        grid = grid_read(directory / f"frame_{k}.ogrd")
        image = image_read(directory / f"frame_{k}.ppm")
        depth, valid = depth_read(directory / f"frame_{k}.pgm")
        flow = flow_read(directory / f"flow_{k}.oflw") if k + 1 < len(poses) else None
        frames.append(SceneFrame(grid, pose, image, depth, valid, flow))
    return Scene(spec, rig, frames)


def scene_specs(base: SceneSpec, count: int, first_seed: int = 0) -> List[SceneSpec]:
    return [base.model_copy(update={"seed": first_seed + i}) for i in range(count)]


def generate_dataset(specs: Sequence[SceneSpec], root: Union[str, Path], threads: int = 1) -> List[Path]:
    """Generate and write one directory per spec under ``root``.

    Scenes depend only on their own seed, so the output does not depend on ``threads``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def build(spec: SceneSpec) -> Path:
        return dataset_write(generate(spec), root / scene_dir_name(spec.seed))

    if threads <= 1:
        paths = [build(spec) for spec in specs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = list(pool.map(build, specs))
    logger.info("generated %d scenes under %s", len(paths), root)
    return paths


def list_scenes(root: Union[str, Path]) -> List[Path]:
    """Scene directories under ``root`` ordered by seed."""
    root = Path(root)
    if not root.is_dir():
        raise MissingArtifactError(root)
    found = [p for p in root.glob("scene_*") if p.is_dir() and p.name[len("scene_"):].lstrip("-").isdigit()]
    return sorted(found, key=lambda p: int(p.name[len("scene_"):]))


def load_scenes(root: Union[str, Path]) -> List[Scene]:
    paths = list_scenes(root)
    if not paths:
        raise DataError(f"no scene_<seed> directories under {root}")
    return [dataset_read(p) for p in paths]


def images_array(scene: Scene, start: int, stop: int) -> np.ndarray:
    """``[stop - start, H, W, 3]`` float images in [0, 1]."""
    return np.stack([f.image_float() for f in scene.frames[start:stop]])
