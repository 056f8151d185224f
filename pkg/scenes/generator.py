"""Procedural driving scenes with exact ground truth.

The world is a set of axis-aligned boxes: a one-voxel ground slab (road strip
plus vegetation on both sides), static buildings beside the road and dynamic
objects moving at constant velocity. The ego vehicle integrates a constant
speed and yaw rate. Every frame carries the occupancy grid in the ego frame,
a rendered camera image, analytic ray depth and, for all but the last frame,
the BEV flow to the next frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import GenerationError
from geometry.flow import CURRENT, FlowField
from geometry.pose import EgoPose
from geometry.warp import BevFrame
from occupancy.grid import FREE, ClassTable, OccupancyGrid
from render.camera import CameraRig, default_rig, generate_rays
from render.imageio import DEPTH_MAX, DEPTH_SCALE, to_uint8
from schemas.config import SceneSpec
from tensor.core import Tensor

logger = logging.getLogger(__name__)

GROUND_EXTENT = 500.0
SKY = np.array([0.62, 0.76, 0.92])
LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
PALETTE: Dict[str, Tuple[float, float, float]] = {
    "road": (0.38, 0.38, 0.42),
    "vegetation": (0.22, 0.55, 0.22),
    "building": (0.72, 0.56, 0.44),
    "car": (0.82, 0.16, 0.12),
    "pedestrian": (0.92, 0.80, 0.22),
}
_MAX_ATTEMPTS = 64


@dataclass(frozen=True)
class Box:
    """World-frame box ``[lower, upper)``; dynamic boxes move with ``velocity`` (m/s in x, y)."""

    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]
    class_id: int
    velocity: Tuple[float, float] = (0.0, 0.0)
    dynamic: bool = False

    def at(self, t: float) -> "Box":
        dx, dy = self.velocity[0] * t, self.velocity[1] * t
        lo, hi = self.lower, self.upper
        return replace(self, lower=(lo[0] + dx, lo[1] + dy, lo[2]), upper=(hi[0] + dx, hi[1] + dy, hi[2]))

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.all((points >= lo) & (points < hi), axis=-1)

    def contains_xy(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower[:2]), np.asarray(self.upper[:2])
        return np.all((points >= lo) & (points < hi), axis=-1)

    def corners_xy(self) -> np.ndarray:
        (x0, y0, _), (x1, y1, _) = self.lower, self.upper
        return np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])

    def overlaps(self, other: "Box") -> bool:
        return all(a_lo < b_hi and b_lo < a_hi for a_lo, a_hi, b_lo, b_hi in zip(self.lower, self.upper, other.lower, other.upper))


@dataclass
class SceneFrame:
    grid: OccupancyGrid
    pose: EgoPose
    image: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    flow: Optional[FlowField] = None

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


@dataclass
class Scene:
    spec: SceneSpec
    rig: CameraRig
    frames: List[SceneFrame]
    static_boxes: List[Box] = field(default_factory=list)
    objects: List[Box] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def poses(self) -> List[EgoPose]:
        return [f.pose for f in self.frames]

    def boxes_at(self, k: int) -> List[Box]:
        t = k * self.spec.frame_dt
        return self.static_boxes + [obj.at(t) for obj in self.objects]


def _snap(value: float, step: float) -> float:
    return float(np.round(value / step) * step)


def ego_trajectory(spec: SceneSpec) -> List[EgoPose]:
    """Euler integration of constant speed and yaw rate from the identity pose."""
    dt = spec.frame_dt
    step = EgoPose(spec.ego_speed * dt, 0.0, spec.ego_yaw_rate * dt)
    poses = [EgoPose.identity()]
    for _ in range(spec.sequence_length - 1):
        poses.append(poses[-1].compose(step))
    return poses


def ground_boxes(spec: SceneSpec, table: ClassTable) -> List[Box]:
    top = spec.voxel_size[2]
    half = _snap(spec.road_half_width, spec.voxel_size[1])
    road, veg = table.id_of("road"), table.id_of("vegetation")
    return [
        Box((-GROUND_EXTENT, -half, 0.0), (GROUND_EXTENT, half, top), road),
        Box((-GROUND_EXTENT, half, 0.0), (GROUND_EXTENT, GROUND_EXTENT, top), veg),
        Box((-GROUND_EXTENT, -GROUND_EXTENT, 0.0), (GROUND_EXTENT, -half, top), veg),
    ]


def _random_buildings(spec: SceneSpec, table: ClassTable, rng: np.random.Generator) -> List[Box]:
    vx, vy, vz = spec.voxel_size
    building = table.id_of("building")
    travel = abs(spec.ego_speed) * spec.frame_dt * (spec.sequence_length - 1)
    x_min = spec.origin[0]
    x_max = spec.origin[0] + spec.extent[0] + travel
    road_edge = _snap(spec.road_half_width, vy)
    boxes = []
    for _ in range(spec.num_buildings):
        length = int(rng.integers(2, 7)) * vx
        width = int(rng.integers(2, 5)) * vy
        height = int(rng.integers(2, max(spec.dims[2], 3))) * vz
        x0 = _snap(rng.uniform(x_min, max(x_min, x_max - length)), vx)
        near = road_edge + int(rng.integers(0, 3)) * vy
        y_lo, y_hi = (near, near + width) if rng.random() < 0.5 else (-near - width, -near)
        boxes.append(Box((x0, y_lo, 0.0), (x0 + length, y_hi, height), building))
    return boxes


def _inside_grid(box: Box, pose: EgoPose, spec: SceneSpec) -> bool:
    local = pose.inverse().apply(box.corners_xy())
    lo = np.asarray(spec.origin[:2])
    hi = lo + np.asarray(spec.extent[:2])
    return bool(np.all(local >= lo - 1e-9) and np.all(local <= hi + 1e-9) and box.upper[2] <= spec.origin[2] + spec.extent[2])


def _first_exit(box: Box, poses: Sequence[EgoPose], spec: SceneSpec) -> Optional[int]:
    for k, pose in enumerate(poses):
        if not _inside_grid(box.at(k * spec.frame_dt), pose, spec):
            return k
    return None


def _collides(box: Box, others: Sequence[Box], spec: SceneSpec) -> bool:
    for k in range(spec.sequence_length):
        t = k * spec.frame_dt
        moved = box.at(t)
        if any(moved.overlaps(o.at(t)) for o in others):
            return True
    return False


def _random_objects(
    spec: SceneSpec, table: ClassTable, rng: np.random.Generator, poses: Sequence[EgoPose], buildings: Sequence[Box]
) -> List[Box]:
    vx, vy, vz = spec.voxel_size
    dynamic_names = [n for n, d in zip(table.names, table.dynamic) if d]
    if not dynamic_names:
        return []
    shapes = {"car": (4, 2, 3), "pedestrian": (1, 1, 3)}
    objects: List[Box] = []
    half = _snap(spec.road_half_width, vy)
    for _ in range(spec.num_objects):
        for _attempt in range(_MAX_ATTEMPTS):
            name = "car" if "car" in dynamic_names and rng.random() < 0.7 else dynamic_names[int(rng.integers(len(dynamic_names)))]
            nx, ny, nz = shapes.get(name, (2, 2, 2))
            lx, ly, lz = nx * vx, ny * vy, nz * vz
            speed = spec.ego_speed + int(rng.integers(-1, 2)) * vx * spec.fps
            x0 = _snap(rng.uniform(spec.origin[0] + vx, spec.origin[0] + spec.extent[0] - lx - vx), vx)
            y0 = _snap(rng.uniform(-half, max(-half, half - ly)), vy)
            candidate = Box((x0, y0, vz), (x0 + lx, y0 + ly, vz + lz), table.id_of(name), (speed, 0.0), True)
            if _first_exit(candidate, poses, spec) is None and not _collides(candidate, list(objects) + list(buildings), spec):
                objects.append(candidate)
                break
        else:
            logger.debug("could not place dynamic object %d after %d attempts", len(objects), _MAX_ATTEMPTS)
    return objects


def build_world(spec: SceneSpec) -> Tuple[ClassTable, List[Box], List[Box], List[EgoPose]]:
    """Static boxes, dynamic objects at t=0 and ego poses for a spec."""
    table = spec.class_table()
    rng = np.random.default_rng(spec.seed)
    poses = ego_trajectory(spec)
    if spec.buildings is None:
        buildings = _random_buildings(spec, table, rng)
    else:
        buildings = [Box(tuple(b.lower), tuple(b.upper), table.id_of(b.class_name)) for b in spec.buildings]

    if spec.objects is None:
        objects = _random_objects(spec, table, rng, poses, buildings)
    else:
        objects = []
        for i, obj in enumerate(spec.objects):
            (cx, cy), (lx, ly, lz) = obj.center, obj.extent
            bottom = spec.voxel_size[2]
            class_id = table.id_of(obj.class_name)
            box = Box((cx - lx / 2, cy - ly / 2, bottom), (cx + lx / 2, cy + ly / 2, bottom + lz), class_id, tuple(obj.velocity), True)
            frame = _first_exit(box, poses, spec)
            if frame is not None:
                raise GenerationError(f"object {i} ({obj.class_name}) leaves the grid at frame {frame}")
            objects.append(box)
    return table, ground_boxes(spec, table) + buildings, objects, poses


# -- rasterization -------------------------------------------------------------


def voxel_centers(spec: SceneSpec) -> np.ndarray:
    """``[H, W, D, 3]`` voxel centers in the ego frame."""
    axes = [o + (np.arange(n) + 0.5) * v for o, n, v in zip(spec.origin, spec.dims, spec.voxel_size)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def rasterize(spec: SceneSpec, table: ClassTable, boxes: Sequence[Box], pose: EgoPose) -> OccupancyGrid:
    """Label each voxel with the class of the last box containing its center."""
    centers = voxel_centers(spec)
    world = centers.copy()
    world[..., :2] = pose.apply(centers[..., :2])
    classes = np.full(spec.dims, FREE, dtype=np.uint8)
    for box in boxes:
        classes[box.contains(world)] = box.class_id
    return OccupancyGrid(classes, spec.voxel_size, spec.origin, table)


def flow_between(spec: SceneSpec, objects: Sequence[Box], poses: Sequence[EgoPose], k: int) -> FlowField:
    """Ground-truth BEV flow from frame ``k`` to ``k + 1`` on the frame ``k + 1`` grid.

    Cells covered by an object at ``k + 1``, or whose world point was covered by it
    at ``k``, hold that object's displacement in frame-``k`` coordinates.
    """
    dt = spec.frame_dt
    frame = BevFrame(spec.dims[:2], spec.voxel_size[:2], spec.origin[:2])
    world = poses[k + 1].apply(frame.cell_centers())
    flow = np.zeros(spec.dims[:2] + (2,))
    rotation = poses[k].rotation()
    for obj in objects:
        now = obj.at((k + 1) * dt).contains_xy(world)
        before = obj.at(k * dt).contains_xy(world)
        displacement = rotation.T @ (np.asarray(obj.velocity) * dt)
        flow[now | before] = displacement
    return FlowField(Tensor(flow[None]), CURRENT)


# -- camera ------------------------------------------------------------------


def _intersect(origins: np.ndarray, dirs: np.ndarray, box: Box):
    lo, hi = np.asarray(box.lower), np.asarray(box.upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    t_in = near.max(axis=-1)
    axis = near.argmax(axis=-1)
    hit = (t_in > 0.0) & (far.min(axis=-1) > t_in)
    return t_in, axis, hit


def render_view(
    spec: SceneSpec, table: ClassTable, rig: CameraRig, boxes: Sequence[Box], pose: EgoPose
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat-shaded textured image, ray depth and depth mask for one ego pose."""
    origins, dirs = generate_rays(rig)
    h, w = rig.image_size
    origins, dirs = origins.reshape(-1, 3).copy(), dirs.reshape(-1, 3).copy()
    origins[:, :2] = pose.apply(origins[:, :2])
    dirs[:, :2] = dirs[:, :2] @ pose.rotation().T

    best = np.full(len(dirs), np.inf)
    color = np.tile(SKY, (len(dirs), 1))
    for box in boxes:
        t, axis, hit = _intersect(origins, dirs, box)
        closer = hit & (t < best)
        if not closer.any():
            continue
        best[closer] = t[closer]
        idx = np.flatnonzero(closer)
        points = origins[idx] + t[idx, None] * dirs[idx]
        normal = np.zeros((len(idx), 3))
        normal[np.arange(len(idx)), axis[idx]] = -np.sign(dirs[idx, axis[idx]])
        anchor = np.asarray(box.lower) if box.dynamic else np.zeros(3)
        local = points - anchor
        u = local[np.arange(len(idx)), (axis[idx] + 1) % 3]
        v = local[np.arange(len(idx)), (axis[idx] + 2) % 3]
        freq = 2.0 * np.pi * spec.texture_frequency
        texture = 0.75 + 0.25 * np.sin(freq * u) * np.sin(freq * v)
        shade = 0.35 + 0.65 * np.clip(normal @ LIGHT, 0.0, None)
        base = np.asarray(PALETTE.get(table.names[box.class_id], (0.5, 0.5, 0.5)))
        color[idx] = base * (shade * texture)[:, None]

    # depth is stored in whole millimeters; hits beyond the storable range carry no depth
    valid = np.isfinite(best) & (best * DEPTH_SCALE <= DEPTH_MAX)
    depth = np.where(valid, np.round(np.where(valid, best, 0.0) * DEPTH_SCALE) / DEPTH_SCALE, 0.0)
    return to_uint8(color.reshape(h, w, 3)), depth.reshape(h, w), valid.reshape(h, w)


def scene_rig(spec: SceneSpec) -> CameraRig:
    return default_rig(spec.image_size, spec.focal, spec.camera_height, spec.camera_pitch)


def generate(spec: SceneSpec) -> Scene:
    """Deterministic scene for ``spec``; ``len(scene.frames) == spec.sequence_length``."""
    table, static_boxes, objects, poses = build_world(spec)
    rig = scene_rig(spec)
    dt = spec.frame_dt
    frames = []
    for k, pose in enumerate(poses):
        boxes = static_boxes + [obj.at(k * dt) for obj in objects]
        grid = rasterize(spec, table, boxes, pose)
        image, depth, valid = render_view(spec, table, rig, boxes, pose)
        flow = flow_between(spec, objects, poses, k) if k + 1 < len(poses) else None
        frames.append(SceneFrame(grid, pose, image, depth, valid, flow))
    logger.debug("generated scene seed=%d with %d objects and %d static boxes", spec.seed, len(objects), len(static_boxes))
    return Scene(spec, rig, frames, static_boxes, objects)
