import numpy as np
import pytest

from exceptions import DataError, GenerationError, MissingArtifactError
from geometry.flow import transform_flow
from geometry.pose import EgoPose
from geometry.transport import static_transport, transportable_mask
from geometry.warp import BevFrame, dynamic_mask, warp_features
from occupancy.grid import FREE
from render.camera import generate_rays
from render.volume import ray_box_interval
from scenes.dataset import (
    dataset_read,
    dataset_write,
    generate_dataset,
    list_scenes,
    read_poses,
    scene_specs,
    write_poses,
)
from scenes.generator import GROUND_EXTENT, generate
from schemas.config import ObjectSpec, SceneSpec


def _spec(**overrides):
    base = dict(
        dims=(8, 8, 4),
        voxel_size=(0.5, 0.5, 0.5),
        origin=(-2.0, -2.0, 0.0),
        sequence_length=5,
        fps=2.0,
        ego_speed=0.0,
        num_buildings=0,
        num_objects=0,
        road_half_width=1.0,
        image_size=(12, 16),
        focal=8.0,
        camera_height=1.0,
        camera_pitch=0.2,
    )
    base.update(overrides)
    return SceneSpec(**base)


def _moving_car(**overrides):
    car = ObjectSpec(center=(-0.5, 0.5), extent=(1.0, 1.0, 1.0), velocity=(2.0, 0.0), class_name="car")
    return _spec(ego_speed=1.0, objects=[car], **overrides)


def _dynamic_columns(grid):
    return grid.dynamic_voxels().any(axis=2)


# -- generation ------------------------------------------------------------


def test_generation_is_deterministic_per_seed():
    spec = _spec(seed=11, ego_speed=1.0, num_buildings=3, num_objects=1)
    a, b = generate(spec), generate(spec)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.grid == fb.grid and fa.pose == fb.pose
        np.testing.assert_array_equal(fa.image, fb.image)
        np.testing.assert_array_equal(fa.depth, fb.depth)


def test_static_world_without_motion_repeats_frames():
    scene = generate(_spec(seed=2, num_buildings=3))
    first = scene.frames[0]
    assert len(scene) == 5
    for frame in scene.frames[1:]:
        assert frame.grid == first.grid
        np.testing.assert_array_equal(frame.image, first.image)
        if frame.flow is not None:
            np.testing.assert_array_equal(frame.flow.values(), 0.0)


def test_object_moves_one_cell_per_frame():
    car = ObjectSpec(center=(-0.5, 0.5), extent=(1.0, 1.0, 1.0), velocity=(1.0, 0.0), class_name="car")
    scene = generate(_spec(objects=[car]))
    cells = [np.argwhere(f.grid.dynamic_voxels()) for f in scene.frames]
    for k in range(1, len(cells)):
        np.testing.assert_array_equal(cells[k], cells[k - 1] + [1, 0, 0])
    assert cells[0][:, 0].min() == 2 and cells[0][:, 2].min() == 1


def test_object_leaving_grid_names_the_frame():
    car = ObjectSpec(center=(0.0, 0.5), extent=(1.0, 1.0, 1.0), velocity=(3.0, 0.0), class_name="car")
    with pytest.raises(GenerationError, match=r"object 0 \(car\) leaves the grid at frame 2"):
        generate(_spec(objects=[car]))


def test_ground_truth_flow_warps_dynamic_cells_exactly(f64):
    scene = generate(_moving_car())
    frame = BevFrame.of(scene.frames[0].grid)
    for k in range(len(scene) - 1):
        now, nxt = scene.frames[k], scene.frames[k + 1]
        flow = transform_flow(now.flow, now.pose, nxt.pose)
        feat = _dynamic_columns(now.grid)[..., None].astype(np.float64)
        warped = warp_features(feat, flow, dynamic_mask(now.grid), frame, [now.pose.between(nxt.pose)])
        np.testing.assert_allclose(warped.values[0, ..., 0], _dynamic_columns(nxt.grid), atol=1e-9)


def test_static_transport_reproduces_next_static_frame():
    scene = generate(_spec(seed=5, ego_speed=1.0, num_buildings=4, num_objects=1))
    for k in range(len(scene) - 1):
        now, nxt = scene.frames[k], scene.frames[k + 1]
        moved = static_transport(now.grid, now.pose, nxt.pose)
        expected = np.where(nxt.grid.dynamic_voxels(), FREE, nxt.grid.classes)
        valid = transportable_mask(now.grid, now.pose, nxt.pose)
        np.testing.assert_array_equal(moved.classes[valid], expected[valid])


def test_depth_matches_ray_box_distance_to_ground():
    spec = _spec()
    scene = generate(spec)
    origins, dirs = generate_rays(scene.rig)
    lower = np.array([-GROUND_EXTENT, -GROUND_EXTENT, 0.0])
    upper = np.array([GROUND_EXTENT, GROUND_EXTENT, spec.voxel_size[2]])
    t_in, _, hit = ray_box_interval(origins.reshape(-1, 3), dirs.reshape(-1, 3), lower, upper)
    frame = scene.frames[0]
    valid = frame.depth_valid.reshape(-1)
    assert valid.any()
    np.testing.assert_array_equal(valid, hit & (t_in <= 65.535))
    np.testing.assert_allclose(frame.depth.reshape(-1)[valid], t_in[valid], atol=6e-4)


# -- dataset files ---------------------------------------------------------


def test_dataset_round_trip(tmp_path, tiny_scene):
    back = dataset_read(dataset_write(tiny_scene, tmp_path / "scene_0"))
    assert back.spec == tiny_scene.spec
    np.testing.assert_array_equal(back.rig.K, tiny_scene.rig.K)
    assert len(back) == len(tiny_scene)
    for a, b in zip(tiny_scene.frames, back.frames):
        assert a.grid == b.grid
        assert a.pose == b.pose
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.depth_valid, b.depth_valid)
        if a.flow is None:
            assert b.flow is None
        else:
            np.testing.assert_array_equal(a.flow.values(), b.flow.values())


def test_pose_csv_has_one_row_per_frame(tmp_path, tiny_scene):
    directory = dataset_write(tiny_scene, tmp_path / "scene_0")
    lines = (directory / "poses.csv").read_text().strip().splitlines()
    assert lines[0] == "frame,x,y,yaw"
    assert len(lines) - 1 == tiny_scene.spec.sequence_length


def test_poses_round_trip_exactly(tmp_path):
    poses = [EgoPose(0.1, 1 / 3, 0.7), EgoPose(-2.5, 1e-9, -3.0)]
    assert read_poses(write_poses(poses, tmp_path / "poses.csv")) == poses


def test_missing_artifact_names_expected_path(tmp_path, tiny_scene):
    directory = dataset_write(tiny_scene, tmp_path / "scene_0")
    (directory / "frame_1.ogrd").unlink()
    with pytest.raises(MissingArtifactError, match="frame_1.ogrd"):
        dataset_read(directory)


def test_short_pose_file_is_data_error(tmp_path, tiny_scene):
    directory = dataset_write(tiny_scene, tmp_path / "scene_0")
    write_poses(tiny_scene.poses[:-1], directory / "poses.csv")
    with pytest.raises(DataError, match="rows"):
        dataset_read(directory)


def test_threaded_generation_matches_serial(tmp_path):
    specs = scene_specs(_spec(num_buildings=2, num_objects=1, ego_speed=1.0), 3, first_seed=7)
    serial = generate_dataset(specs, tmp_path / "serial", threads=1)
    threaded = generate_dataset(specs, tmp_path / "threaded", threads=3)
    assert [p.name for p in list_scenes(tmp_path / "threaded")] == ["scene_7", "scene_8", "scene_9"]
    for a, b in zip(serial, threaded):
        for path in sorted(a.iterdir()):
            assert path.read_bytes() == (b / path.name).read_bytes()
