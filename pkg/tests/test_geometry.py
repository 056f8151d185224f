import math

import numpy as np
import pytest

from exceptions import DataError, DimensionError, ConfigurationError, ParseError, StateError
from geometry.flow import CURRENT, FUTURE, FlowField, decode_flow, encode_flow, flow_read, flow_write, transform_flow
from geometry.pose import (
    EgoPose,
    ego_motions,
    normalize_angle,
    poses_from_array,
    poses_from_waypoints,
    poses_to_array,
    relative_displacements,
)
from geometry.transport import static_transport, transport_grid, transportable_mask
from geometry.warp import BevFrame, DynamicMask, dynamic_mask, warp_features, warp_oracle
from occupancy.grid import DEFAULT_CLASSES, FREE, empty_grid
from tensor.core import Tensor

CAR = DEFAULT_CLASSES.id_of("car")
BUILDING = DEFAULT_CLASSES.id_of("building")


# -- poses -----------------------------------------------------------------


def test_normalize_angle_wraps_into_half_open_interval():
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert normalize_angle(0.25) == pytest.approx(0.25)


def test_compose_inverse_is_identity(rng):
    for _ in range(10):
        pose = EgoPose(*rng.normal(size=2), rng.uniform(-3, 3))
        ident = pose.compose(pose.inverse())
        assert ident.as_array() == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)


def test_between_expresses_other_in_own_frame():
    current = EgoPose(1.0, 2.0, math.pi / 2)
    future = EgoPose(1.0, 5.0, math.pi / 2)
    rel = current.between(future)
    assert rel.as_array() == pytest.approx([3.0, 0.0, 0.0], abs=1e-12)
    assert current.compose(rel).as_array() == pytest.approx(future.as_array())


def test_apply_maps_local_points_to_parent():
    pose = EgoPose(1.0, 0.0, math.pi / 2)
    np.testing.assert_allclose(pose.apply([1.0, 0.0]), [1.0, 1.0], atol=1e-12)


def test_relative_displacements_of_straight_drive():
    poses = [EgoPose(0.5 * k, 0.0, 0.0) for k in range(4)]
    steps = relative_displacements(poses).values
    np.testing.assert_allclose(steps, [[0.5, 0.0, 0.0]] * 3, atol=1e-6)


def test_relative_displacements_needs_two_poses():
    with pytest.raises(ConfigurationError):
        relative_displacements([EgoPose()])


def test_waypoints_to_poses_follow_chord_heading():
    poses = poses_from_waypoints(EgoPose(), np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]))
    assert poses[0].yaw == pytest.approx(0.0)
    assert poses[1].yaw == pytest.approx(math.pi / 2)
    # zero-length step keeps the previous heading
    assert poses[2].yaw == pytest.approx(math.pi / 2)
    motions = ego_motions(EgoPose(), poses)
    assert motions[1].as_array() == pytest.approx([1.0, 1.0, math.pi / 2])


def test_pose_array_round_trip():
    poses = [EgoPose(0.1, -0.2, 0.3), EgoPose(1.0, 2.0, -1.0)]
    back = poses_from_array(poses_to_array(poses))
    assert [p.as_array().tolist() for p in back] == [p.as_array().tolist() for p in poses]


# -- flow ------------------------------------------------------------------


def test_transform_flow_identity_motion_is_noop(rng):
    flow = FlowField(Tensor(rng.normal(size=(2, 3, 3, 2))))
    out = transform_flow(flow, EgoPose(1.0, 1.0, 0.3), EgoPose(1.0, 1.0, 0.3))
    assert out.frame == FUTURE
    np.testing.assert_allclose(out.values(), flow.values(), atol=1e-6)


def test_transform_flow_rotates_and_offsets():
    flow = FlowField(Tensor(np.tile([1.0, 0.0], (1, 2, 2, 1))))
    out = transform_flow(flow, EgoPose(), EgoPose(0.0, 0.0, math.pi / 2))
    np.testing.assert_allclose(out.values()[0, 0, 0], [0.0, -1.0], atol=1e-6)
    shifted = transform_flow(FlowField(Tensor(np.zeros((1, 2, 2, 2)))), EgoPose(), EgoPose(1.0, 0.0, 0.0))
    np.testing.assert_allclose(shifted.values()[0, 1, 1], [-1.0, 0.0], atol=1e-6)


def test_transform_flow_rejects_future_tagged_input():
    flow = FlowField(Tensor(np.zeros((1, 2, 2, 2))), FUTURE)
    with pytest.raises(StateError):
        transform_flow(flow, EgoPose(), EgoPose())


def test_transform_flow_pose_count_must_match():
    flow = FlowField(Tensor(np.zeros((2, 2, 2, 2))))
    with pytest.raises(DimensionError):
        transform_flow(flow, EgoPose(), [EgoPose()])


def test_flow_shape_is_validated():
    with pytest.raises(DimensionError):
        FlowField(Tensor(np.zeros((2, 2, 3))))


def test_flow_file_round_trip(tmp_path, rng):
    flow = FlowField(Tensor(rng.normal(size=(2, 3, 4, 2)).astype(np.float32)), CURRENT)
    back = flow_read(flow_write(flow, tmp_path / "f.oflw"))
    assert back.frame == CURRENT
    np.testing.assert_array_equal(back.values(), flow.values())


def test_truncated_flow_is_parse_error(rng):
    data = encode_flow(FlowField(Tensor(rng.normal(size=(1, 2, 2, 2)))))
    with pytest.raises(ParseError):
        decode_flow(data[:-4])


# -- warping ---------------------------------------------------------------


def _frame(h=6, w=5, vs=0.5):
    return BevFrame((h, w), (vs, vs), (-1.5, -1.25))


def test_zero_flow_and_identity_motion_reproduce_features(rng):
    feat = rng.normal(size=(6, 5, 3))
    mask = DynamicMask(rng.random((6, 5)) < 0.3)
    flow = FlowField(Tensor(np.zeros((2, 6, 5, 2))), FUTURE)
    out = warp_features(feat, flow, mask, _frame(), [EgoPose(), EgoPose()])
    np.testing.assert_allclose(out.values[1], feat, atol=1e-6)


def test_integer_flow_moves_only_dynamic_cells(f64):
    feat = np.zeros((6, 5, 1))
    feat[2, 2, 0] = 1.0  # dynamic cell
    feat[4, 1, 0] = 2.0  # static cell
    mask = np.zeros((6, 5), dtype=bool)
    mask[2, 2] = True
    flow = np.zeros((1, 6, 5, 2))
    flow[0, :, :, 0] = 0.5  # one cell along +x everywhere
    out = warp_features(feat, FlowField(Tensor(flow), FUTURE), DynamicMask(mask), _frame(), [EgoPose()])
    assert out.values[0, 3, 2, 0] == pytest.approx(1.0)
    assert out.values[0, 2, 2, 0] == pytest.approx(0.0)
    assert out.values[0, 4, 1, 0] == pytest.approx(2.0)


def test_warp_matches_per_cell_oracle(f64, rng):
    frame = _frame()
    for _ in range(25):
        feat = rng.normal(size=(6, 5, 2))
        mask = rng.random((6, 5)) < 0.4
        flow = rng.uniform(-1.2, 1.2, size=(2, 6, 5, 2))
        motions = [EgoPose(*rng.uniform(-0.6, 0.6, size=2), rng.uniform(-0.3, 0.3)) for _ in range(2)]
        fill = rng.normal(size=2)
        got = warp_features(feat, FlowField(Tensor(flow), FUTURE), DynamicMask(mask), frame, motions, fill=fill)
        want = warp_oracle(feat, flow, mask, frame, motions, fill=fill)
        np.testing.assert_allclose(got.values, want, atol=1e-6)


def test_plain_mode_treats_every_cell_as_dynamic(f64, rng):
    feat = rng.normal(size=(6, 5, 2))
    flow = np.zeros((1, 6, 5, 2))
    flow[0, :, :, 1] = 0.5
    # the ego motion is ignored in plain mode because no cell is static
    out = warp_features(
        feat, FlowField(Tensor(flow), FUTURE), DynamicMask(np.zeros((6, 5), bool)), _frame(), [EgoPose(3.0, 0.0, 0.0)], mode="plain"
    )
    np.testing.assert_allclose(out.values[0, :, 1:], feat[:, :-1], atol=1e-9)


def test_warp_rejects_current_frame_flow_and_nan(rng):
    mask = DynamicMask(np.zeros((6, 5), bool))
    with pytest.raises(StateError):
        warp_features(np.zeros((6, 5, 1)), FlowField(Tensor(np.zeros((1, 6, 5, 2)))), mask, _frame(), [EgoPose()])
    bad = np.zeros((1, 6, 5, 2))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        warp_features(np.zeros((6, 5, 1)), FlowField(Tensor(bad), FUTURE), mask, _frame(), [EgoPose()])


def test_dynamic_mask_marks_columns_with_dynamic_voxels():
    grid = empty_grid((3, 3, 2), (0.5, 0.5, 0.5), (0.0, 0.0, 0.0))
    classes = grid.classes.copy()
    classes[1, 2, 1] = CAR
    classes[0, 0, 0] = BUILDING
    mask = dynamic_mask(grid.with_classes(classes)).mask
    assert mask[1, 2] and mask.sum() == 1


# -- transport -------------------------------------------------------------


def _scene_grid():
    grid = empty_grid((6, 6, 2), (0.5, 0.5, 0.5), (-1.5, -1.5, 0.0))
    classes = grid.classes.copy()
    classes[:, :, 0] = DEFAULT_CLASSES.id_of("road")
    classes[4, 1, 1] = BUILDING
    classes[2, 3, 1] = CAR
    return grid.with_classes(classes)


def test_static_transport_integer_step_shifts_cells():
    grid = _scene_grid()
    out = static_transport(grid, EgoPose(), EgoPose(0.5, 0.0, 0.0))
    assert out.classes[3, 1, 1] == BUILDING
    assert not (out.classes == CAR).any()
    # the newly exposed front row is unknown and left free
    assert (out.classes[5] == FREE).all()
    valid = transportable_mask(grid, EgoPose(), EgoPose(0.5, 0.0, 0.0))
    assert valid[:5].all() and not valid[5].any()


def test_transport_quarter_turn_is_exact():
    grid = _scene_grid()
    turned = transport_grid(grid, EgoPose(), EgoPose(0.0, 0.0, math.pi / 2))
    back = transport_grid(turned, EgoPose(0.0, 0.0, math.pi / 2), EgoPose())
    assert back == grid
