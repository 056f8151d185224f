import numpy as np
import pytest

from exceptions import ConfigurationError
from geometry.flow import CURRENT, FUTURE
from geometry.pose import EgoPose
from model.salt import AttentionMask, SaltBlock, TemporalEmbedding
from model.world_model import ForecastInput, build_model
from occupancy.grid import DEFAULT_CLASSES, OccupancyGrid
from pipeline.trainer import build_windows, window_losses
from scenes.generator import generate
from schemas.config import WorldModelConfig
from tensor.core import Tensor
from tensor.gradcheck import check_parameters


def _history(cfg: WorldModelConfig, rng, images=True):
    grids = [
        OccupancyGrid(
            rng.integers(0, len(DEFAULT_CLASSES), size=cfg.grid_dims), (0.5, 0.5, 0.5), (-2.0, -2.0, 0.0), DEFAULT_CLASSES
        )
        for _ in range(cfg.history)
    ]
    poses = [EgoPose(0.5 * k, 0.0, 0.0) for k in range(cfg.history)]
    h, w, _ = cfg.grid_dims
    frames = rng.random((cfg.history, h, w, 3)) if images else None
    return ForecastInput(grids, poses, frames)


def _config(micro_config, **overrides):
    return micro_config.model_copy(update=overrides)


# -- SALT blocks -----------------------------------------------------------


def test_salt_block_keeps_shape(rng):
    block = SaltBlock(8, 2, 2, 2, rng)
    x = Tensor(rng.normal(size=(3, 4, 4, 8)))
    assert block(x).shape == (3, 4, 4, 8)


def test_attention_weights_sum_to_one_over_time(rng):
    block = SaltBlock(8, 2, 2, 2, rng)
    block(Tensor(rng.normal(size=(3, 2, 2, 8))))
    np.testing.assert_allclose(block.last_attention.sum(axis=-1), 1.0, atol=1e-5)


def test_single_frame_with_zero_attention_projection_is_ffn_path(f64, rng):
    block = SaltBlock(8, 2, 2, 2, rng, zero_init_attention=True)
    x = Tensor(rng.normal(size=(1, 3, 3, 8)))
    np.testing.assert_allclose(block(x).values, (x + block.feed_forward(x)).values, atol=1e-12)


def test_attention_mask_row_without_keys_is_rejected():
    with pytest.raises(ConfigurationError):
        AttentionMask(np.array([[True, False], [False, False]]))


def test_occupancy_rows_are_blind_to_images():
    m = AttentionMask.occupancy_blind_to_images(2, 2).matrix
    assert not m[:2, 2:].any() and m[2:, :2].all()
    one_way = AttentionMask.occupancy_blind_to_images(2, 2, image_attends_occupancy=False).matrix
    assert not one_way[2:, :2].any()


def test_queries_see_context_and_themselves_only():
    m = AttentionMask.queries_over_context(2, 3).matrix
    assert m[:, :2].all()
    assert not m[:2, 2:].any()
    np.testing.assert_array_equal(m[2:, 2:], np.eye(3, dtype=bool))


def test_frame_local_feed_forward_does_not_mix_frames(f64, rng):
    block = SaltBlock(8, 2, 2, 2, rng)
    x = rng.normal(size=(3, 2, 2, 8))
    whole = block.feed_forward(Tensor(x), frame_local=True).values
    single = block.feed_forward(Tensor(x[1:2]), frame_local=True).values
    np.testing.assert_allclose(whole[1:2], single, atol=1e-12)
    mixed = block.feed_forward(Tensor(x)).values
    assert not np.allclose(mixed[1:2], single)


def test_temporal_rows_are_sliced_from_one_table(rng):
    temb = TemporalEmbedding(5, 4, rng)
    np.testing.assert_array_equal(temb.rows(2, 4).values, temb.table.values[2:4])
    with pytest.raises(ConfigurationError):
        temb.rows(3, 6)


# -- forecasting -----------------------------------------------------------


def test_forecast_shapes(micro_config, rng):
    model = build_model(micro_config)
    out = model.forecast(_history(micro_config, rng))
    n_f, (h, w, d) = micro_config.future, micro_config.grid_dims
    assert out.logits.shape == (n_f, h, w, d, len(DEFAULT_CLASSES))
    assert out.waypoints.shape == (n_f, 2)
    assert len(out.trajectory) == n_f
    assert out.flow.frame == CURRENT and out.flow.flow.shape == (n_f, h, w, 2)
    assert out.flow_future.frame == FUTURE
    assert out.images.shape == (n_f, h, w, 3)
    assert ((out.images.values >= 0) & (out.images.values <= 1)).all()
    grids = out.grids()
    assert len(grids) == n_f and all(g.dims == (h, w, d) for g in grids)


def test_untrained_model_predicts_no_motion(micro_config, rng):
    model = build_model(micro_config)
    inputs = _history(micro_config, rng)
    out = model.forecast(inputs)
    np.testing.assert_array_equal(out.flow.values(), 0.0)
    np.testing.assert_array_equal(out.waypoints.values, 0.0)
    assert all(p == inputs.poses[-1] for p in out.trajectory)


def test_encoder_runs_once_per_forecast(micro_config, rng):
    model = build_model(micro_config)
    model.forecast(_history(micro_config, rng))
    assert model._encoder_passes == 1


def test_wrong_history_length_is_configuration_error(micro_config, rng):
    model = build_model(micro_config)
    inputs = _history(micro_config, rng)
    inputs.grids = inputs.grids[:1]
    with pytest.raises(ConfigurationError, match="history"):
        model.forecast(inputs)


def test_occupancy_is_independent_of_image_content(micro_config, rng):
    model = build_model(micro_config)
    inputs = _history(micro_config, rng)
    first = model.forecast(inputs)
    inputs.images = rng.random(inputs.images.shape)
    second = model.forecast(inputs)
    np.testing.assert_array_equal(first.logits.values, second.logits.values)
    np.testing.assert_array_equal(first.waypoints.values, second.waypoints.values)
    assert not np.array_equal(first.images.values, second.images.values)


def test_unmasked_attention_lets_images_reach_occupancy(micro_config, rng):
    model = build_model(_config(micro_config, masked_attention=False))
    inputs = _history(micro_config, rng)
    first = model.forecast(inputs)
    inputs.images = rng.random(inputs.images.shape)
    second = model.forecast(inputs)
    assert not np.allclose(first.logits.values, second.logits.values)


def test_occupancy_only_path_matches_image_path(micro_config, rng):
    model = build_model(micro_config)
    inputs = _history(micro_config, rng)
    with_images = model.forecast(inputs)
    without = model.forecast(inputs, use_images=False)
    assert without.images is None
    np.testing.assert_array_equal(with_images.logits.values, without.logits.values)


def test_model_without_image_branch(micro_config, rng):
    model = build_model(_config(micro_config, use_images=False))
    inputs = _history(micro_config, rng)
    assert model.forecast(inputs).images is None
    with pytest.raises(ConfigurationError):
        model.forecast(inputs, use_images=True)
    with pytest.raises(ConfigurationError):
        model.decode_image(None, None)


@pytest.mark.parametrize("mode", ["plain", "none"])
def test_alternative_flow_modes_forecast(micro_config, rng, mode):
    model = build_model(_config(micro_config, flow_mode=mode))
    out = model.forecast(_history(micro_config, rng))
    assert out.logits.shape[0] == micro_config.future
    assert (out.flow is None) == (mode == "none")


def test_longer_horizon_keeps_the_prefix(f64, micro_config, rng):
    short_cfg = micro_config
    long_cfg = _config(short_cfg, future=3)
    long_model = build_model(long_cfg)
    short_model = build_model(short_cfg)
    state = long_model.state_dict()
    state["temporal.table"] = state["temporal.table"][: short_cfg.history + short_cfg.future]
    short_model.load_state_dict(state)
    # non-zero flow so warping samples between cells
    for model in (long_model, short_model):
        model.flow_decoder.head.weight.values = np.full(model.flow_decoder.head.weight.shape, 0.01)
    inputs = _history(short_cfg, rng)
    long_out = long_model.forecast(inputs)
    short_out = short_model.forecast(inputs)
    np.testing.assert_allclose(long_out.logits.values[:2], short_out.logits.values, atol=1e-10)
    np.testing.assert_allclose(long_out.waypoints.values[:2], short_out.waypoints.values, atol=1e-10)
    np.testing.assert_allclose(long_out.images.values[:2], short_out.images.values, atol=1e-10)


def test_training_loss_gradients_match_finite_differences(f64, micro_run_config, rng):
    scene = generate(micro_run_config.scene)
    window = build_windows([scene], micro_run_config.model.history, micro_run_config.model.future)[0]
    model = build_model(micro_run_config.model)
    # zero-initialized layers would leave their inputs without gradient and sample the warp on cell centers
    for _, param in model.named_parameters():
        if not param.values.any():
            param.values = rng.normal(scale=0.05, size=param.shape).astype(param.values.dtype)

    def loss():
        breakdown, _ = window_losses(model, window, micro_run_config)
        return breakdown.objective

    breakdown, _ = window_losses(model, window, micro_run_config)
    assert breakdown.img_l2 > 0.0 and breakdown.occ_lovasz > 0.0
    # the Lovasz sort and the reprojection masks make the loss only piecewise smooth
    for name, param in model.named_parameters():
        error = check_parameters(loss, [param], eps=1e-6, max_coords=2, rng=rng)
        assert error < 1e-3, name
