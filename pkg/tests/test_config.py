import pytest

from exceptions import ConfigurationError
from schemas.config import (
    RunConfig,
    WorldModelConfig,
    build_config,
    dump_flat,
    load_config,
    parse_flat,
    save_config,
    valid_keys,
)


def test_flat_file_round_trip(tmp_path, tiny_config):
    path = save_config(tiny_config, tmp_path / "config.txt")
    assert load_config(path) == tiny_config


def test_parse_flat_nests_dotted_keys():
    parsed = parse_flat("model.history = 3  # short\n\nscene.dims=[8,8,4]\nmodel.flow_mode=plain\neval.chamfer_elevations=-0.3,0.0\n")
    assert parsed == {
        "model": {"history": 3, "flow_mode": "plain"},
        "scene": {"dims": [8, 8, 4]},
        "eval": {"chamfer_elevations": [-0.3, 0.0]},
    }


def test_unknown_key_lists_the_valid_ones():
    with pytest.raises(ConfigurationError, match="unknown config key 'model.depth'") as info:
        parse_flat("model.depth=3")
    assert "model.history" in str(info.value)


def test_line_without_equals_is_rejected():
    with pytest.raises(ConfigurationError, match="line 2 is not key=value"):
        parse_flat("seed=1\nhistory 4\n")


def test_nested_loss_weights_are_leaf_keys():
    keys = valid_keys()
    assert "model.loss_weights.rpc" in keys
    assert "model.loss_weights" not in keys
    assert "model.loss_weights.rpc=0.1" in dump_flat(RunConfig())


def test_missing_file_is_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.txt")


def test_defaults_are_consistent():
    config = load_config()
    assert config.model.grid_dims == config.scene.dims
    assert config.model.horizons_s() == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"model": {"grid_dims": (16, 16, 8)}}, "grid_dims"),
        ({"scene": {"sequence_length": 5}}, "sequence_length"),
        ({"scene": {"fps": 4.0}}, "fps"),
        ({"model": {"flow_mode": "sideways"}}, "flow_mode"),
        ({"model": {"classes": ["free:static", "car:dynamic"]}}, "class table"),
        ({"train": {"steps": -1}}, "steps"),
    ],
)
def test_inconsistent_configs_are_rejected(overrides, message):
    with pytest.raises(ConfigurationError, match=message):
        build_config(overrides)


def test_model_shape_checks():
    with pytest.raises(ValueError, match="patch size"):
        WorldModelConfig(grid_dims=(10, 10, 4), patch_size=4)
    with pytest.raises(ValueError, match="heads"):
        WorldModelConfig(model_dim=30, heads=4, norm_groups=2)
    with pytest.raises(ValueError, match="class entry"):
        WorldModelConfig(classes=["free", "car:dynamic"])
