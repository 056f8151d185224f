import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from schemas.config import WorldModelConfig, build_config  # noqa: E402
from tensor.core import precision  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow learning-trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision("f64"):
        yield


MICRO_MODEL = {
    "history": 2,
    "future": 2,
    "grid_dims": (8, 8, 2),
    "patch_size": 2,
    "embed_dim": 2,
    "model_dim": 8,
    "heads": 2,
    "encoder_layers": 1,
    "decoder_layers": 1,
    "norm_groups": 2,
    "ffn_expansion": 2,
    "lift_dim": 2,
    "refine_hidden": 8,
    "num_ray_samples": 8,
    "density_hidden": 4,
}


@pytest.fixture
def micro_config():
    """Gradient-check sized model: 8x8x2 grid, C=8."""
    return WorldModelConfig(**MICRO_MODEL)


def tiny_run_config(**model_overrides):
    """A complete run small enough to train for a few steps in a test."""
    model = {**MICRO_MODEL, "grid_dims": (8, 8, 4), **model_overrides}
    return build_config(
        {
            "model": model,
            "scene": {
                "dims": (8, 8, 4),
                "voxel_size": (0.5, 0.5, 0.5),
                "origin": (-2.0, -2.0, 0.0),
                "sequence_length": 5,
                "fps": 2.0,
                "ego_speed": 1.0,
                "road_half_width": 1.0,
                "num_buildings": 2,
                "num_objects": 1,
                "image_size": (12, 16),
                "focal": 8.0,
                "camera_height": 1.0,
                "camera_pitch": 0.2,
            },
            "train": {"steps": 2, "batch_size": 1, "log_every": 1},
            "eval": {"chamfer_azimuths": 8, "chamfer_elevations": (-0.3, 0.0)},
            "num_scenes": 2,
        }
    )


@pytest.fixture
def tiny_config():
    return tiny_run_config()


@pytest.fixture
def tiny_scene(tiny_config):
    from scenes.generator import generate

    return generate(tiny_config.scene)


@pytest.fixture
def micro_run_config():
    """The micro model with a matching 8x8x2 scene: one building and a car keeping pace with the ego."""
    return build_config(
        {
            "model": MICRO_MODEL,
            "scene": {
                "dims": (8, 8, 2),
                "voxel_size": (0.5, 0.5, 0.5),
                "origin": (-2.0, -2.0, 0.0),
                "sequence_length": 4,
                "fps": 2.0,
                "ego_speed": 1.0,
                "road_half_width": 1.0,
                "num_buildings": 1,
                "objects": [{"center": (-1.0, 0.0), "extent": (1.0, 1.0, 0.5), "velocity": (1.0, 0.0)}],
                "image_size": (6, 8),
                "focal": 4.0,
                "camera_height": 0.75,
                "camera_pitch": 0.2,
            },
        }
    )


@pytest.fixture
def registry_url(tmp_path):
    return f"sqlite:///{(tmp_path / 'runs.db').as_posix()}"
