import numpy as np
import pandas as pd
import pytest

from database import crud
from database.connection import get_sync_db
from exceptions import DataError, MissingArtifactError
from model.world_model import build_model
from objectives.report import read_report
from occupancy.grid import grid_write
from pipeline import commands
from pipeline.trainer import LOSS_COLUMNS, build_windows
from scenes.dataset import load_scenes, write_poses
from schemas.config import build_config
from tensor.checkpoint import load_checkpoint


def _with_steps(config, steps):
    return config.model_copy(update={"train": config.train.model_copy(update={"steps": steps})})


@pytest.fixture
def dataset(tmp_path, tiny_config, registry_url):
    root = tmp_path / "scenes"
    commands.cmd_gen(tiny_config, root, registry_url=registry_url)
    return root


@pytest.fixture
def trained(tmp_path, tiny_config, dataset, registry_url):
    return commands.cmd_train(tiny_config, dataset, tmp_path / "run", registry_url=registry_url)


def _runs(registry_url, command=None):
    with get_sync_db(registry_url) as db:
        return crud.list_runs(db, command=command)


# -- windows ---------------------------------------------------------------


def test_windows_slide_over_each_scene(tiny_scene):
    assert [w.start for w in build_windows([tiny_scene], 2, 2)] == [0, 1]
    assert [w.start for w in build_windows([tiny_scene, tiny_scene], 2, 2, stride=2)] == [0, 0]
    with pytest.raises(DataError, match="long enough"):
        build_windows([tiny_scene], 4, 2)


def test_ground_truth_waypoints_are_relative_to_current_frame(tiny_scene):
    window = build_windows([tiny_scene], 2, 2)[0]
    assert window.current == 1
    np.testing.assert_allclose(window.gt_waypoints(), [[0.5, 0.0], [1.0, 0.0]], atol=1e-12)


def test_split_holds_out_last_fifth():
    train, held = commands.split_scenes(list(range(10)))
    assert train == list(range(8)) and held == [8, 9]
    assert commands.split_scenes([0]) == ([0], [0])


# -- train -----------------------------------------------------------------


def test_zero_steps_saves_the_initial_model(tmp_path, tiny_config, dataset, registry_url):
    config = _with_steps(tiny_config, 0)
    result = commands.cmd_train(config, dataset, tmp_path / "run", registry_url=registry_url)
    saved = load_checkpoint(result.checkpoint)
    initial = build_model(config.model).state_dict()
    assert saved.keys() == initial.keys()
    for name, values in initial.items():
        np.testing.assert_array_equal(saved[name], values)
    assert result.loss_curve.read_text().strip() == ",".join(LOSS_COLUMNS)


def test_training_writes_loss_curve_and_config(trained, tiny_config):
    assert [r["step"] for r in trained.history] == [0, 1]
    assert all(np.isfinite(r["total"]) for r in trained.history)
    lines = trained.loss_curve.read_text().strip().splitlines()
    assert lines[0] == ",".join(LOSS_COLUMNS) and len(lines) == 3
    saved = commands.config_for_checkpoint(trained.checkpoint, None)
    assert saved == tiny_config


# -- forecast, render-depth, eval ------------------------------------------


def test_forecast_layout(tmp_path, trained, dataset, registry_url):
    written = commands.cmd_forecast(None, trained.checkpoint, dataset, tmp_path / "pred", registry_url=registry_url)
    assert sorted(p.relative_to(tmp_path / "pred").as_posix() for p in written) == [
        "scene_0/window_0",
        "scene_0/window_1",
        "scene_1/window_0",
        "scene_1/window_1",
    ]
    names = sorted(p.name for p in written[0].iterdir())
    assert names == ["flow.oflw", "frame_0.ogrd", "frame_0.ppm", "frame_1.ogrd", "frame_1.ppm", "trajectory.csv"]


def test_forecast_without_images_skips_image_files(tmp_path, trained, dataset, registry_url):
    written = commands.cmd_forecast(
        None, trained.checkpoint, dataset / "scene_0", tmp_path / "pred", use_images=False, registry_url=registry_url
    )
    assert len(written) == 2
    assert not any(p.suffix == ".ppm" for p in written[0].iterdir())


def test_render_depth_writes_one_map_per_forecast_frame(tmp_path, trained, dataset, registry_url):
    written = commands.cmd_render_depth(None, trained.checkpoint, dataset, tmp_path / "depth", registry_url=registry_url)
    assert len(written) == 2 * 2 * 2
    assert all(p.suffix == ".pgm" and p.with_name(p.name + ".txt").is_file() for p in written)


def test_ground_truth_forecasts_score_perfectly(tmp_path, tiny_config, dataset, registry_url):
    pred = tmp_path / "pred"
    for scene_dir, scene in zip(sorted(dataset.glob("scene_*")), load_scenes(dataset)):
        for window in build_windows([scene], 2, 2):
            target = pred / scene_dir.name / f"window_{window.start}"
            target.mkdir(parents=True)
            for k, grid in enumerate(window.future_grids()):
                grid_write(grid, target / f"frame_{k}.ogrd")
            write_poses(window.future_poses(), target / commands.TRAJECTORY_NAME)
    report = commands.cmd_eval(tiny_config, pred, dataset, tmp_path / "metrics.csv", registry_url=registry_url)
    assert report.values["mIoU"] == [100.0, 100.0]
    assert report.values["IoU"] == [100.0, 100.0]
    assert report.average("L2_m") == pytest.approx(0.0, abs=1e-9)
    assert report.average("chamfer_m2") == pytest.approx(0.0)
    frame = read_report(tmp_path / "metrics.csv")
    assert list(frame["horizon_s"]) == ["0.5", "1", "avg"]


def test_eval_without_forecasts_is_data_error(tmp_path, tiny_config, dataset, registry_url):
    (tmp_path / "pred").mkdir()
    with pytest.raises(DataError, match="no scene_<seed>"):
        commands.cmd_eval(tiny_config, tmp_path / "pred", dataset, tmp_path / "m.csv", registry_url=registry_url)


def test_bench_reports_throughput(tiny_config, registry_url):
    result = commands.cmd_bench(tiny_config, iterations=2, warmup=0, registry_url=registry_url)
    assert result.iterations == 2 and result.forecasts_per_second > 0.0


def test_ablation_trains_every_variant(tmp_path, tiny_config, dataset, registry_url):
    table = commands.cmd_ablate(tiny_config, dataset, tmp_path / "ablation", registry_url=registry_url)
    assert list(table["variant"]) == list(commands.ABLATION_VARIANTS)
    assert table["mIoU"].between(0.0, 100.0).all()
    assert np.isfinite(table["depth_mae_m"]).all()
    rows = table.set_index("variant")
    assert rows.loc["decoupled_rpc_images_unmasked_multimodal", "images_at_inference"]
    assert not rows.loc["decoupled_rpc_images_unmasked", "images_at_inference"]
    assert (tmp_path / "ablation" / commands.ABLATION_NAME).is_file()
    for name, variant in commands.ABLATION_VARIANTS.items():
        assert (tmp_path / "ablation" / name / commands.CHECKPOINT_NAME).is_file() == (variant.reuse is None)


def _trend_table(**changes):
    rows = {
        "baseline": {"mIoU": 30.0, "dyn_mIoU": 10.0, "baseline_dyn_mIoU": 5.0, "depth_mae_m": 2.0},
        "decoupled_flow": {"mIoU": 34.0, "dyn_mIoU": 14.0, "baseline_dyn_mIoU": 5.0, "depth_mae_m": 2.0},
        "decoupled_rpc": {"mIoU": 33.8, "dyn_mIoU": 14.0, "baseline_dyn_mIoU": 5.0, "depth_mae_m": 1.5},
        "decoupled_rpc_images": {"mIoU": 35.0, "dyn_mIoU": 16.0, "baseline_dyn_mIoU": 5.0, "depth_mae_m": 1.4},
    }
    for key, value in changes.items():
        variant, column = key.split("__")
        rows[variant][column] = value
    return pd.DataFrame([{"variant": name, **values} for name, values in rows.items()])


def test_learning_trend_holds_on_a_good_table():
    assert commands.learning_trend_failures(_trend_table()) == []


@pytest.mark.parametrize(
    "changes, message",
    [
        ({"decoupled_rpc_images__dyn_mIoU": 9.0}, "copy-last"),
        ({"decoupled_flow__mIoU": 29.0, "decoupled_rpc__mIoU": 29.0}, "direct regression"),
        ({"decoupled_rpc__mIoU": 33.0}, "rpc costs"),
        ({"decoupled_rpc__depth_mae_m": 1.7}, "depth MAE"),
        ({"decoupled_rpc__depth_mae_m": float("nan")}, "depth MAE"),
    ],
)
def test_learning_trend_reports_each_missed_margin(changes, message):
    failures = commands.learning_trend_failures(_trend_table(**changes))
    assert len(failures) == 1 and message in failures[0]


# -- registry --------------------------------------------------------------


def test_registry_records_completed_and_failed_runs(tmp_path, tiny_config, dataset, registry_url):
    with pytest.raises(MissingArtifactError):
        commands.cmd_forecast(tiny_config, tmp_path / "missing.ow4d", dataset, tmp_path / "pred", registry_url=registry_url)
    (gen,) = _runs(registry_url, "gen")
    assert gen.status == "completed" and gen.artifact_path == str(dataset)
    (failed,) = _runs(registry_url, "forecast")
    assert failed.status == "failed"
    assert failed.error_message.startswith("error code=missing_artifact type=MissingArtifactError")


def test_eval_metrics_land_in_registry(tmp_path, tiny_config, trained, dataset, registry_url):
    pred = tmp_path / "pred"
    commands.cmd_forecast(None, trained.checkpoint, dataset, pred, registry_url=registry_url)
    commands.cmd_eval(tiny_config, pred, dataset, tmp_path / "metrics.csv", registry_url=registry_url)
    (run,) = _runs(registry_url, "eval")
    with get_sync_db(registry_url) as db:
        metrics = crud.get_run_metrics(db, run.run_id)
    assert {m.horizon for m in metrics} == {"0.5", "1", "avg"}
    assert any(m.name == "baseline_dyn_mIoU" for m in metrics)


# -- determinism -----------------------------------------------------------


def test_identical_runs_produce_identical_artifacts(tmp_path, tiny_config, registry_url):
    outputs = []
    for name in ("a", "b"):
        root = tmp_path / name
        commands.cmd_gen(tiny_config, root / "scenes", registry_url=registry_url)
        trained = commands.cmd_train(tiny_config, root / "scenes", root / "run", registry_url=registry_url)
        commands.cmd_forecast(None, trained.checkpoint, root / "scenes", root / "pred", registry_url=registry_url)
        commands.cmd_eval(tiny_config, root / "pred", root / "scenes", root / "metrics.csv", registry_url=registry_url)
        outputs.append([(root / rel).read_bytes() for rel in ("run/model.ow4d", "run/loss_curve.csv", "metrics.csv")])
    assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_training_lowers_the_loss(tmp_path, tiny_config, registry_url):
    config = _with_steps(tiny_config, 60)
    config = config.model_copy(update={"num_scenes": 6})
    root = tmp_path / "scenes"
    commands.cmd_gen(config, root, registry_url=registry_url)
    result = commands.cmd_train(config, root, tmp_path / "run", registry_url=registry_url)
    totals = [r["total"] for r in result.history]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


@pytest.mark.slow
def test_default_ablation_meets_the_learning_trend(tmp_path, registry_url):
    config = build_config({"train": {"max_minutes": 10.0}})
    commands.cmd_gen(config, tmp_path / "scenes", threads=4, registry_url=registry_url)
    table = commands.cmd_ablate(config, tmp_path / "scenes", tmp_path / "ablation", registry_url=registry_url)
    assert commands.learning_trend_failures(table) == []
