import pytest
from typer.testing import CliRunner

from database import crud
from database.connection import get_sync_db
from main import app
from objectives.report import read_report
from schemas.config import save_config

runner = CliRunner()


@pytest.fixture
def env(tmp_path, monkeypatch, registry_url):
    monkeypatch.setenv("OW4D_DATABASE_URL", registry_url)
    monkeypatch.setenv("OW4D_DATA_DIR", str(tmp_path / "data"))
    return tmp_path


@pytest.fixture
def config_file(env, tiny_config):
    return save_config(tiny_config, env / "config.txt")


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def test_full_pipeline_from_the_command_line(env, config_file, registry_url):
    scenes, run, pred = env / "scenes", env / "run", env / "pred"

    result = _invoke("--config", config_file, "gen", "--out", scenes)
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in scenes.glob("scene_*")) == ["scene_0", "scene_1"]

    result = _invoke("--config", config_file, "train", "--data", scenes, "--out", run)
    assert result.exit_code == 0, result.output
    assert (run / "model.ow4d").is_file() and (run / "loss_curve.csv").is_file()

    # no --config: the config saved next to the checkpoint is used
    result = _invoke("forecast", "--checkpoint", run / "model.ow4d", "--scenes", scenes, "--out", pred)
    assert result.exit_code == 0, result.output
    assert (pred / "scene_1" / "window_1" / "frame_1.ogrd").is_file()

    result = _invoke("--config", config_file, "eval", "--pred", pred, "--gt", scenes)
    assert result.exit_code == 0, result.output
    frame = read_report(pred / "metrics.csv")
    assert list(frame["horizon_s"]) == ["0.5", "1", "avg"]

    with get_sync_db(registry_url) as db:
        runs = crud.list_runs(db)
    assert sorted(r.command for r in runs) == ["eval", "forecast", "gen", "train"]
    assert {r.status for r in runs} == {"completed"}


def test_default_paths_live_under_the_data_root(env, config_file):
    result = _invoke("--config", config_file, "gen")
    assert result.exit_code == 0, result.output
    assert (env / "data" / "scenes" / "scene_0" / "poses.csv").is_file()


def test_seed_option_overrides_scene_seeds(env, config_file):
    result = _invoke("--config", config_file, "--seed", 7, "gen", "--out", env / "scenes")
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in (env / "scenes").glob("scene_*")) == ["scene_7", "scene_8"]


def test_contract_violation_prints_one_error_line(env, config_file):
    result = _invoke("--config", config_file, "eval", "--pred", env / "missing", "--gt", env / "scenes")
    assert result.exit_code == 2
    lines = [line for line in result.output.splitlines() if line.startswith("error ")]
    assert len(lines) == 1
    assert lines[0].startswith("error code=missing_artifact type=MissingArtifactError detail=expected file not found")


def test_unknown_config_key_exits_with_configuration_error(env):
    bad = env / "bad.txt"
    bad.write_text("model.depth=3\n")
    result = _invoke("--config", bad, "gen", "--out", env / "scenes")
    assert result.exit_code == 2
    assert "error code=configuration" in result.output
    assert "model.history" in result.output


def test_bench_prints_throughput(env, config_file):
    result = _invoke("--config", config_file, "--no-images", "bench", "--iterations", 1)
    assert result.exit_code == 0, result.output
    assert "forecasts_per_second=" in result.output
