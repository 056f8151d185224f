import pandas as pd
import pytest

from database import crud
from database.connection import create_tables, get_sync_db
from exceptions import StateError


@pytest.fixture
def db(registry_url):
    create_tables(registry_url)
    with get_sync_db(registry_url) as session:
        yield session


def test_run_lifecycle(db):
    run = crud.create_run(db, "train", config="seed=3", seed=3)
    assert run.status == "pending" and len(run.run_id) == 36
    crud.mark_running(db, run.run_id)
    done = crud.complete_run(db, run.run_id, artifact_path="runs/x/model.ow4d")
    assert done.status == "completed"
    assert done.artifact_path == "runs/x/model.ow4d"
    assert done.completed_at is not None


def test_failed_run_keeps_error_line(db):
    run = crud.create_run(db, "eval")
    crud.mark_running(db, run.run_id)
    failed = crud.fail_run(db, run.run_id, "error[data]: missing frame_3.ogrd")
    assert crud.get_run(db, run.run_id).error_message == failed.error_message


def test_run_can_only_start_once(db):
    run = crud.create_run(db, "gen")
    crud.mark_running(db, run.run_id)
    with pytest.raises(StateError, match="expected pending"):
        crud.mark_running(db, run.run_id)


def test_unknown_run_is_state_error(db):
    assert crud.get_run(db, "missing") is None
    with pytest.raises(StateError, match="unknown run"):
        crud.complete_run(db, "missing")


def test_metrics_are_stored_per_horizon(db):
    run = crud.create_run(db, "eval")
    report = pd.DataFrame({"horizon_s": ["0.5", "avg"], "mIoU": [40.0, 40.0], "L2_m": [0.5, float("nan")]})
    crud.add_metrics(db, run.run_id, report)
    stored = crud.get_run_metrics(db, run.run_id)
    assert [(m.horizon, m.name) for m in stored] == [("0.5", "mIoU"), ("0.5", "L2_m"), ("avg", "mIoU"), ("avg", "L2_m")]
    assert stored[-1].value is None


def test_list_runs_filters_by_command(db):
    for command in ("gen", "train", "train"):
        crud.create_run(db, command)
    assert len(crud.list_runs(db)) == 3
    assert {r.command for r in crud.list_runs(db, command="train")} == {"train"}
    assert len(crud.list_runs(db, limit=1)) == 1
