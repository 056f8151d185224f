from sqlalchemy import select
from sqlalchemy.orm import Session
from sqlalchemy.sql import func
from typing import Optional, List
import uuid

import pandas as pd

from exceptions import StateError
from .models import Run, RunMetric


# Run CRUD
def create_run(db: Session, command: str, config: Optional[str] = None, seed: Optional[int] = None) -> Run:
    db_run = Run(
        run_id=str(uuid.uuid4()),
        command=command,
        config=config,
        seed=seed,
        status="pending",
    )
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def get_run(db: Session, run_id: str) -> Optional[Run]:
    result = db.execute(select(Run).where(Run.run_id == run_id))
    return result.scalar_one_or_none()


def _require(db: Session, run_id: str) -> Run:
    db_run = get_run(db, run_id)
    if db_run is None:
        raise StateError(f"unknown run {run_id}")
    return db_run


def mark_running(db: Session, run_id: str) -> Run:
    db_run = _require(db, run_id)
    if db_run.status != "pending":
        raise StateError(f"run {run_id} is {db_run.status}, expected pending")
    db_run.status = "running"
    db.commit()
    db.refresh(db_run)
    return db_run


def complete_run(db: Session, run_id: str, artifact_path: Optional[str] = None) -> Run:
    db_run = _require(db, run_id)
    db_run.status = "completed"
    db_run.artifact_path = artifact_path
    db_run.completed_at = func.now()
    db.commit()
    db.refresh(db_run)
    return db_run


def fail_run(db: Session, run_id: str, error_message: str) -> Run:
    db_run = _require(db, run_id)
    db_run.status = "failed"
    db_run.error_message = error_message
    db_run.completed_at = func.now()
    db.commit()
    db.refresh(db_run)
    return db_run


# RunMetric CRUD
def add_metrics(db: Session, run_id: str, report: pd.DataFrame) -> List[RunMetric]:
    """Store every numeric cell of a metric report, keyed by its ``horizon_s`` row label."""
    db_run = _require(db, run_id)
    rows = []
    for record in report.to_dict(orient="records"):
        horizon = str(record.pop("horizon_s"))
        for name, value in record.items():
            rows.append(RunMetric(run_id=db_run.id, horizon=horizon, name=name, value=None if pd.isna(value) else float(value)))
    db.add_all(rows)
    db.commit()
    return rows


def get_run_metrics(db: Session, run_id: str) -> List[RunMetric]:
    db_run = _require(db, run_id)
    result = db.execute(select(RunMetric).where(RunMetric.run_id == db_run.id).order_by(RunMetric.id))
    return result.scalars().all()


def list_runs(db: Session, command: Optional[str] = None, skip: int = 0, limit: int = 50) -> List[Run]:
    query = select(Run)
    if command is not None:
        query = query.where(Run.command == command)
    result = db.execute(query.order_by(Run.started_at.desc(), Run.id.desc()).offset(skip).limit(limit))
    return result.scalars().all()
