from sqlalchemy import (
    Column,
    Integer,
    String,
    Text,
    DateTime,
    Float,
    ForeignKey,
)
from sqlalchemy.orm import declarative_base, relationship
from sqlalchemy.sql import func

Base = declarative_base()

RUN_STATUSES = ("pending", "running", "completed", "failed")


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String(50), unique=True, index=True, nullable=False)  # UUID
    command = Column(String(30), nullable=False)  # gen, train, forecast, eval, ...
    status = Column(String(20), default="pending")
    config = Column(Text, nullable=True)  # flat key=value dump
    seed = Column(Integer, nullable=True)
    artifact_path = Column(String(500), nullable=True)
    error_message = Column(Text, nullable=True)
    started_at = Column(DateTime(timezone=True), server_default=func.now())
    completed_at = Column(DateTime(timezone=True), nullable=True)
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())

    # Relationships
    metrics = relationship("RunMetric", back_populates="run", cascade="all, delete-orphan")


class RunMetric(Base):
    __tablename__ = "run_metrics"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    horizon = Column(String(20), nullable=False)  # seconds, or 'avg'
    name = Column(String(50), nullable=False)
    value = Column(Float, nullable=True)

    # Relationships
    run = relationship("Run", back_populates="metrics")
