"""
Database models for the training run ledger
One row per training run, one row per completed epoch
"""

import uuid

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship
from sqlalchemy.sql import func

Base = declarative_base()


class TrainingRun(Base):
    """A train invocation: its resolved config, where it wrote, and how it ended"""
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String(36), unique=True, index=True, default=lambda: str(uuid.uuid4()))
    variant = Column(String(255), nullable=True)  # ablation label, None for plain runs
    dataset = Column(String(255), nullable=False)
    seed = Column(Integer, nullable=False)
    config_text = Column(Text, nullable=False)
    out_dir = Column(String(500), nullable=True)

    status = Column(String(50), default="pending")  # pending, running, completed, diverged, failed
    final_loss = Column(Float, nullable=True)
    final_train_acc = Column(Float, nullable=True)
    final_test_acc = Column(Float, nullable=True)
    error_message = Column(Text, nullable=True)

    created_at = Column(DateTime(timezone=True), server_default=func.now())
    started_at = Column(DateTime(timezone=True), nullable=True)
    completed_at = Column(DateTime(timezone=True), nullable=True)

    epochs = relationship("EpochRecord", back_populates="run", order_by="EpochRecord.epoch",
                          cascade="all, delete-orphan")


class EpochRecord(Base):
    """Metrics of one epoch of a run"""
    __tablename__ = "epoch_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String(36), ForeignKey("training_runs.run_id"), index=True, nullable=False)
    epoch = Column(Integer, nullable=False)
    loss = Column(Float, nullable=False)
    train_acc = Column(Float, nullable=False)
    test_acc = Column(Float, nullable=True)
    seconds = Column(Float, nullable=False)

    run = relationship("TrainingRun", back_populates="epochs")
