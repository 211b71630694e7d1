"""
Database configuration and session management for the run ledger
Supports both SQLite and PostgreSQL
"""

import logging
from datetime import datetime
from typing import List, Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker
from sqlalchemy.pool import StaticPool

from config import settings
from models import Base, EpochRecord, TrainingRun

logger = logging.getLogger(__name__)

DATABASE_URL = settings.database_url

if DATABASE_URL.startswith("sqlite"):
    # one shared connection so in-memory databases survive across sessions
    engine = create_engine(
        DATABASE_URL,
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
        echo=False
    )
else:
    engine = create_engine(
        DATABASE_URL,
        pool_pre_ping=True,
        pool_recycle=300,
        echo=False
    )

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db():
    """Create all ledger tables"""
    Base.metadata.create_all(bind=engine)
    logger.debug("run ledger ready at %s", DATABASE_URL)


def create_run(db: Session, dataset: str, seed: int, config_text: str, out_dir: Optional[str] = None,
               variant: Optional[str] = None) -> TrainingRun:
    run = TrainingRun(dataset=dataset, seed=seed, config_text=config_text, out_dir=out_dir, variant=variant)
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def get_run_by_id(db: Session, run_id: str) -> Optional[TrainingRun]:
    return db.query(TrainingRun).filter(TrainingRun.run_id == run_id).first()


def list_runs(db: Session, variant: Optional[str] = None) -> List[TrainingRun]:
    query = db.query(TrainingRun)
    if variant is not None:
        query = query.filter(TrainingRun.variant == variant)
    return query.order_by(TrainingRun.id).all()


def update_run_status(db: Session, run_id: str, status: str, error_message: str = None,
                      final_metrics=None) -> Optional[TrainingRun]:
    """Move a run through pending -> running -> completed / diverged / failed"""
    run = get_run_by_id(db, run_id)
    if run is None:
        return None
    run.status = status
    if error_message:
        run.error_message = error_message
    if final_metrics is not None:
        run.final_loss = final_metrics.loss
        run.final_train_acc = final_metrics.train_acc
        run.final_test_acc = final_metrics.test_acc
    if status == "running" and not run.started_at:
        run.started_at = datetime.utcnow()
    elif status in ("completed", "diverged", "failed") and not run.completed_at:
        run.completed_at = datetime.utcnow()
    db.commit()
    return run


def record_epoch(db: Session, run_id: str, metrics) -> EpochRecord:
    record = EpochRecord(run_id=run_id, epoch=metrics.epoch, loss=metrics.loss, train_acc=metrics.train_acc,
                         test_acc=metrics.test_acc, seconds=metrics.seconds)
    db.add(record)
    db.commit()
    return record
