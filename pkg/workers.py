"""
Celery workers for training runs
Every run (CLI or sweep) goes through execute_run, which keeps the run ledger
current; ablation sweeps fan variants x seeds out as train_variant tasks
"""

from typing import Dict, List, Mapping, Optional, Sequence

import pandas as pd
from celery.utils.log import get_task_logger

from backbone import EventTransformer
from celery_app import celery_app
from config import RunConfig, run_config_from_text
from database import SessionLocal, create_run, init_db, record_epoch, update_run_status
from errors import TrainingDiverged
from training import TrainResult, resolve_dataset, train

logger = get_task_logger(__name__)

# flag name -> (config section, key) for each ablation axis
ABLATION_AXES = {
    "structure": ("model", "stage_structure"),
    "fusion": ("model", "fusion"),
    "M": ("attention", "M"),
    "window": ("attention", "window"),
    "rate": ("attention", "r"),
}


def execute_run(run: RunConfig, out_dir: Optional[str] = None, variant: Optional[str] = None,
                track: bool = True, on_epoch=None) -> TrainResult:
    """Resolve the dataset, build the model, train, and record the run in the ledger"""
    train_set, test_set = resolve_dataset(run.data, run.train.seed)
    model = EventTransformer(run.model, seed=run.train.seed)
    if not track:
        return train(model, run.train, train_set, test_set, out_dir, on_epoch)

    init_db()
    db = SessionLocal()
    try:
        record = create_run(db, run.data.dataset, run.train.seed, run.to_text(), out_dir, variant)
        update_run_status(db, record.run_id, "running")

        def epoch_done(metrics):
            record_epoch(db, record.run_id, metrics)
            if on_epoch is not None:
                on_epoch(metrics)

        try:
            result = train(model, run.train, train_set, test_set, out_dir, epoch_done)
        except TrainingDiverged as e:
            update_run_status(db, record.run_id, "diverged", error_message=str(e))
            raise
        except Exception as e:
            update_run_status(db, record.run_id, "failed", error_message=str(e))
            raise
        update_run_status(db, record.run_id, "completed", final_metrics=result.final)
        return result
    finally:
        db.close()


@celery_app.task(bind=True, name="workers.train_variant")
def train_variant(self, variant: str, config_text: str, seed: int, track: bool = True) -> dict:
    """Train one (variant, seed) cell of an ablation sweep"""
    run = run_config_from_text(config_text, {"train": {"seed": seed}})
    logger.info("training variant %s with seed %d", variant, seed)
    try:
        result = execute_run(run, variant=variant, track=track)
    except TrainingDiverged as e:
        logger.warning("variant %s seed %d diverged: %s", variant, seed, e)
        return {"variant": variant, "seed": seed, "status": "diverged", "test_acc": None}
    final = result.final
    return {
        "variant": variant,
        "seed": seed,
        "status": "completed",
        "loss": final.loss,
        "train_acc": final.train_acc,
        "test_acc": final.test_acc,
        "epochs": len(result.metrics),
    }


def variant_overrides(axis: str, value: str) -> Dict[str, Dict[str, str]]:
    if axis not in ABLATION_AXES:
        raise KeyError(f"unknown ablation axis {axis!r}")
    section, key = ABLATION_AXES[axis]
    return {section: {key: value}}


def run_ablation(base: RunConfig, axis: str, values: Sequence[str], seeds: Sequence[int],
                 track: bool = True) -> pd.DataFrame:
    """Dispatch every (value, seed) pair, wait for all of them, and average test top-1 per value"""
    base_text = base.to_text()
    pending = []
    for value in values:
        variant_text = run_config_from_text(base_text, variant_overrides(axis, value)).to_text()
        for seed in seeds:
            pending.append(train_variant.delay(f"{axis}={value}", variant_text, int(seed), track))

    results: List[Mapping] = [task.get() for task in pending]
    frame = pd.DataFrame(results)
    order = [f"{axis}={value}" for value in values]
    summary = frame.groupby("variant", sort=False).agg(mean=("test_acc", "mean"), seeds=("seed", "count"))
    return summary.reindex(order).reset_index()
