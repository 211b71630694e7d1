"""
Training and evaluation of event classifiers
SGD with momentum under an epoch-milestone learning-rate schedule, seeded
per-epoch event sampling, top-1 evaluation over full streams, metrics files
and checkpoint lifecycle
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backbone import Checkpoint, EventTransformer, save_checkpoint
from config import DataConfig, TrainConfig, settings
from errors import DatasetError, LabelError, TrainingDiverged
from events_io import (EventStream, LabeledSample, NormalizedEvents, limit_per_class, load_samples,
                       normalize_events, pad_events, read_manifest, sample_events, scan_dataset_root,
                       synth_dataset, train_test_split)
from numerics import SGD, cross_entropy, rng_for

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "Metrics", "TrainResult", "lr_schedule", "prepare_events", "predict", "evaluate",
           "train", "resolve_dataset"]

# rng stream ids under the run seed
SHUFFLE_STREAM = 1
SAMPLE_STREAM = 2

METRIC_COLUMNS = ["epoch", "loss", "train_acc", "test_acc", "seconds"]


@dataclass
class Metrics:
    epoch: int
    loss: float
    train_acc: float
    test_acc: Optional[float]
    seconds: float

    def to_line(self) -> str:
        test = "nan" if self.test_acc is None else f"{self.test_acc:.6f}"
        return f"{self.epoch}\t{self.loss:.6f}\t{self.train_acc:.6f}\t{test}\t{self.seconds:.3f}"

    def as_row(self) -> list:
        return [self.epoch, self.loss, self.train_acc, self.test_acc, self.seconds]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[Metrics] = field(default_factory=list)
    out_dir: Optional[Path] = None

    @property
    def final(self) -> Metrics:
        return self.metrics[-1]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Rate of the last milestone at or before epoch"""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    rate = config.milestones[0]
    for start, value in config.milestones.items():
        if start <= epoch:
            rate = value
    return rate


def prepare_events(stream: EventStream, minimum: int, n: Optional[int] = None, seed=None) -> NormalizedEvents:
    """Optionally sample n events, normalize, then pad short streams up to minimum"""
    if n is not None:
        stream = sample_events(stream, n, seed)
    return pad_events(normalize_events(stream), minimum)


def predict(model: EventTransformer, stream: EventStream) -> int:
    logits = model(prepare_events(stream, model.min_events)).data
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(logits))


def evaluate(model: EventTransformer, samples: Sequence[LabeledSample]) -> float:
    """Top-1 accuracy over every event of every sample"""
    if not samples:
        raise DatasetError("cannot evaluate on an empty dataset")
    correct = sum(predict(model, sample.stream) == sample.label for sample in samples)
    return correct / len(samples)


def _check_labels(samples: Sequence[LabeledSample], num_classes: int):
    labels = [s.label for s in samples]
    if min(labels) < 0 or max(labels) >= num_classes:
        raise LabelError(f"dataset labels span [{min(labels)}, {max(labels)}] but the model has {num_classes} classes")


def _write_metrics(out_dir: Path, metrics: Sequence[Metrics]):
    (out_dir / "metrics.tsv").write_text("".join(m.to_line() + "\n" for m in metrics), encoding="utf-8")
    frame = pd.DataFrame([m.as_row() for m in metrics], columns=METRIC_COLUMNS)
    frame.to_csv(out_dir / "metrics.csv", index=False)


def _optimizer_buffers(model: EventTransformer, optimizer: SGD) -> dict:
    names = [name for name, _ in model.named_parameters()]
    return dict(zip(names, optimizer.state.momentum_buffers))


def train(model: EventTransformer, config: TrainConfig, train_set: Sequence[LabeledSample],
          test_set: Optional[Sequence[LabeledSample]] = None, out_dir=None,
          on_epoch: Optional[Callable[[Metrics], None]] = None) -> TrainResult:
    """Run config.epochs epochs of seeded SGD; write checkpoint and metrics when out_dir is given

    Each batch accumulates per-sample gradients of loss / batch size in shuffled
    order, then takes one optimizer step. A non-finite loss aborts the run
    after saving diverged.evtf.
    """
    if not train_set:
        raise DatasetError("training set is empty")
    num_classes = model.config.num_classes
    _check_labels(train_set, num_classes)
    if test_set:
        _check_labels(test_set, num_classes)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = SGD(model.parameters(), lr=lr_schedule(0, config), momentum=config.momentum)
    seed = config.seed
    metrics: List[Metrics] = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        optimizer.lr = lr_schedule(epoch, config)
        order = rng_for(seed, SHUFFLE_STREAM, epoch).permutation(len(train_set))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            for i in batch:
                sample = train_set[i]
                events = prepare_events(sample.stream, model.min_events, config.train_event_samples,
                                        rng_for(seed, SAMPLE_STREAM, epoch, int(i)))
                logits = model(events)
                loss = cross_entropy(logits, [sample.label])
                value = loss.item()
                if not math.isfinite(value):
                    path = None
                    if out_dir is not None:
                        path = str(save_checkpoint(
                            Checkpoint.from_model(model, _optimizer_buffers(model, optimizer), epoch),
                            out_dir / "diverged.evtf"))
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch}", path)
                (loss / len(batch)).backward()
                total_loss += value
                correct += int(np.argmax(logits.data)) == sample.label
            optimizer.step()

        test_acc = None
        if test_set and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            test_acc = evaluate(model, test_set)
        record = Metrics(epoch, total_loss / len(train_set), correct / len(train_set), test_acc,
                         time.perf_counter() - started)
        metrics.append(record)
        logger.info("epoch %d lr=%g loss=%.4f train_acc=%.4f test_acc=%s", epoch, optimizer.lr, record.loss,
                    record.train_acc, "-" if test_acc is None else f"{test_acc:.4f}")
        if on_epoch is not None:
            on_epoch(record)

    checkpoint = Checkpoint.from_model(model, _optimizer_buffers(model, optimizer), config.epochs)
    if out_dir is not None:
        save_checkpoint(checkpoint, out_dir / "checkpoint.evtf")
        _write_metrics(out_dir, metrics)
    return TrainResult(checkpoint, metrics, out_dir)


def _split_synthetic(data: DataConfig, seed: int) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    per_class = data.synth_train_per_class + data.synth_test_per_class
    samples = synth_dataset(data.synth_classes, per_class, data.synth_events, seed)
    train_set, test_set = [], []
    for n, sample in enumerate(samples):
        (train_set if n % per_class < data.synth_train_per_class else test_set).append(sample)
    return train_set, test_set


def _dataset_root(data: DataConfig) -> Path:
    root = data.root
    if root is None and data.dataset == "nmnist":
        root = settings.nmnist_root
    if root is None and data.dataset != "nmnist":
        root = data.dataset
    if root is None:
        raise DatasetError("no dataset root: pass --root or set EVTF_NMNIST_ROOT")
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset path {root} does not exist")
    return root


def resolve_dataset(data: DataConfig, seed: int = 0) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    """Train and test samples for the data section of a run config

    "synth" builds the moving-bar corpus; otherwise the root is a manifest file,
    a directory with Train/ and Test/ subdirectories, or a class-per-directory
    tree that is split per class.
    """
    if data.dataset == "synth":
        return _split_synthetic(data, seed)
    root = _dataset_root(data)
    if root.is_file():
        train_entries, test_entries = train_test_split(read_manifest(root), data.split_fraction, seed)
    elif (root / "Train").is_dir() and (root / "Test").is_dir():
        train_entries, test_entries = scan_dataset_root(root / "Train"), scan_dataset_root(root / "Test")
    else:
        train_entries, test_entries = train_test_split(scan_dataset_root(root), data.split_fraction, seed)
    train_entries = limit_per_class(train_entries, data.max_per_class)
    test_entries = limit_per_class(test_entries, data.max_per_class)
    logger.info("dataset %s: %d train / %d test samples", root, len(train_entries), len(test_entries))
    return load_samples(train_entries), load_samples(test_entries)
