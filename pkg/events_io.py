"""
Event data model and dataset I/O
N-MNIST/ATIS binary codec, normalization to the N x 4 token matrix,
stratified splitting, random subsampling and the synthetic moving-bar corpus
"""

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import DatasetError, EmptyStreamError, EventFormatError, SplitError

logger = logging.getLogger(__name__)

NMNIST_DIMS = (34, 34)
RECORD_BYTES = 5
MAX_TIMESTAMP = (1 << 23) - 1
SYNTH_WINDOW_US = 100_000
SYNTH_NOISE_FRACTION = 0.05


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


class EventStream:
    """Time-ordered events held column-wise; sensor_dims is (height, width)"""

    def __init__(self, x, y, t, p, sensor_dims: Tuple[int, int] = NMNIST_DIMS, sort: bool = True):
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        p = np.asarray(p, dtype=np.int64)
        if not (x.shape == y.shape == t.shape == p.shape) or x.ndim != 1:
            raise EventFormatError("event columns must be 1-D and equally long")
        height, width = sensor_dims
        if x.size and (x.min() < 0 or y.min() < 0 or x.max() >= width or y.max() >= height):
            raise EventFormatError(f"event coordinates outside the {height}x{width} sensor")
        if t.size and t.min() < 0:
            raise EventFormatError("timestamps must be non-negative")
        if not np.all(np.abs(p) == 1):
            raise EventFormatError("polarity must be -1 or +1")
        if sort and t.size and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            x, y, t, p = x[order], y[order], t[order], p[order]
        self.x, self.y, self.t, self.p = x, y, t, p
        self.sensor_dims = (int(height), int(width))

    @classmethod
    def from_events(cls, events: Sequence[Event], sensor_dims: Tuple[int, int] = NMNIST_DIMS) -> "EventStream":
        columns = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(columns[:, 0], columns[:, 1], columns[:, 2], columns[:, 3], sensor_dims)

    def __len__(self) -> int:
        return int(self.t.size)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        return (self[i] for i in range(len(self)))

    def take(self, indices: np.ndarray) -> "EventStream":
        return EventStream(self.x[indices], self.y[indices], self.t[indices], self.p[indices],
                           self.sensor_dims, sort=False)

    def shifted(self, dt: int) -> "EventStream":
        return EventStream(self.x, self.y, self.t + dt, self.p, self.sensor_dims, sort=False)

    @property
    def duration(self) -> int:
        return int(self.t[-1] - self.t[0]) if len(self) else 0


@dataclass
class LabeledSample:
    stream: EventStream
    label: int
    path: Optional[str] = None


@dataclass
class NormalizedEvents:
    """N x 4 rows of (x/(W-1), y/(H-1), (t-t_min)/(t_max-t_min), p)

    pixel_x/pixel_y keep the integer coordinates and source_index maps each
    row back to the stream it came from.
    """

    matrix: np.ndarray
    pixel_x: np.ndarray
    pixel_y: np.ndarray
    source_index: np.ndarray
    sensor_dims: Tuple[int, int]
    t_min: int
    t_span: int

    def __len__(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def xyt(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def times(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def polarity(self) -> np.ndarray:
        return self.matrix[:, 3]

    def take(self, rows: np.ndarray) -> "NormalizedEvents":
        rows = np.asarray(rows, dtype=np.int64)
        return NormalizedEvents(self.matrix[rows], self.pixel_x[rows], self.pixel_y[rows],
                                self.source_index[rows], self.sensor_dims, self.t_min, self.t_span)

    def denormalize(self) -> EventStream:
        """Recover the integer attributes of every row"""
        t = self.t_min + np.rint(self.matrix[:, 2] * self.t_span).astype(np.int64)
        return EventStream(self.pixel_x, self.pixel_y, t, self.matrix[:, 3].astype(np.int64),
                           self.sensor_dims, sort=False)


# N-MNIST codec ---------------------------------------------------------------

def load_nmnist_bin(data: bytes) -> EventStream:
    """Decode 5-byte ATIS records: x, y, polarity bit + 23-bit big-endian timestamp"""
    if len(data) == 0:
        raise EmptyStreamError("empty N-MNIST file")
    if len(data) % RECORD_BYTES:
        raise EventFormatError(f"{len(data)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES).astype(np.int64)
    x = raw[:, 0]
    y = raw[:, 1]
    p = np.where(raw[:, 2] & 0x80, 1, -1)
    t = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    height, width = NMNIST_DIMS
    if x.max() >= width or y.max() >= height:
        raise EventFormatError(f"coordinate outside the {height}x{width} N-MNIST sensor")
    return EventStream(x, y, t, p, NMNIST_DIMS)


def encode_nmnist_bin(stream: EventStream) -> bytes:
    """Inverse of load_nmnist_bin for t-sorted streams"""
    if len(stream) and (stream.t.max() > MAX_TIMESTAMP or stream.x.max() > 255 or stream.y.max() > 255):
        raise EventFormatError("event does not fit the 5-byte record layout")
    raw = np.empty((len(stream), RECORD_BYTES), dtype=np.uint8)
    raw[:, 0] = stream.x
    raw[:, 1] = stream.y
    raw[:, 2] = ((stream.p > 0).astype(np.int64) << 7) | (stream.t >> 16)
    raw[:, 3] = (stream.t >> 8) & 0xFF
    raw[:, 4] = stream.t & 0xFF
    return raw.tobytes()


def load_nmnist_file(path) -> EventStream:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    return load_nmnist_bin(data)


# normalization and sampling --------------------------------------------------

def normalize_events(stream: EventStream) -> NormalizedEvents:
    if len(stream) == 0:
        raise EmptyStreamError("cannot normalize an empty stream")
    height, width = stream.sensor_dims
    t_min = int(stream.t.min())
    t_span = int(stream.t.max()) - t_min
    # integer subtraction first keeps the time column shift-invariant bit for bit
    rel_t = (stream.t - t_min).astype(np.float64)
    matrix = np.column_stack([
        stream.x / max(width - 1, 1),
        stream.y / max(height - 1, 1),
        rel_t / t_span if t_span > 0 else np.zeros(len(stream)),
        stream.p.astype(np.float64),
    ])
    return NormalizedEvents(matrix, stream.x.copy(), stream.y.copy(), np.arange(len(stream)),
                            stream.sensor_dims, t_min, t_span)


def sample_events(stream: EventStream, n: int, rng_seed) -> EventStream:
    """Uniform sample without replacement, kept in time order; short streams pass through"""
    if n < 1:
        raise ValueError("sample size must be at least 1")
    if len(stream) <= n:
        return stream
    rng = np.random.default_rng(rng_seed)
    keep = np.sort(rng.choice(len(stream), n, replace=False))
    return stream.take(keep)


def pad_events(events: NormalizedEvents, minimum: int) -> NormalizedEvents:
    """Repeat rows uniformly (row floor(i*N/minimum)) until there are minimum of them"""
    n = len(events)
    if n >= minimum:
        return events
    if n == 0:
        raise EmptyStreamError("cannot pad an empty stream")
    return events.take((np.arange(minimum) * n) // minimum)


# manifests and splits --------------------------------------------------------

def read_manifest(path) -> List[Tuple[str, int]]:
    """Newline-delimited path<TAB>label, paths relative to the manifest's directory"""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{n}: expected path<TAB>label")
        sample_path = Path(parts[0])
        if not sample_path.is_absolute():
            sample_path = path.parent / sample_path
        entries.append((str(sample_path), int(parts[1])))
    return entries


def write_manifest(path, entries: Sequence[Tuple[str, int]]):
    path = Path(path)
    lines = []
    for sample_path, label in entries:
        try:
            sample_path = os.path.relpath(sample_path, path.parent)
        except ValueError:
            pass
        lines.append(f"{sample_path}\t{label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def scan_dataset_root(root) -> List[Tuple[str, int]]:
    """root/<class>/<sample>.bin; numeric class directories keep their number as label"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()),
                        key=lambda d: (not d.name.isdigit(), int(d.name) if d.name.isdigit() else 0, d.name))
    entries = []
    for index, class_dir in enumerate(class_dirs):
        label = int(class_dir.name) if class_dir.name.isdigit() else index
        entries.extend((str(f), label) for f in sorted(class_dir.glob("*.bin")))
    if not entries:
        raise DatasetError(f"no .bin samples under {root}")
    return entries


def train_test_split(manifest: Sequence[Tuple[str, int]], fraction: float = 0.8,
                     seed: int = 0) -> Tuple[List[Tuple[str, int]], List[Tuple[str, int]]]:
    """Per-class stratified split; round(fraction * n) of each class goes to train"""
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    by_class = {}
    for entry in manifest:
        by_class.setdefault(entry[1], []).append(entry)
    train, test = [], []
    for label in sorted(by_class):
        entries = by_class[label]
        if len(entries) < 2:
            raise SplitError(f"class {label} has {len(entries)} sample(s); at least 2 are needed")
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(entries))
        n_train = min(max(int(round(fraction * len(entries))), 1), len(entries) - 1)
        train.extend(entries[i] for i in sorted(order[:n_train]))
        test.extend(entries[i] for i in sorted(order[n_train:]))
    return train, test


def limit_per_class(manifest: Sequence[Tuple[str, int]], limit: Optional[int]) -> List[Tuple[str, int]]:
    if limit is None:
        return list(manifest)
    counts, kept = {}, []
    for entry in manifest:
        if counts.get(entry[1], 0) < limit:
            counts[entry[1]] = counts.get(entry[1], 0) + 1
            kept.append(entry)
    return kept


def load_samples(manifest: Sequence[Tuple[str, int]]) -> List[LabeledSample]:
    samples = [LabeledSample(load_nmnist_file(path), label, path) for path, label in manifest]
    logger.debug("loaded %d samples", len(samples))
    return samples


# synthetic corpus ------------------------------------------------------------

def _synth_stream(label: int, num_classes: int, n: int, rng: np.random.Generator) -> EventStream:
    height, width = NMNIST_DIMS
    angle = label * math.pi / num_classes
    tangent = np.array([math.cos(angle), math.sin(angle)])
    normal = np.array([-math.sin(angle), math.cos(angle)])
    direction = 1.0 if rng.random() < 0.5 else -1.0
    center = np.array([(width - 1) / 2, (height - 1) / 2]) + rng.uniform(-3, 3, 2)

    n_noise = int(round(SYNTH_NOISE_FRACTION * n))
    n_bar = n - n_noise
    t_bar = rng.integers(0, SYNTH_WINDOW_US, n_bar)
    phase = t_bar / SYNTH_WINDOW_US - 0.5
    along = rng.uniform(-9.0, 9.0, n_bar)
    # leading edge brightens, trailing edge darkens
    p_bar = np.where(rng.random(n_bar) < 0.5, 1, -1)
    offset = (phase * 20.0 + 0.75 * p_bar) * direction
    xy = center + along[:, None] * tangent + offset[:, None] * normal + rng.normal(0, 0.4, (n_bar, 2))

    x = np.concatenate([np.clip(np.rint(xy[:, 0]), 0, width - 1), rng.integers(0, width, n_noise)])
    y = np.concatenate([np.clip(np.rint(xy[:, 1]), 0, height - 1), rng.integers(0, height, n_noise)])
    t = np.concatenate([t_bar, rng.integers(0, SYNTH_WINDOW_US, n_noise)])
    p = np.concatenate([p_bar, np.where(rng.random(n_noise) < 0.5, 1, -1)])
    return EventStream(x, y, t, p, NMNIST_DIMS)


def synth_dataset(num_classes: int, samples_per_class: int, events_per_sample: int,
                  seed: int) -> List[LabeledSample]:
    """Class k is a bar at angle k*pi/num_classes sweeping across a 34x34 sensor over 100 ms"""
    if min(num_classes, samples_per_class, events_per_sample) < 1:
        raise ValueError("synthetic dataset counts must all be at least 1")
    samples = []
    for label in range(num_classes):
        for i in range(samples_per_class):
            rng = np.random.default_rng([seed, label, i])
            samples.append(LabeledSample(_synth_stream(label, num_classes, events_per_sample, rng), label))
    return samples


def write_dataset(samples: Sequence[LabeledSample], root) -> Path:
    """Write root/<class>/<i>.bin plus root/manifest.tsv"""
    root = Path(root)
    entries = []
    counters = {}
    for sample in samples:
        index = counters.get(sample.label, 0)
        counters[sample.label] = index + 1
        path = root / str(sample.label) / f"{index:05d}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_nmnist_bin(sample.stream))
        entries.append((str(path), sample.label))
    manifest = root / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
