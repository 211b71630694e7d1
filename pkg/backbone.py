"""
Four-stage event transformer backbone
Linear embedding, FPS event-sampling layers, per-stage ETBs (with the
serial / parallel / concat fusion variants), the classification head, the
versioned checkpoint codec and analytic parameter / FLOP accounting
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from attention import GXformer, LXformer, SCformer, StageIndex
from config import (AttentionConfig, ModelConfig, config_from_text, config_to_text, model_config_from_sections,
                    model_sections)
from errors import CheckpointError, ConfigError, DimensionError, GeometryError
from events_io import NormalizedEvents
from geometry import farthest_point_sampling, group_nearest
from numerics import (Linear, Mlp, MlpSpec, Module, Tensor, concat, mean, reshape, rng_for, take)

logger = logging.getLogger(__name__)

__all__ = ["ModelConfig", "EventFeatures", "EventSamplingLayer", "ETB", "EventTransformer", "Checkpoint",
           "ComplexityReport", "linear_embed", "event_sampling_layer", "etb_forward", "backbone_forward",
           "classify_head", "save_checkpoint", "load_checkpoint", "encode_checkpoint", "decode_checkpoint",
           "model_from_checkpoint", "count_params_flops", "linear_flops", "spconv_head"]

# stream id for parameter initialisation under the run seed
PARAM_STREAM = 0


@dataclass
class EventFeatures:
    """Events at the current resolution with one feature row each"""

    events: NormalizedEvents
    features: Tensor

    def __post_init__(self):
        if self.features.shape[0] != len(self.events):
            raise DimensionError(f"{len(self.events)} events but {self.features.shape[0]} feature rows")

    @property
    def provenance(self) -> np.ndarray:
        return self.events.source_index

    @property
    def channels(self) -> int:
        return self.features.shape[1]


class EventSamplingLayer(Module):
    """FPS down-sampling by factor, max-pooled MLP over each center's nearest events"""

    def __init__(self, in_channels: int, expansion: int, factor: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = in_channels * expansion
        self.factor = factor
        self.mlp = Mlp.build(4 + in_channels, self.out_channels, rng)

    def output_size(self, n: int) -> int:
        return -(-n // self.factor)

    def forward(self, ef: EventFeatures) -> EventFeatures:
        n = len(ef.events)
        if n < self.factor:
            raise GeometryError(f"cannot down-sample {n} events by a factor of {self.factor}")
        if ef.channels != self.in_channels:
            raise DimensionError(f"sampling layer expects {self.in_channels} channels, got {ef.channels}")
        xyt = ef.events.xyt
        centers = farthest_point_sampling(xyt, self.output_size(n), start=0)
        groups = group_nearest(xyt, centers, self.factor)
        grouped = concat([Tensor(ef.events.matrix[groups]), take(ef.features, groups)], axis=-1)
        return EventFeatures(ef.events.take(centers), self.mlp(grouped).max(axis=1))


def spconv_head(attention: AttentionConfig, stage: int) -> int:
    """SCformer head width of a stage: its spconv_channels entry, the last one past the end"""
    widths = attention.spconv_channels
    return widths[min(stage, len(widths) - 1)]


def _make_block(letter: str, channels: int, attention: AttentionConfig, rng: np.random.Generator,
                stage: int = 0) -> Module:
    if letter == "S":
        head = spconv_head(attention, stage)
        return SCformer(channels, head, attention.window, attention.spconv_kernel, rng,
                        max(1, head // attention.pair_reduction))
    head = attention.head_channels or channels
    pair_hidden = max(1, head // attention.pair_reduction)
    if letter == "L":
        return LXformer(channels, head, attention.M, rng, pair_hidden)
    if letter == "G":
        return GXformer(channels, head, attention.r, rng, pair_hidden)
    raise ConfigError(f"unknown block letter {letter!r}")


class ETB(Module):
    """Event transformer block: attention blocks applied in structure order

    With parallel or concat fusion the first adjacent "LS" pair shares one
    residual: X + L(X) + S(X), or X + MLP(concat(L(X), S(X))).
    """

    def __init__(self, structure: str, channels: int, attention: AttentionConfig, rng: np.random.Generator,
                 fusion: str = "serial", stage: int = 0):
        if not structure:
            raise ConfigError("a block structure needs at least one letter")
        self.structure = structure
        self.channels = channels
        self.fusion = fusion
        self.blocks = [_make_block(letter, channels, attention, rng, stage) for letter in structure]
        self.fuse_at = structure.find("LS") if fusion != "serial" else -1
        self.fuse = Mlp.build(2 * channels, channels, rng) if fusion == "concat" and self.fuse_at >= 0 else None

    def forward(self, ef: EventFeatures, index: Optional[StageIndex] = None) -> EventFeatures:
        events = ef.events
        index = index or StageIndex(events)
        F = ef.features
        i = 0
        while i < len(self.blocks):
            if i == self.fuse_at:
                local = self.blocks[i].delta(events, F, index)
                sparse = self.blocks[i + 1].delta(events, F, index)
                if self.fuse is None:
                    F = F + local + sparse
                else:
                    F = F + self.fuse(concat([local, sparse], axis=1))
                i += 2
                continue
            F = self.blocks[i](events, F, index)
            i += 1
        return EventFeatures(events, F)

    def zero_residual_(self):
        for block in self.blocks:
            block.zero_delta_()
        if self.fuse is not None:
            self.fuse.zero_last_()
        return self


class EventTransformer(Module):
    """Embedding, stage-1 ETB, then (sampling layer, ETB) for stages 2-4, then the head"""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = rng_for(seed, PARAM_STREAM)
        channels = config.stage_channels
        attention = config.attention
        self.embed = Linear(4, config.C, rng)
        self.stages = [ETB(config.stage_structure[0], channels[0], attention, rng, config.fusion, stage=0)]
        self.samplers = []
        for stage in range(1, 4):
            self.samplers.append(EventSamplingLayer(channels[stage - 1], config.channel_expansion[stage - 1],
                                                    config.downsample_factor, rng))
            self.stages.append(ETB(config.stage_structure[stage], channels[stage], attention, rng, config.fusion,
                                   stage=stage))
        self.head = Mlp(MlpSpec((channels[-1] + 4, *config.head_widths, config.num_classes), "relu"), rng)

    @property
    def min_events(self) -> int:
        return self.config.min_events

    def output_size(self, n: int) -> int:
        for sampler in self.samplers:
            n = sampler.output_size(n)
        return n

    def features(self, events: NormalizedEvents) -> Tensor:
        return backbone_forward(events, self)

    def forward(self, events: NormalizedEvents) -> Tensor:
        return classify_head(self.features(events), self.head)

    def zero_residual_(self):
        """Start every attention block (and fusion MLP) as the identity"""
        for stage in self.stages:
            stage.zero_residual_()
        return self


def linear_embed(events: NormalizedEvents, embed: Linear) -> Tensor:
    if len(events) < 1:
        raise GeometryError("nothing to embed")
    return embed(Tensor(events.matrix))


def event_sampling_layer(ef: EventFeatures, layer: EventSamplingLayer) -> EventFeatures:
    return layer(ef)


def etb_forward(ef: EventFeatures, block: ETB) -> EventFeatures:
    return block(ef)


def backbone_forward(events: NormalizedEvents, model: EventTransformer) -> Tensor:
    """(N', 16C + 4): surviving raw rows concatenated with the stage-4 features"""
    if len(events) < model.min_events:
        raise GeometryError(f"the backbone needs at least {model.min_events} events, got {len(events)}")
    ef = model.stages[0](EventFeatures(events, linear_embed(events, model.embed)))
    for sampler, stage in zip(model.samplers, model.stages[1:]):
        ef = stage(sampler(ef))
        logger.debug("stage output %d x %d", len(ef.events), ef.channels)
    return concat([Tensor(ef.events.matrix), ef.features], axis=1)


def classify_head(features: Tensor, head: Mlp) -> Tensor:
    """Mean over rows, then the head MLP: one logit per class"""
    if features.ndim != 2 or features.shape[0] < 1:
        raise DimensionError(f"head expects a nonempty (m, D) feature matrix, got {features.shape}")
    pooled = reshape(mean(features, axis=0), (1, features.shape[1]))
    return reshape(head(pooled), (head.spec.out_features,))


# checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"EVTF"
CHECKPOINT_VERSION = 1
MOMENTUM_PREFIX = "momentum/"


@dataclass
class Checkpoint:
    config: ModelConfig
    state: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: EventTransformer, optimizer_buffers: Optional[Dict[str, np.ndarray]] = None,
                   epoch: int = 0) -> "Checkpoint":
        return cls(model.config, model.state_dict(), dict(optimizer_buffers or {}), epoch, model.seed)


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    value = np.ascontiguousarray(value, dtype="<f4")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", value.ndim)
    head += struct.pack(f"<{value.ndim}I", *value.shape)
    return head + value.tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """magic, version, config text, epoch, seed, then named float32 tensors"""
    text = config_to_text(model_sections(checkpoint.config)).encode("utf-8")
    tensors = list(checkpoint.state.items())
    tensors += [(MOMENTUM_PREFIX + name, value) for name, value in checkpoint.optimizer.items()]
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", checkpoint.version), struct.pack("<I", len(text)), text,
             struct.pack("<Qq", checkpoint.epoch, checkpoint.seed), struct.pack("<I", len(tensors))]
    parts.extend(_pack_tensor(name, value) for name, value in tensors)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not an event transformer checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (text_len,) = reader.unpack("<I")
    try:
        text = reader.read(text_len).decode("utf-8")
        config = model_config_from_sections(config_from_text(text))
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint config is unreadable: {e}") from e
    epoch, seed = reader.unpack("<Qq")
    (count,) = reader.unpack("<I")
    state, optimizer = {}, {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.read(name_len).decode("utf-8", errors="replace")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(reader.read(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(MOMENTUM_PREFIX):
            optimizer[name[len(MOMENTUM_PREFIX):]] = value
        else:
            state[name] = value
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(config, state, optimizer, epoch, seed, version)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.debug("wrote checkpoint %s (epoch %d)", path, checkpoint.epoch)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)


def model_from_checkpoint(checkpoint: Checkpoint) -> EventTransformer:
    model = EventTransformer(checkpoint.config, checkpoint.seed)
    try:
        model.load_state_dict(checkpoint.state)
    except DimensionError as e:
        raise CheckpointError(f"checkpoint does not match its own config: {e}") from e
    return model


# parameter and FLOP accounting -----------------------------------------------

TABLE_PARAMS = 15.87e6
TABLE_FLOPS = 0.51e9


def linear_flops(rows: int, d_in: int, d_out: int) -> int:
    """Multiply-accumulate counted as 2 FLOPs, plus the bias add"""
    return rows * (2 * d_in * d_out + d_out)


def _mlp_flops(mlp: Mlp, rows: int) -> int:
    widths = mlp.spec.layer_widths
    total = sum(linear_flops(rows, a, b) for a, b in zip(widths[:-1], widths[1:]))
    return total + rows * sum(widths[1:-1])


def _attention_flops(rows: int, slots: int, head: int) -> int:
    # q - k + pe, softmax (max, exp, sum, divide), weights * (v + pe), reduction over slots
    return rows * slots * head * 9


def _lx_flops(block: LXformer, n: int) -> int:
    h, M = block.head_channels, block.M
    total = sum(_mlp_flops(mlp, n) for mlp in (block.to_q, block.to_k, block.to_v))
    total += _mlp_flops(block.pos.mlp, n * M) + _mlp_flops(block.score, n * M)
    return total + _attention_flops(n, M, h) + _mlp_flops(block.out, n) + n * block.channels


def _sc_flops(block: SCformer, n: int, site_ratio: float) -> int:
    sites = max(1, int(math.ceil(site_ratio * n)))
    h, w, k = block.head_channels, block.window, block.kernel_size
    frame = 2 + block.channels
    total = n * block.channels + 8 * sites * frame
    total += 3 * sites * 2 * k * k * frame * h
    total += _mlp_flops(block.pos.mlp, sites * w * w) + _mlp_flops(block.score, sites * w * w)
    total += _attention_flops(sites, w * w, h) + _mlp_flops(block.inner, sites)
    return total + _mlp_flops(block.phi, n) + n * block.channels


def _gx_flops(block: GXformer, n: int) -> int:
    m = max(1, n // block.r)
    h, C = block.head_channels, block.channels
    total = _mlp_flops(block.group_mlp, m * block.r) + m * block.r * C
    total += _mlp_flops(block.to_q, m) + _mlp_flops(block.to_v, m) + _mlp_flops(block.to_k, n)
    total += _mlp_flops(block.pos.mlp, n * m) + _mlp_flops(block.score, n * m)
    return total + _attention_flops(n, m, h) + _mlp_flops(block.out, n) + n * C


def _block_flops(block: Module, n: int, site_ratio: float) -> int:
    if isinstance(block, LXformer):
        return _lx_flops(block, n)
    if isinstance(block, SCformer):
        return _sc_flops(block, n, site_ratio)
    return _gx_flops(block, n)


@dataclass
class ComplexityReport:
    params: int
    flops: int
    n_events: int
    site_ratio: float
    breakdown: List[Tuple[str, int, int]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.breakdown, columns=["module", "params", "flops"])


def count_params_flops(config: ModelConfig, n_events: int = 1024, site_ratio: float = 0.5) -> ComplexityReport:
    """Exact parameter count and analytic FLOPs for one forward pass of n_events

    SCformer cost assumes site_ratio active sites per event and full windows.
    """
    model = EventTransformer(config)
    rows: List[Tuple[str, int, int]] = []

    def add_row(name: str, module: Module, flops: int):
        rows.append((name, module.num_parameters(), int(flops)))

    n = n_events
    add_row("embed", model.embed, linear_flops(n, 4, config.C))
    for s, stage in enumerate(model.stages):
        if s > 0:
            sampler = model.samplers[s - 1]
            m = sampler.output_size(n)
            add_row(f"stage{s + 1}.sample", sampler,
                    _mlp_flops(sampler.mlp, m * sampler.factor) + m * sampler.factor * sampler.out_channels)
            n = m
        for b, block in enumerate(stage.blocks):
            add_row(f"stage{s + 1}.{stage.structure[b]}{b}", block, _block_flops(block, n, site_ratio))
        if stage.fuse is not None:
            add_row(f"stage{s + 1}.fuse", stage.fuse, _mlp_flops(stage.fuse, n))
        elif stage.fuse_at >= 0:
            rows.append((f"stage{s + 1}.fuse", 0, n * stage.channels))
    add_row("head", model.head, n * (config.stage_channels[-1] + 4) + _mlp_flops(model.head, 1))
    report = ComplexityReport(sum(r[1] for r in rows), sum(r[2] for r in rows), n_events, site_ratio, rows)
    if report.params != model.num_parameters():
        raise DimensionError("per-module parameter breakdown does not add up")
    return report
