"""
Configuration for the event transformer
Environment settings come from .env / the process environment; run
configuration comes from a sectioned key = value file plus flag overrides
"""

import configparser
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Extra, ValidationError, validator
from pydantic.fields import SHAPE_DICT, SHAPE_LIST

from errors import ConfigError

load_dotenv()

BLOCK_LETTERS = frozenset("LSG")
FUSIONS = ("serial", "parallel", "concat")


class Settings:
    """Process-level settings read from the environment"""

    def __init__(self):
        self.database_url = os.getenv("DATABASE_URL", "sqlite:///./event_transformer_runs.db")
        self.celery_broker_url = os.getenv("CELERY_BROKER_URL", "redis://localhost:6379/0")
        self.celery_result_backend = os.getenv("CELERY_RESULT_BACKEND", "redis://localhost:6379/0")
        self.celery_always_eager = os.getenv("CELERY_TASK_ALWAYS_EAGER", "false").lower() in ("1", "true", "yes")
        self.log_level = os.getenv("EVTF_LOG_LEVEL", "INFO").upper()
        self.nmnist_root = os.getenv("EVTF_NMNIST_ROOT")


settings = Settings()


class _Section(BaseModel):
    """Base for config sections: unknown keys rejected, lists accept comma-separated text"""

    class Config:
        extra = Extra.forbid
        validate_assignment = True

    @validator("*", pre=True)
    def _parse_text(cls, value, field):
        if not isinstance(value, str):
            return value
        if value.strip() == "" and field.allow_none:
            return None
        if field.shape == SHAPE_LIST:
            return [part.strip() for part in value.split(",") if part.strip()]
        if field.shape == SHAPE_DICT:
            pairs = (part.split(":", 1) for part in value.split(",") if part.strip())
            return {k.strip(): v.strip() for k, v in pairs}
        return value


class AttentionConfig(_Section):
    M: int = 16
    window: int = 3
    r: int = 32
    spconv_channels: List[int] = [64, 128, 256]
    spconv_kernel: int = 3
    head_channels: Optional[int] = None
    pair_reduction: int = 4

    @validator("M", "r", "pair_reduction")
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @validator("window", "spconv_kernel")
    def _odd(cls, value):
        if value < 1 or value % 2 == 0:
            raise ValueError("must be odd and at least 1")
        return value

    @validator("spconv_channels", each_item=True)
    def _positive_channels(cls, value):
        if value < 1:
            raise ValueError("channels must be positive")
        return value

    @validator("spconv_channels")
    def _one_width_per_stage(cls, value):
        if not value:
            raise ValueError("need at least one sparse-conv width")
        return value

    @validator("head_channels")
    def _positive_head(cls, value):
        if value is not None and value < 1:
            raise ValueError("head channels must be positive")
        return value


class ModelConfig(_Section):
    C: int = 32
    stage_structure: List[str] = ["LS", "LSG", "LSG", "L"]
    channel_expansion: List[int] = [4, 2, 2]
    downsample_factor: int = 4
    fusion: str = "serial"
    num_classes: int = 10
    head_widths: List[int] = [256]
    attention: AttentionConfig = AttentionConfig()

    @validator("C", "num_classes", "downsample_factor")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be positive")
        return value

    @validator("stage_structure")
    def _structure(cls, value):
        if len(value) != 4:
            raise ValueError(f"need 4 stage structures, got {len(value)}")
        for blocks in value:
            if not blocks or set(blocks) - BLOCK_LETTERS:
                raise ValueError(f"stage structure {blocks!r} must be a nonempty string over L, S, G")
        return value

    @validator("channel_expansion")
    def _expansion(cls, value):
        if len(value) != 3 or value[0] * value[1] * value[2] != 16 or min(value) < 1:
            raise ValueError("three expansions multiplying to 16 are required")
        return value

    @validator("fusion")
    def _fusion(cls, value):
        if value not in FUSIONS:
            raise ValueError(f"fusion must be one of {', '.join(FUSIONS)}")
        return value

    @property
    def stage_channels(self) -> List[int]:
        channels = [self.C]
        for factor in self.channel_expansion:
            channels.append(channels[-1] * factor)
        return channels

    @property
    def min_events(self) -> int:
        return self.downsample_factor ** 3


class TrainConfig(_Section):
    epochs: int = 200
    batch_size: int = 64
    milestones: Dict[int, float] = {0: 0.01, 150: 0.001, 180: 0.0001}
    momentum: float = 0.9
    train_event_samples: int = 1024
    seed: int = 0
    eval_every: int = 1

    @validator("epochs", "batch_size", "train_event_samples", "eval_every")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be positive")
        return value

    @validator("milestones")
    def _milestones(cls, value):
        if 0 not in value:
            raise ValueError("a milestone at epoch 0 is required")
        if any(epoch < 0 or rate < 0 for epoch, rate in value.items()):
            raise ValueError("milestone epochs and rates must be non-negative")
        return dict(sorted(value.items()))


class DataConfig(_Section):
    dataset: str = "synth"
    root: Optional[str] = None
    max_per_class: Optional[int] = None
    split_fraction: float = 0.8
    synth_classes: int = 4
    synth_train_per_class: int = 200
    synth_test_per_class: int = 100
    synth_events: int = 512


class RunConfig(BaseModel):
    """Fully resolved view of model, training and data settings"""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    class Config:
        extra = Extra.forbid

    def to_text(self) -> str:
        return config_to_text(run_sections(self))


SECTIONS = ("attention", "data", "model", "train")


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def model_sections(model: ModelConfig) -> Dict[str, dict]:
    fields = model.dict()
    attention = fields.pop("attention")
    return {"attention": attention, "model": fields}


def run_sections(run: RunConfig) -> Dict[str, dict]:
    sections = model_sections(run.model)
    sections["train"] = run.train.dict()
    sections["data"] = run.data.dict()
    return sections


def config_to_text(sections: Mapping[str, Mapping]) -> str:
    """Canonical form: sections sorted, keys sorted, one key = value per line"""
    lines = []
    for name in sorted(sections):
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {_format(sections[name][key])}" for key in sorted(sections[name]))
        lines.append("")
    return "\n".join(lines)


def config_from_text(text: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from e
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return {name: dict(parser.items(name)) for name in parser.sections()}


def _build(cls, values):
    try:
        return cls(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def model_config_from_sections(sections: Mapping[str, Mapping]) -> ModelConfig:
    values = dict(sections.get("model", {}))
    values["attention"] = _build(AttentionConfig, sections.get("attention", {}))
    return _build(ModelConfig, values)


def run_config_from_text(text: str = "",
                         overrides: Optional[Mapping[str, Mapping[str, object]]] = None) -> RunConfig:
    sections: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
    for name, values in config_from_text(text).items():
        sections[name].update(values)
    for name, values in (overrides or {}).items():
        if name not in sections:
            raise ConfigError(f"unknown config section {name!r}")
        sections[name].update({k: v for k, v in values.items() if v is not None})
    return RunConfig(model=model_config_from_sections(sections),
                     train=_build(TrainConfig, sections["train"]),
                     data=_build(DataConfig, sections["data"]))


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Mapping[str, Mapping[str, object]]] = None) -> RunConfig:
    """Read the config file (if any) and apply flag overrides on top"""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    return run_config_from_text(text, overrides)
