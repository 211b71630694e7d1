import os

# must be set before config.settings is created
os.environ["DATABASE_URL"] = "sqlite://"
os.environ["CELERY_TASK_ALWAYS_EAGER"] = "true"

import numpy as np
import pytest

from config import AttentionConfig, ModelConfig
from events_io import EventStream, normalize_events
from numerics import precision


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(C=4, num_classes=3, head_widths=[8],
                       attention=AttentionConfig(M=4, r=8, spconv_channels=[4, 16, 32]))


def make_stream(rng, n, dims=(8, 8), t_max=10_000):
    height, width = dims
    return EventStream(rng.integers(0, width, n), rng.integers(0, height, n), rng.integers(0, t_max, n),
                       np.where(rng.random(n) < 0.5, 1, -1), dims)


@pytest.fixture
def make_events(rng):
    def build(n, dims=(8, 8)):
        return normalize_events(make_stream(rng, n, dims))
    return build


TINY_RUN = """\
[model]
C = 4
num_classes = 2
head_widths = 8

[attention]
M = 4
r = 8
spconv_channels = 4,16,32

[train]
epochs = 1
batch_size = 2
train_event_samples = 64

[data]
synth_classes = 2
synth_train_per_class = 2
synth_test_per_class = 1
synth_events = 100
"""


@pytest.fixture
def tiny_run_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_RUN)
    return str(path)
