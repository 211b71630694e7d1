import math

import numpy as np
import pytest

from attention import LXformer, SCformer
from backbone import (CHECKPOINT_MAGIC, ETB, Checkpoint, EventFeatures, EventSamplingLayer, EventTransformer,
                      backbone_forward, classify_head, count_params_flops, decode_checkpoint, encode_checkpoint,
                      linear_embed, linear_flops, load_checkpoint, model_from_checkpoint, save_checkpoint,
                      spconv_head)
from config import AttentionConfig, ModelConfig
from conftest import make_stream
from errors import CheckpointError, ConfigError, GeometryError
from events_io import normalize_events
from numerics import Linear, Tensor, cross_entropy


def test_zero_embedding_gives_zero_features(rng, make_events):
    embed = Linear(4, 32, rng).zero_()
    F = linear_embed(make_events(50), embed)
    assert F.shape == (50, 32)
    assert np.all(F.data == 0)


def test_sampling_layer_shapes_and_provenance(rng, make_events):
    layer = EventSamplingLayer(8, 4, 4, rng)
    events = make_events(101)
    out = layer(EventFeatures(events, Tensor(rng.standard_normal((101, 8)))))
    assert len(out.events) == 26
    assert out.features.shape == (26, 32)
    assert set(out.provenance) <= set(events.source_index)
    assert len(set(out.provenance)) == 26


def test_sampling_layer_needs_at_least_factor_events(rng, make_events):
    layer = EventSamplingLayer(4, 2, 4, rng)
    with pytest.raises(GeometryError):
        layer(EventFeatures(make_events(3), Tensor(np.zeros((3, 4)))))


@pytest.mark.parametrize("n", [64, 128, 1024])
def test_backbone_shape_contract(n, tiny_config, rng):
    model = EventTransformer(tiny_config, seed=0)
    events = normalize_events(make_stream(rng, n, dims=(34, 34), t_max=100_000))
    expected = math.ceil(math.ceil(math.ceil(n / 4) / 4) / 4)
    assert backbone_forward(events, model).shape == (expected, 16 * 4 + 4)
    assert model.output_size(n) == expected


def test_backbone_rejects_short_input(tiny_config, make_events):
    with pytest.raises(GeometryError):
        backbone_forward(make_events(63), EventTransformer(tiny_config))


def test_etb_block_order_matters(rng, make_events):
    attention = AttentionConfig(M=4, r=8)
    events = make_events(30)
    F = Tensor(rng.standard_normal((30, 4)))
    ls = ETB("LS", 4, attention, np.random.default_rng(5))
    sl = ETB("SL", 4, attention, np.random.default_rng(5))
    assert not np.allclose(ls(EventFeatures(events, F)).features.data, sl(EventFeatures(events, F)).features.data)


def test_etb_keeps_events_and_shape(rng, make_events):
    block = ETB("LSG", 4, AttentionConfig(M=4, r=8), rng)
    ef = EventFeatures(make_events(30), Tensor(rng.standard_normal((30, 4))))
    out = block(ef)
    assert out.events is ef.events
    assert out.features.shape == (30, 4)


@pytest.mark.parametrize("fusion", ["serial", "parallel", "concat"])
def test_zero_residual_etb_is_identity(fusion, rng, make_events):
    block = ETB("LSG", 4, AttentionConfig(M=4, r=8), rng, fusion).zero_residual_()
    F = Tensor(rng.standard_normal((30, 4)))
    np.testing.assert_array_equal(block(EventFeatures(make_events(30), F)).features.data, F.data)


def test_etb_rejects_unknown_block_letter(rng):
    with pytest.raises(ConfigError):
        ETB("LX", 4, AttentionConfig(), rng)


def test_zero_residual_backbone_equals_blocks_removed_path(tiny_config, rng):
    model = EventTransformer(tiny_config.copy(update={"fusion": "concat"}), seed=3).zero_residual_()
    events = normalize_events(make_stream(rng, 100, dims=(34, 34)))
    ef = EventFeatures(events, linear_embed(events, model.embed))
    for sampler in model.samplers:
        ef = sampler(ef)
    reference = np.concatenate([ef.events.matrix, ef.features.data], axis=1)
    np.testing.assert_array_equal(backbone_forward(events, model).data, reference.astype(np.float32))


def test_same_seed_gives_identical_logits(tiny_config, rng):
    events = normalize_events(make_stream(rng, 80, dims=(34, 34)))
    a = EventTransformer(tiny_config, seed=11)(events).data
    b = EventTransformer(tiny_config, seed=11)(events).data
    np.testing.assert_array_equal(a, b)


def test_logits_are_invariant_to_timestamp_shift(tiny_config, rng):
    stream = make_stream(rng, 90, dims=(34, 34))
    model = EventTransformer(tiny_config, seed=2)
    np.testing.assert_array_equal(model(normalize_events(stream)).data,
                                  model(normalize_events(stream.shifted(5_000_000))).data)


def test_head_mean_over_duplicated_rows(tiny_config, rng):
    model = EventTransformer(tiny_config)
    row = rng.standard_normal((1, 68))
    single = classify_head(Tensor(row), model.head).data
    doubled = classify_head(Tensor(np.repeat(row, 2, axis=0)), model.head).data
    np.testing.assert_array_equal(single, doubled)


def test_zero_head_gives_uniform_loss(tiny_config, rng):
    model = EventTransformer(tiny_config)
    model.head.zero_last_()
    logits = classify_head(Tensor(rng.standard_normal((3, 68))), model.head)
    assert np.all(logits.data == 0)
    assert cross_entropy(logits, [1]).item() == pytest.approx(math.log(3), rel=1e-6)


def test_checkpoint_round_trip_is_bit_exact(tiny_config, rng, tmp_path):
    model = EventTransformer(tiny_config, seed=4)
    events = normalize_events(make_stream(rng, 70, dims=(34, 34)))
    path = save_checkpoint(Checkpoint.from_model(model, epoch=3), tmp_path / "model.evtf")
    checkpoint = load_checkpoint(path)
    assert checkpoint.epoch == 3 and checkpoint.seed == 4
    assert checkpoint.config == tiny_config
    restored = model_from_checkpoint(checkpoint)
    np.testing.assert_array_equal(restored(events).data, model(events).data)


def test_checkpoint_keeps_optimizer_buffers(tiny_config):
    model = EventTransformer(tiny_config)
    buffers = {name: np.full(p.shape, 0.5, dtype=np.float32) for name, p in model.named_parameters()}
    checkpoint = decode_checkpoint(encode_checkpoint(Checkpoint.from_model(model, buffers)))
    assert set(checkpoint.optimizer) == set(buffers)
    np.testing.assert_array_equal(checkpoint.optimizer["embed.weight"], buffers["embed.weight"])


def test_checkpoint_with_bad_magic_is_rejected(tiny_config):
    data = encode_checkpoint(Checkpoint.from_model(EventTransformer(tiny_config)))
    assert data[:4] == CHECKPOINT_MAGIC
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + data[4:])


def test_checkpoint_with_other_version_is_rejected(tiny_config):
    data = bytearray(encode_checkpoint(Checkpoint.from_model(EventTransformer(tiny_config))))
    data[4] = 2
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))


def test_truncated_checkpoint_is_rejected(tiny_config):
    data = encode_checkpoint(Checkpoint.from_model(EventTransformer(tiny_config)))
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-7])


def test_single_affine_layer_accounting():
    assert linear_flops(1024, 4, 32) == 1024 * (2 * 4 * 32 + 32)
    report = count_params_flops(ModelConfig(), n_events=1024)
    embed = dict((name, (params, flops)) for name, params, flops in report.breakdown)["embed"]
    assert embed == (4 * 32 + 32, 294_912)


def test_param_count_matches_instantiated_model(tiny_config):
    report = count_params_flops(tiny_config)
    assert report.params == EventTransformer(tiny_config).num_parameters()
    assert report.flops == sum(flops for _, _, flops in report.breakdown)
    assert count_params_flops(tiny_config).flops == report.flops


def test_doubling_channels_more_than_doubles_params():
    small = ModelConfig(C=8, head_widths=[32], attention=AttentionConfig(spconv_channels=[16, 32, 64]))
    large = ModelConfig(C=16, head_widths=[32], attention=AttentionConfig(spconv_channels=[32, 64, 128]))
    assert count_params_flops(large).params > 2 * count_params_flops(small).params


def test_window_changes_only_scformer_flops(tiny_config):
    narrow = tiny_config.copy(update={"attention": tiny_config.attention.copy(update={"window": 1})})
    base = {name: (p, f) for name, p, f in count_params_flops(tiny_config).breakdown}
    other = {name: (p, f) for name, p, f in count_params_flops(narrow).breakdown}
    assert base.keys() == other.keys()
    for name in base:
        assert base[name][0] == other[name][0]
        if ".S" in name:
            assert other[name][1] < base[name][1]
        else:
            assert other[name][1] == base[name][1]


def test_scformer_heads_follow_spconv_channels_per_stage():
    model = EventTransformer(ModelConfig())
    heads = [block.head_channels for stage in model.stages for block in stage.blocks
             if isinstance(block, SCformer)]
    assert heads == [64, 128, 256]
    assert [block.head_channels for block in model.stages[0].blocks] == [32, 64]


def test_spconv_widths_past_the_end_reuse_the_last_entry(rng):
    attention = AttentionConfig(M=4, r=8, spconv_channels=[4, 8])
    assert [spconv_head(attention, stage) for stage in range(4)] == [4, 8, 8, 8]
    block = ETB("LS", 4, attention, rng, stage=3)
    assert block.blocks[1].head_channels == 8


def test_spconv_channels_need_at_least_one_width():
    with pytest.raises(ValueError):
        AttentionConfig(spconv_channels=[])


def test_pair_mlps_are_narrowed_by_pair_reduction():
    stage2 = EventTransformer(ModelConfig()).stages[1]
    lx = stage2.blocks[0]
    assert isinstance(lx, LXformer)
    assert lx.score.spec.layer_widths == (128, 32, 128)
    assert lx.pos.mlp.spec.layer_widths == (4, 32, 128)
    assert lx.to_q.spec.layer_widths == (128, 128, 128)

    full = ETB("L", 128, AttentionConfig(pair_reduction=1), rng=np.random.default_rng(0))
    assert full.blocks[0].score.spec.layer_widths == (128, 128, 128)
