import pytest
from click.testing import CliRunner

from config import ModelConfig
from main import cli, resolve_run


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


def lines_starting(output, prefix):
    return [line for line in output.splitlines() if line.startswith(prefix)]


def bench_totals(output):
    return [int(part.split("=")[1]) for part in output.splitlines()[0].split()]


@pytest.fixture
def synth_dir(runner, tmp_path):
    out = tmp_path / "synth"
    result = runner.invoke(cli, ["make-synth", "--out", str(out), "--classes", "2", "--per-class", "1",
                                 "--events", "512"])
    assert result.exit_code == 0, result.stderr
    assert "samples=2" in result.output
    return out


def test_inspect_summarises_a_sample(runner, synth_dir):
    result = runner.invoke(cli, ["inspect", str(synth_dir / "0" / "00000.bin")])
    assert result.exit_code == 0
    assert "count=512" in result.output
    (counts,) = lines_starting(result.output, "positive=")
    positive, negative = (int(part.split("=")[1]) for part in counts.split())
    assert positive + negative == 512
    assert lines_starting(result.output, "x_range=")


def test_inspect_dump_prints_events(runner, synth_dir):
    result = runner.invoke(cli, ["inspect", str(synth_dir / "1" / "00000.bin"), "--dump", "3"])
    assert result.exit_code == 0
    dumped = [line for line in result.output.splitlines() if line.count("\t") == 3]
    assert len(dumped) == 3


def test_inspect_rejects_a_malformed_file(runner, tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(7))
    result = runner.invoke(cli, ["inspect", str(path)])
    assert result.exit_code == 2
    assert "error:" in result.stderr


def test_train_then_eval(runner, tiny_run_file, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--config", tiny_run_file, "--out", str(out), "--no-track"])
    assert result.exit_code == 0, result.stderr
    assert len(lines_starting(result.output, "0\t")) == 1
    assert lines_starting(result.output, "top1=")
    for name in ("checkpoint.evtf", "metrics.tsv", "metrics.csv", "config.ini"):
        assert (out / name).exists()

    args = ["eval", "--config", tiny_run_file, "--checkpoint", str(out / "checkpoint.evtf")]
    first, second = runner.invoke(cli, args), runner.invoke(cli, args)
    assert first.exit_code == 0, first.stderr
    assert lines_starting(first.output, "top1=") == lines_starting(second.output, "top1=")


def test_eval_rejects_a_corrupted_checkpoint(runner, tiny_run_file, tmp_path):
    path = tmp_path / "broken.evtf"
    path.write_bytes(b"not a checkpoint")
    result = runner.invoke(cli, ["eval", "--config", tiny_run_file, "--checkpoint", str(path)])
    assert result.exit_code == 4


def test_train_with_missing_dataset(runner, tiny_run_file, tmp_path):
    result = runner.invoke(cli, ["train", "--config", tiny_run_file, "--dataset", str(tmp_path / "missing"),
                                 "--out", str(tmp_path / "run"), "--no-track"])
    assert result.exit_code == 2


def test_unknown_config_key_is_a_usage_error(runner, tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nbogus = 1\n")
    result = runner.invoke(cli, ["bench", "--config", str(path), "--runs", "0"])
    assert result.exit_code == 2


def test_default_structure_flag_matches_default_model():
    assert resolve_run(structure="LS,LSG,LSG,L").model == ModelConfig()
    assert resolve_run(neighbors=8).model.attention.M == 8


def test_rate_flag_sets_the_gxformer_rate():
    model = resolve_run(rate=8).model
    assert model.attention.r == 8
    assert model.downsample_factor == 4
    assert model.min_events == 64


def test_gradcheck_passes_and_catches_faults(runner):
    ok = runner.invoke(cli, ["gradcheck", "--only", "relu", "--instances", "2"])
    assert ok.exit_code == 0
    assert ok.output.startswith("PASS\tprimitive\trelu")
    broken = runner.invoke(cli, ["gradcheck", "--fault", "relu", "--only", "relu", "--instances", "2"])
    assert broken.exit_code == 1
    assert "FAIL\tprimitive\trelu" in broken.output
    assert "fault=relu" in broken.output
    assert "relu" in broken.stderr


def test_bench_is_deterministic_and_reports_reference(runner, tiny_run_file):
    args = ["bench", "--config", tiny_run_file, "--runs", "0"]
    first, second = runner.invoke(cli, args), runner.invoke(cli, args)
    assert first.exit_code == 0, first.stderr
    assert first.output == second.output
    assert "reference params=15.87M flops=0.51G" in first.output
    rows = [line.split() for line in first.output.splitlines()[1:]]
    assert rows[0] == ["module", "params", "flops"]
    assert rows[1][0] == "embed"
    assert sum(int(row[1]) for row in rows[1:] if len(row) == 3) == bench_totals(first.output)[0]


def test_bench_window_ablation_changes_flops_only(runner, tiny_run_file):
    base = runner.invoke(cli, ["bench", "--config", tiny_run_file, "--runs", "0"])
    narrow = runner.invoke(cli, ["bench", "--config", tiny_run_file, "--runs", "0", "--ablate-window", "1"])
    (base_params, base_flops), (narrow_params, narrow_flops) = (bench_totals(r.output) for r in (base, narrow))
    assert base_params == narrow_params
    assert narrow_flops < base_flops


def test_bench_rate_ablation_changes_gxformer_flops_only(runner, tiny_run_file):
    base = runner.invoke(cli, ["bench", "--config", tiny_run_file, "--runs", "0"])
    denser = runner.invoke(cli, ["bench", "--config", tiny_run_file, "--runs", "0", "--rate", "4"])
    assert denser.exit_code == 0, denser.stderr
    (base_params, base_flops), (dense_params, dense_flops) = (bench_totals(r.output) for r in (base, denser))
    assert base_params == dense_params
    assert dense_flops > base_flops


def test_ablate_prints_one_row_per_variant(runner, tiny_run_file):
    result = runner.invoke(cli, ["ablate", "--config", tiny_run_file, "--axis", "fusion", "--value", "serial",
                                 "--value", "concat", "--seeds", "1", "--no-track"])
    assert result.exit_code == 0, result.stderr
    rows = [line.split("\t") for line in result.output.splitlines()]
    assert [row[0] for row in rows] == ["fusion=serial", "fusion=concat"]
    assert all(row[2] == "1" for row in rows)


MEMORIZE_RUN = """\
[model]
num_classes = 4

[train]
epochs = 37
batch_size = 8
train_event_samples = 512
milestones = 0:0.01

[data]
synth_classes = 4
synth_train_per_class = 16
synth_test_per_class = 2
synth_events = 512
"""


@pytest.mark.slow
def test_default_model_memorizes_64_samples(runner, tmp_path):
    # 64 samples in batches of 8 for 37 epochs: 296 optimizer steps
    config = tmp_path / "memorize.ini"
    config.write_text(MEMORIZE_RUN)
    out = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--config", str(config), "--out", str(out), "--no-track"])
    assert result.exit_code == 0, result.stderr
    evaluated = runner.invoke(cli, ["eval", "--config", str(config), "--checkpoint", str(out / "checkpoint.evtf"),
                                    "--split", "train"])
    assert evaluated.exit_code == 0, evaluated.stderr
    assert lines_starting(evaluated.output, "top1=") == ["top1=1.0"]
