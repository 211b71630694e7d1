import pytest

from config import load_run_config
from database import SessionLocal, list_runs
from workers import ABLATION_AXES, execute_run, run_ablation, train_variant, variant_overrides


def test_tracked_run_is_recorded(tiny_run_file, tmp_path):
    run = load_run_config(tiny_run_file, {"train": {"epochs": 2}})
    result = execute_run(run, str(tmp_path), variant="tracked-run-test")
    (stored,) = [r for r in list_runs(SessionLocal(), "tracked-run-test")]
    assert stored.status == "completed"
    assert stored.out_dir == str(tmp_path)
    assert [e.epoch for e in stored.epochs] == [0, 1]
    assert stored.final_loss == pytest.approx(result.final.loss)


def test_untracked_run_writes_nothing_to_the_ledger(tiny_run_file):
    run = load_run_config(tiny_run_file)
    execute_run(run, variant="untracked-run-test", track=False)
    assert list_runs(SessionLocal(), "untracked-run-test") == []


def test_variant_overrides_cover_every_axis():
    assert variant_overrides("M", "8") == {"attention": {"M": "8"}}
    assert variant_overrides("rate", "8") == {"attention": {"r": "8"}}
    assert set(ABLATION_AXES) == {"structure", "fusion", "M", "window", "rate"}
    with pytest.raises(KeyError):
        variant_overrides("depth", "2")


def test_train_variant_task_returns_final_metrics(tiny_run_file):
    text = load_run_config(tiny_run_file).to_text()
    outcome = train_variant.delay("fusion=serial", text, 5, False).get()
    assert outcome["seed"] == 5
    assert outcome["status"] == "completed"
    assert 0.0 <= outcome["test_acc"] <= 1.0


def test_ablation_summarises_each_variant(tiny_run_file):
    summary = run_ablation(load_run_config(tiny_run_file), "fusion", ["serial", "concat"], [0], track=False)
    assert list(summary.columns) == ["variant", "mean", "seeds"]
    assert list(summary["variant"]) == ["fusion=serial", "fusion=concat"]
    assert list(summary["seeds"]) == [1, 1]


@pytest.mark.slow
@pytest.mark.parametrize("axis, stronger, weaker", [
    ("structure", "LS,LSG,LSG,L", "L,L,L,L"),
    ("fusion", "serial", "concat"),
])
def test_ablation_direction_at_desk_scale(axis, stronger, weaker):
    overrides = {
        "model": {"num_classes": 4},
        "train": {"epochs": 10, "batch_size": 16, "train_event_samples": 512, "milestones": "0:0.01"},
        "data": {"synth_train_per_class": 50, "synth_test_per_class": 50},
    }
    summary = run_ablation(load_run_config(None, overrides), axis, [stronger, weaker], [0, 1, 2], track=False)
    means = dict(zip(summary["variant"], summary["mean"]))
    assert list(summary["seeds"]) == [3, 3]
    assert means[f"{axis}={stronger}"] >= means[f"{axis}={weaker}"]
