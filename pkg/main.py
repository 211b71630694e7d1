"""
Event transformer command line
train, eval, gradcheck, bench, inspect, make-synth and ablate. Primary output
goes to stdout; diagnostics go through logging. Library errors map to exit
codes: 1 verification, 2 usage/config, 3 divergence, 4 checkpoint.
"""

import functools
import logging
import statistics
import sys
import time
from pathlib import Path

import click
import numpy as np

from backbone import TABLE_FLOPS, TABLE_PARAMS, EventTransformer, count_params_flops, load_checkpoint, \
    model_from_checkpoint
from config import DataConfig, load_run_config, settings
from errors import DatasetError, EventTransformerError
from events_io import load_nmnist_file, synth_dataset, write_dataset
from gradcheck import BACKWARD_RULES, run_suite, verify
from training import evaluate, prepare_events, resolve_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s: %(levelname)s/%(processName)s] %(message)s"


def handle_errors(command):
    """Report library errors on stderr and exit with their code"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except EventTransformerError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def run_options(command):
    """Config file, seed, dataset and the ablation flags shared by the run commands"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Sectioned key = value file"),
        click.option("--seed", type=int, help="Root seed for every random stream"),
        click.option("--dataset", help="synth, nmnist, or a dataset directory / manifest"),
        click.option("--root", help="Dataset root (defaults to EVTF_NMNIST_ROOT for nmnist)"),
        click.option("--max-per-class", type=int, help="Keep at most this many samples per class and split"),
        click.option("--structure", help='Stage block strings, e.g. "LS,LSG,LSG,L"'),
        click.option("--fusion", type=click.Choice(["concat", "parallel", "serial"])),
        click.option("--M", "neighbors", type=int, help="Temporal neighbours per LXformer query"),
        click.option("--window", type=int, help="SCformer window size"),
        click.option("--rate", type=int, help="GXformer down-sample rate r (events per representative)"),
        click.option("--epochs", type=int),
        click.option("--batch-size", type=int),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def resolve_run(config_path=None, seed=None, dataset=None, root=None, max_per_class=None, structure=None,
                fusion=None, neighbors=None, window=None, rate=None, epochs=None, batch_size=None):
    overrides = {
        "model": {"stage_structure": structure, "fusion": fusion},
        "attention": {"M": neighbors, "window": window, "r": rate},
        "train": {"seed": seed, "epochs": epochs, "batch_size": batch_size},
        "data": {"dataset": dataset, "root": root, "max_per_class": max_per_class},
    }
    return load_run_config(config_path, overrides)


@click.group()
@click.option("--log-level", default=settings.log_level, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Event transformer: event-camera classification with verifiable gradients"""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT)


@cli.command()
@run_options
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory")
@click.option("--no-track", is_flag=True, help="Do not record the run in the ledger")
@handle_errors
def train(out, no_track, **options):
    """Train a classifier; writes checkpoint.evtf, metrics.tsv and metrics.csv under --out"""
    from workers import execute_run

    run = resolve_run(**options)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(run.to_text(), encoding="utf-8")
    result = execute_run(run, str(out_dir), track=not no_track, on_epoch=lambda m: click.echo(m.to_line()))
    logger.info("wrote %s", out_dir / "checkpoint.evtf")
    final = result.final
    if final.test_acc is not None:
        click.echo(f"top1={final.test_acc}")


@cli.command(name="eval")
@run_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True)
@handle_errors
def eval_command(checkpoint_path, split, **options):
    """Top-1 accuracy of a checkpoint over full event streams"""
    checkpoint = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(checkpoint)
    run = resolve_run(**options)
    train_set, test_set = resolve_dataset(run.data, run.train.seed)
    samples = test_set if split == "test" else train_set
    click.echo(f"top1={evaluate(model, samples)}")


@cli.command()
@click.option("--fault", type=click.Choice(BACKWARD_RULES), help="Corrupt one backward rule (self-test)")
@click.option("--instances", type=int, default=10, show_default=True, help="Random instances per gradient check")
@click.option("--oracle-instances", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--only", multiple=True, help="Run only the named checks")
@handle_errors
def gradcheck(fault, instances, oracle_instances, seed, only):
    """Finite-difference and oracle suites; exit 1 if any check fails"""
    results = run_suite(fault=fault, instances=instances, oracle_instances=oracle_instances, seed=seed,
                        only=only or None)
    for result in results:
        click.echo(result.to_line())
    if fault is not None:
        click.echo(f"fault={fault}")
    verify(results)


@cli.command()
@run_options
@click.option("--ablate-window", type=int, help="Same as --window")
@click.option("--n-events", type=int, default=1024, show_default=True)
@click.option("--site-ratio", type=float, default=0.5, show_default=True,
              help="Active sites per event assumed for SCformer FLOPs")
@click.option("--runs", type=int, default=100, show_default=True, help="Timed forward passes (0 skips timing)")
@handle_errors
def bench(ablate_window, n_events, site_ratio, runs, **options):
    """Parameter and FLOP counts with per-module breakdown, plus median forward latency"""
    if ablate_window is not None:
        options["window"] = ablate_window
    run = resolve_run(**options)
    report = count_params_flops(run.model, n_events, site_ratio)
    click.echo(f"params={report.params} flops={report.flops}")
    click.echo(report.to_frame().to_string(index=False))
    click.echo(f"reference params={TABLE_PARAMS / 1e6:.2f}M flops={TABLE_FLOPS / 1e9:.2f}G "
               f"(measured {report.params / 1e6:.2f}M / {report.flops / 1e9:.2f}G at N={n_events})")
    if runs > 0:
        model = EventTransformer(run.model, seed=run.train.seed)
        stream = synth_dataset(1, 1, n_events, run.train.seed)[0].stream
        events = prepare_events(stream, model.min_events)
        timings = []
        for _ in range(runs):
            started = time.perf_counter()
            model(events)
            timings.append(time.perf_counter() - started)
        click.echo(f"latency_ms median={1000 * statistics.median(timings):.3f} runs={runs}")


@cli.command()
@click.argument("path", type=click.Path())
@click.option("--dump", type=int, default=0, help="Print the first n decoded events")
@handle_errors
def inspect(path, dump):
    """Summary of one N-MNIST binary sample"""
    stream = load_nmnist_file(path)
    click.echo(f"count={len(stream)}")
    click.echo(f"duration_us={stream.duration}")
    click.echo(f"positive={int(np.sum(stream.p > 0))} negative={int(np.sum(stream.p < 0))}")
    if len(stream):
        click.echo(f"x_range={int(stream.x.min())}..{int(stream.x.max())} "
                   f"y_range={int(stream.y.min())}..{int(stream.y.max())}")
    for event in list(stream)[:dump]:
        click.echo(f"{event.x}\t{event.y}\t{event.t}\t{event.p}")


@cli.command(name="make-synth")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--classes", type=int, default=DataConfig().synth_classes, show_default=True)
@click.option("--per-class", type=int, default=DataConfig().synth_train_per_class, show_default=True)
@click.option("--events", type=int, default=DataConfig().synth_events, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def make_synth(out, classes, per_class, events, seed):
    """Write the moving-bar corpus as N-MNIST binaries plus manifest.tsv"""
    try:
        samples = synth_dataset(classes, per_class, events, seed)
    except ValueError as e:
        raise click.UsageError(str(e))
    try:
        manifest = write_dataset(samples, out)
    except OSError as e:
        raise DatasetError(f"cannot write {out}: {e}") from e
    click.echo(f"samples={len(samples)} manifest={manifest}")


@cli.command()
@run_options
@click.option("--axis", type=click.Choice(["structure", "fusion", "M", "window", "rate"]), required=True)
@click.option("--value", "values", multiple=True, required=True, help="One variant per flag")
@click.option("--seeds", type=int, default=3, show_default=True)
@click.option("--no-track", is_flag=True)
@handle_errors
def ablate(axis, values, seeds, no_track, **options):
    """Train each variant under several seeds and print the mean test top-1 per variant"""
    from workers import run_ablation

    run = resolve_run(**options)
    base_seed = run.train.seed
    summary = run_ablation(run, axis, values, [base_seed + i for i in range(seeds)], track=not no_track)
    for row in summary.itertuples(index=False):
        click.echo(f"{row.variant}\t{row.mean:.6f}\t{int(row.seeds)}")


if __name__ == "__main__":
    cli()
