"""Command-line surface tying the pipeline together.

Exit codes: 0 ok, 2 config error, 4 infeasible latency constraint,
3 numeric failure.  Run directory layout: config/, checkpoints/, reports/,
tables/, pairs/.
"""

from __future__ import annotations

import functools
import json
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import report as report_mod
from .checkpoint import (
    CheckpointError,
    checkpoint_kind,
    load_subnet,
    load_supernet,
    save_subnet,
    save_supernet,
)
from .config import ConfigError, RunConfig, prepare_datasets
from .data import DataError
from .ops import NumericsError
from .search import InfeasibleConstraintError, SearchParams, evolve
from .space import SpaceError, parse_arch_spec
from .supernet import Supernet, extract_subnet, recalibrate_bn
from .training import (
    ScheduleError,
    TrainingDiverged,
    build_ps_schedule,
    evaluate,
    finetune_subnet,
    probe_configs,
    run_schedule,
    train_naive,
)
from .twins import (
    MissingSignatureError,
    collect_pairs,
    load_latency_table,
    load_pairs_csv,
    load_predictor,
    predict_latency,
    save_latency_table,
    save_pairs_csv,
    save_predictor,
    synth_latency_table,
    train_acc_predictor,
    validate_table,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INFEASIBLE = 4


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except InfeasibleConstraintError as e:
            click.echo(f"infeasible: {e}", err=True)
            sys.exit(EXIT_INFEASIBLE)
        except (TrainingDiverged, NumericsError) as e:
            click.echo(f"numeric failure: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (ConfigError, ScheduleError, SpaceError, DataError,
                CheckpointError, MissingSignatureError, ValueError,
                OSError) as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
    return wrapper


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {run_dir} is locked by another "
                          f"process (stale? remove {lock})")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _layout(cfg: RunConfig) -> Path:
    run_dir = Path(cfg.out_dir)
    for sub in ("config", "checkpoints", "reports", "tables", "pairs"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config" / "run_config.json")
    return run_dir


@click.group()
def main():
    """Elastic supernet training and latency-constrained specialization."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def train(config_path):
    """Run the full progressive-shrinking schedule."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        splits = prepare_datasets(cfg)
        schedule = build_ps_schedule(cfg.space, cfg.overrides)
        net = Supernet(cfg.space, cfg.seed)

        def hook(stage_name, snapshot_net):
            save_supernet(run_dir / "checkpoints" / f"stage_{stage_name}",
                          snapshot_net)

        net, rep = run_schedule(net, schedule, splits["train"], seed=cfg.seed,
                                probe_data=splits["val"],
                                probe_every=cfg.probe_every,
                                checkpoint_hook=hook)
        save_supernet(run_dir / "checkpoints" / "supernet", net)
        (run_dir / "reports" / "train_report.json").write_text(
            json.dumps(rep.to_dict(), indent=1))
        report_mod.write_loss_csv(run_dir / "reports" / "loss_curves.csv",
                                  rep.to_dict())
        click.echo(f"trained {rep.total_steps} steps in "
                   f"{rep.wall_clock_s:.1f}s; checkpoints in {run_dir}/checkpoints")


@main.command("train-naive")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def train_naive_cmd(config_path):
    """Baseline: uniform sampling over the full space from scratch."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        splits = prepare_datasets(cfg)
        schedule = build_ps_schedule(cfg.space, cfg.overrides)
        epochs = cfg.naive_epochs or sum(s.epochs for s in schedule.stages)
        lr0 = schedule.stages[0].lr
        net = Supernet(cfg.space, cfg.seed)
        net, rep = train_naive(net, cfg.space, splits["train"], epochs,
                               schedule.batch_size, lr0, cfg.seed)
        for arch in probe_configs(cfg.space):
            acc = evaluate(net, splits["val"], arch=arch,
                           calibration=splits["val"], batch_size=cfg.eval_batch)
            rep.stages[0].probe_accs.append(
                {"epoch": epochs - 1, "label": arch.label(), "acc": acc})
        save_supernet(run_dir / "checkpoints" / "naive_supernet", net)
        (run_dir / "reports" / "naive_report.json").write_text(
            json.dumps(rep.to_dict(), indent=1))
        click.echo(f"naive baseline: {rep.total_steps} steps in "
                   f"{rep.wall_clock_s:.1f}s")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--arch", "arch_spec", required=True,
              help='config spec, or "probe8" for the 8-config grid')
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["test", "val"]))
@guarded
def eval_cmd(ckpt, arch_spec, config_path, split):
    """Evaluate configs of a trained checkpoint."""
    cfg = RunConfig.load(config_path)
    splits = prepare_datasets(cfg)
    data = splits[split]
    if checkpoint_kind(ckpt) == "subnet":
        subnet = load_subnet(ckpt)
        acc = evaluate(subnet, data, batch_size=cfg.eval_batch)
        click.echo(f"{subnet.arch.label()}\t{acc:.4f}")
        return
    net = load_supernet(ckpt)
    archs = probe_configs(net.space) if arch_spec.strip().lower() == "probe8" \
        else [parse_arch_spec(arch_spec, net.space)]
    click.echo("config\taccuracy")
    for arch in archs:
        acc = evaluate(net, data, arch=arch, calibration=splits["val"],
                       batch_size=cfg.eval_batch)
        click.echo(f"{arch.label()}\t{acc:.4f}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--n", "n_samples", default=None, type=int)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def collect(ckpt, n_samples, config_path):
    """Sample configs and measure their accuracy; emit the pairs CSV."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        splits = prepare_datasets(cfg)
        net = load_supernet(ckpt)
        rng = np.random.default_rng(cfg.seed + 1)
        n = n_samples or cfg.collect_n
        records = collect_pairs(net, net.space, n, splits["val"],
                                splits["val"], rng)
        out = run_dir / "pairs" / "pairs.csv"
        save_pairs_csv(out, records)
        click.echo(f"wrote {n} pairs to {out}")


@main.command("fit-predictor")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def fit_predictor(pairs_path, config_path):
    """Train the accuracy-predictor MLP on a pairs CSV."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        pairs = load_pairs_csv(pairs_path)
        pred, rmse = train_acc_predictor(pairs, cfg.space, seed=cfg.seed,
                                         warn=lambda m: click.echo(m, err=True))
        out = run_dir / "checkpoints" / "predictor"
        save_predictor(out, pred)
        click.echo(f"holdout RMSE: {rmse:.3f} accuracy points; "
                   f"predictor saved to {out}")


@main.command("latency-table")
@click.option("--mode", required=True, type=click.Choice(["mac_linear", "file"]))
@click.option("--alpha", default=1e-6, type=float)
@click.option("--beta", default=0.01, type=float)
@click.option("--file", "file_path", default=None, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def latency_table(mode, alpha, beta, file_path, config_path):
    """Build a MAC-linear latency table, or validate a supplied one."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        if mode == "mac_linear":
            table = synth_latency_table(cfg.space, alpha=alpha, beta=beta)
        else:
            if not file_path:
                raise ConfigError("file mode needs --file")
            table = load_latency_table(file_path)
        missing = validate_table(table, cfg.space)
        if missing:
            raise ConfigError(
                f"latency table is missing {len(missing)} signatures, "
                f"e.g. {missing[:5]}")
        out = run_dir / "tables" / "latency.tsv"
        save_latency_table(out, table)
        click.echo(f"latency table with {len(table.entries)} entries at {out}")


@main.command()
@click.option("--predictor", "predictor_path", required=True, type=click.Path())
@click.option("--latency-table", "table_path", required=True,
              type=click.Path(exists=True))
@click.option("--constraint-ms", required=True, type=float)
@click.option("--ckpt", default=None, type=click.Path(),
              help="supernet checkpoint; extracts the found sub-network")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def search(predictor_path, table_path, constraint_ms, ckpt, config_path):
    """Evolutionary search for the best config under a latency budget."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        pred = load_predictor(predictor_path)
        table = load_latency_table(table_path)
        params = SearchParams(
            population=cfg.search.population, sample_size=cfg.search.sample_size,
            cycles=cfg.search.cycles, mutation_prob=cfg.search.mutation_prob,
            constraint_ms=constraint_ms if constraint_ms > 0 else math.inf,
            seed=cfg.search.seed, feasibility_retries=cfg.search.feasibility_retries)
        result = evolve(cfg.space, pred, lambda a: predict_latency(table, a),
                        params)
        (run_dir / "reports" / "search_result.json").write_text(
            json.dumps(result.to_dict(), indent=1))
        report_mod.write_search_csv(run_dir / "reports" / "search_history.csv",
                                    result.to_dict())
        click.echo(f"best config: {result.best_arch.label()}")
        click.echo(f"predicted accuracy {result.predicted_accuracy:.4f}, "
                   f"predicted latency {result.predicted_latency:.4f} ms")
        if ckpt:
            net = load_supernet(ckpt)
            subnet = extract_subnet(net, result.best_arch)
            out = run_dir / "checkpoints" / "searched_subnet"
            save_subnet(out, subnet)
            click.echo(f"extracted sub-network saved to {out}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--arch", "arch_spec", default=None,
              help="required when --ckpt is a supernet")
@click.option("--epochs", required=True, type=int)
@click.option("--lr", default=0.02, type=float)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@guarded
def finetune(ckpt, arch_spec, epochs, lr, config_path):
    """Extract (if needed) and fine-tune a sub-network on the train split."""
    cfg = RunConfig.load(config_path)
    run_dir = _layout(cfg)
    with run_lock(run_dir):
        splits = prepare_datasets(cfg)
        if checkpoint_kind(ckpt) == "supernet":
            if not arch_spec:
                raise ConfigError("fine-tuning from a supernet needs --arch")
            net = load_supernet(ckpt)
            subnet = extract_subnet(net, parse_arch_spec(arch_spec, net.space))
        else:
            subnet = load_subnet(ckpt)
        cal = [splits["val"].images[:cfg.eval_batch]]
        from .ops import resize_bilinear
        cal = [resize_bilinear(c, subnet.resolution) for c in cal]
        recalibrate_bn(subnet, cal)
        pre = evaluate(subnet, splits["val"], batch_size=cfg.eval_batch)
        finetune_subnet(subnet, splits["train"], epochs,
                        cfg.overrides.batch_size, lr, cfg.seed)
        recalibrate_bn(subnet, cal)
        post = evaluate(subnet, splits["val"], batch_size=cfg.eval_batch)
        out = run_dir / "checkpoints" / "finetuned_subnet"
        save_subnet(out, subnet)
        click.echo(f"val accuracy before fine-tune: {pre:.4f}")
        click.echo(f"val accuracy after fine-tune:  {post:.4f}")
        click.echo(f"saved to {out}")


@main.command("report")
@click.option("--run-dir", "run_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@guarded
def report_cmd(run_dir):
    """Render consolidated CSVs and figures for a run directory."""
    written = report_mod.render_run_reports(run_dir)
    if not written:
        raise ConfigError(f"no reports found under {run_dir}")
    for p in written:
        click.echo(str(p))


if __name__ == "__main__":
    main()
