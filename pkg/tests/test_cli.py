"""End-to-end command-line tests: the full pipeline on a miniature space,
exit codes, the run-directory lock, and config round-trips."""

import json
import math
from pathlib import Path

import pytest
from click.testing import CliRunner

from elastinet.cli import main
from elastinet.config import ConfigError, RunConfig

runner = CliRunner()

MINI_SPACE = {
    "n_units": 1,
    "depth_choices": [[1, 2]],
    "width_ratio_choices": [2, 3],
    "kernel_choices": [3, 5],
    "resolution_choices": [16],
    "base_widths": [8],
    "stem_channels": 4,
    "n_classes": 10,
}


def write_config(tmp_path, **extra):
    cfg = {
        "space": MINI_SPACE,
        "overrides": {"epoch_scale": 0.0, "epoch_floor": 1, "batch_size": 32},
        "data": {"source": "synthetic", "n_train": 64, "n_val": 32,
                 "n_test": 32, "separation": 6.0, "seed": 0},
        "search": {"population": 20, "sample_size": 5, "cycles": 60,
                   "mutation_prob": 0.2, "seed": 0},
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "eval_batch": 64,
        "collect_n": 100,
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One trained run directory shared by the pipeline tests."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp_path)
    run_dir = tmp_path / "run"
    res = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    return cfg_path, run_dir


def ckpt_exists(base) -> bool:
    return Path(f"{base}.json").exists()


def test_train_artifacts(pipeline):
    _, run_dir = pipeline
    assert ckpt_exists(run_dir / "checkpoints" / "supernet")
    assert (run_dir / "reports" / "train_report.json").exists()
    assert (run_dir / "reports" / "loss_curves.csv").exists()
    assert (run_dir / "config" / "run_config.json").exists()
    assert not (run_dir / ".lock").exists()  # released after the command
    rep = json.loads((run_dir / "reports" / "train_report.json").read_text())
    assert [s["name"] for s in rep["stages"]][0] == "full"
    assert len(rep["stages"]) == 6


def test_eval_probe8(pipeline):
    cfg_path, run_dir = pipeline
    res = runner.invoke(main, ["eval", "--ckpt",
                               str(run_dir / "checkpoints" / "supernet"),
                               "--arch", "probe8", "--config", str(cfg_path),
                               "--split", "val"])
    assert res.exit_code == 0, res.output
    lines = res.output.strip().splitlines()
    assert lines[0] == "config\taccuracy"
    assert len(lines) == 9  # header + 8 probe configs
    for line in lines[1:]:
        acc = float(line.split("\t")[1])
        assert 0.0 <= acc <= 1.0


def test_eval_uniform_spec(pipeline):
    cfg_path, run_dir = pipeline
    res = runner.invoke(main, ["eval", "--ckpt",
                               str(run_dir / "checkpoints" / "supernet"),
                               "--arch", "D=1,W=2,K=3",
                               "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert "k3w2" in res.output


def test_full_pipeline(pipeline):
    cfg_path, run_dir = pipeline
    ckpt = str(run_dir / "checkpoints" / "supernet")

    res = runner.invoke(main, ["collect", "--ckpt", ckpt, "--n", "120",
                               "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    pairs = run_dir / "pairs" / "pairs.csv"
    assert pairs.exists()
    assert len(pairs.read_text().strip().splitlines()) == 121  # header + rows

    res = runner.invoke(main, ["fit-predictor", "--pairs", str(pairs),
                               "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert "RMSE" in res.output
    predictor = run_dir / "checkpoints" / "predictor"
    assert ckpt_exists(predictor)

    res = runner.invoke(main, ["latency-table", "--mode", "mac_linear",
                               "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    table = run_dir / "tables" / "latency.tsv"
    assert table.exists()

    res = runner.invoke(main, ["search", "--predictor", str(predictor),
                               "--latency-table", str(table),
                               "--constraint-ms", "0",  # <=0 means unconstrained
                               "--ckpt", ckpt, "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert "best config" in res.output
    result = json.loads(
        (run_dir / "reports" / "search_result.json").read_text())
    assert result["feasible"] is True
    searched = run_dir / "checkpoints" / "searched_subnet"
    assert ckpt_exists(searched)

    res = runner.invoke(main, ["finetune", "--ckpt", str(searched),
                               "--epochs", "1", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert "after fine-tune" in res.output
    finetuned = run_dir / "checkpoints" / "finetuned_subnet"
    assert ckpt_exists(finetuned)

    # sub-network checkpoints evaluate directly
    res = runner.invoke(main, ["eval", "--ckpt", str(finetuned),
                               "--arch", "ignored", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output

    res = runner.invoke(main, ["report", "--run-dir", str(run_dir)])
    assert res.exit_code == 0, res.output
    written = [Path(p) for p in res.output.strip().splitlines()]
    assert all(p.exists() for p in written)
    assert any(p.suffix == ".png" for p in written)  # figures rendered
    assert any(p.suffix == ".csv" for p in written)


def test_train_naive(tmp_path):
    cfg_path = write_config(tmp_path, naive_epochs=1)
    res = runner.invoke(main, ["train-naive", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    run_dir = tmp_path / "run"
    assert ckpt_exists(run_dir / "checkpoints" / "naive_supernet")
    rep = json.loads((run_dir / "reports" / "naive_report.json").read_text())
    assert len(rep["stages"][0]["probe_accs"]) == 8


# ---------------------------------------------------------------------------
# exit codes

def test_exit_2_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    res = runner.invoke(main, ["train", "--config", str(bad)])
    assert res.exit_code == 2


def test_exit_2_invalid_space(tmp_path):
    space = dict(MINI_SPACE, kernel_choices=[4])  # even kernels invalid
    cfg_path = write_config(tmp_path, space=space)
    res = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert res.exit_code == 2


def test_exit_2_bad_arch_spec(pipeline):
    cfg_path, run_dir = pipeline
    res = runner.invoke(main, ["eval", "--ckpt",
                               str(run_dir / "checkpoints" / "supernet"),
                               "--arch", "D=9,W=2,K=3",
                               "--config", str(cfg_path)])
    assert res.exit_code == 2


def test_exit_2_locked_run_dir(tmp_path):
    cfg_path = write_config(tmp_path)
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("12345")
    res = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert res.exit_code == 2
    assert "locked" in res.output
    assert (run_dir / ".lock").exists()  # a foreign lock is never removed


def test_exit_3_divergence(tmp_path):
    cfg_path = write_config(
        tmp_path, overrides={"epoch_scale": 0.0, "epoch_floor": 1,
                             "batch_size": 32, "lr_scale": 1e12})
    res = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert res.exit_code == 3
    assert not (tmp_path / "run" / ".lock").exists()  # released on failure


def test_exit_4_infeasible_constraint(pipeline, tmp_path):
    cfg_path, run_dir = pipeline
    predictor = run_dir / "checkpoints" / "predictor"
    table = run_dir / "tables" / "latency.tsv"
    if not ckpt_exists(predictor) or not table.exists():
        pytest.skip("pipeline artifacts not built")
    res = runner.invoke(main, ["search", "--predictor", str(predictor),
                               "--latency-table", str(table),
                               "--constraint-ms", "1e-9",
                               "--config", str(cfg_path)])
    assert res.exit_code == 4
    assert "infeasible" in res.output


# ---------------------------------------------------------------------------
# config round-trips

def test_config_round_trip_lossless(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.json"
    cfg.save(path)
    loaded = RunConfig.load(path)
    assert loaded.to_dict() == cfg.to_dict()
    assert math.isinf(loaded.search.constraint_ms)


def test_config_constraint_none_means_unbounded(tmp_path):
    d = RunConfig().to_dict()
    assert d["search"]["constraint_ms"] is None
    d["search"]["constraint_ms"] = 5.0
    cfg = RunConfig.from_dict(d)
    assert cfg.search.constraint_ms == 5.0


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"space": MINI_SPACE, "data": {"bogus": 1}})


def test_config_rejects_unknown_source(tmp_path):
    from elastinet.config import prepare_datasets
    cfg = RunConfig.from_dict({"space": MINI_SPACE,
                               "data": {"source": "imagenet"}})
    with pytest.raises(ConfigError):
        prepare_datasets(cfg)
