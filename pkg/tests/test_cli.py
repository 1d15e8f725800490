import json
import os

import numpy as np
import pytest

from batchdrive.cli import main
from batchdrive.dataset import BatchDataset
from batchdrive.evalkit import read_density_csv, read_episodes, read_metrics


TINY_TRAIN = {
    "train": {
        "hidden": [8, 8],
        "icnn_hidden": [4, 4],
        "minibatch": 8,
        "iters_per_epoch": 2,
        "eval_episodes": 1,
    },
    "ddpg": {"hidden": [8, 8], "warmup": 10, "batch": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A collected dataset plus tiny trained runs for two variants."""
    base = tmp_path_factory.mktemp("cli")
    data = str(base / "parking.jsonl")
    assert main(["collect", "--env", "parking", "--steps", "60",
                 "--seed", "0", "--out", data]) == 0
    cfg_path = str(base / "tiny.json")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(TINY_TRAIN, fh)
    runs = str(base / "runs")
    for algo in ("bcq", "noisy_bcq"):
        assert main(["train", "--algo", algo, "--data", data,
                     "--out", runs, "--epochs", "2", "--eval-every", "1",
                     "--seeds", "0", "--config", cfg_path]) == 0
    return {"base": base, "data": data, "config": cfg_path, "runs": runs}


# ---------------------------------------------------------------------------
# collect


def test_collect_writes_header_count(workspace):
    ds = BatchDataset.load(workspace["data"])
    assert ds.count == 60
    assert ds.env_id == "parking"


def test_collect_rejects_zero_steps(tmp_path):
    code = main(["collect", "--env", "parking", "--steps", "0",
                 "--out", str(tmp_path / "d.jsonl")])
    assert code == 2


def test_collect_same_seed_byte_identical(tmp_path):
    a = str(tmp_path / "a.jsonl")
    b = str(tmp_path / "b.jsonl")
    for out in (a, b):
        assert main(["collect", "--env", "parking", "--steps", "25",
                     "--seed", "3", "--out", out]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_collect_unknown_env_exits_2(tmp_path, capsys):
    code = main(["collect", "--env", "racetrack", "--steps", "5",
                 "--out", str(tmp_path / "d.jsonl")])
    assert code == 2


# ---------------------------------------------------------------------------
# train


def test_train_run_layout(workspace):
    run = os.path.join(workspace["runs"], "bcq_seed0")
    for name in ("config.json", "metrics.csv", "episodes.csv",
                 "diagnostics.csv", "checkpoint_final.json"):
        assert os.path.exists(os.path.join(run, name)), name
    metrics = read_metrics(os.path.join(run, "metrics.csv"))
    assert len(metrics) == 2  # epochs 2, eval every 1
    assert metrics[-1]["variant"] == "bcq"
    assert os.path.exists(os.path.join(workspace["runs"], "run_config.json"))


def test_train_unknown_algo_exits_2(workspace, capsys):
    code = main(["train", "--algo", "dqn", "--data", workspace["data"],
                 "--out", str(workspace["base"] / "x")])
    assert code == 2
    err = capsys.readouterr().err
    assert "safe_bcq" in err and "ddpg-online" in err


def test_train_missing_dataset_exits_2(workspace):
    code = main(["train", "--algo", "bcq", "--data", "/nope.jsonl",
                 "--out", str(workspace["base"] / "x")])
    assert code == 2


def test_train_rerun_metrics_identical(workspace, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = str(tmp_path / name)
        assert main(["train", "--algo", "bcq", "--data", workspace["data"],
                     "--out", out, "--epochs", "1", "--eval-every", "1",
                     "--seeds", "1", "--config", workspace["config"]]) == 0
        outs.append(os.path.join(out, "bcq_seed1", "metrics.csv"))
    assert open(outs[0], "rb").read() == open(outs[1], "rb").read()


def test_train_env_var_overrides_default(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("BATCHDRIVE_EPOCHS", "1")
    out = str(tmp_path / "envrun")
    assert main(["train", "--algo", "bcq", "--data", workspace["data"],
                 "--out", out, "--eval-every", "1", "--seeds", "0",
                 "--config", workspace["config"]]) == 0
    doc = json.load(open(os.path.join(out, "run_config.json")))
    assert doc["resolved"]["epochs"] == {"value": 1, "source": "env"}
    metrics = read_metrics(os.path.join(out, "bcq_seed0", "metrics.csv"))
    assert len(metrics) == 1


def test_flag_beats_config_file(workspace, tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    cfg = dict(TINY_TRAIN, epochs=5)
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    out = str(tmp_path / "flagged")
    assert main(["train", "--algo", "bcq", "--data", workspace["data"],
                 "--out", out, "--epochs", "1", "--eval-every", "1",
                 "--seeds", "0", "--config", cfg_path]) == 0
    doc = json.load(open(os.path.join(out, "run_config.json")))
    assert doc["resolved"]["epochs"] == {"value": 1, "source": "flag"}


def test_train_ddpg_online(workspace, tmp_path):
    out = str(tmp_path / "ddpg")
    assert main(["train", "--algo", "ddpg-online", "--data",
                 workspace["data"], "--out", out, "--epochs", "1",
                 "--eval-every", "1", "--seeds", "0",
                 "--config", workspace["config"]]) == 0
    run = os.path.join(out, "ddpg-online_seed0")
    metrics = read_metrics(os.path.join(run, "metrics.csv"))
    assert metrics[0]["variant"] == "ddpg-online"
    assert os.path.exists(os.path.join(run, "checkpoint_final.json"))


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_runs_and_counts_episodes(workspace):
    out = str(workspace["base"] / "eval_out")
    assert main(["evaluate", "--run", workspace["runs"],
                 "--episodes", "2", "--out", out]) == 0
    metrics = read_metrics(os.path.join(out, "metrics.csv"))
    episodes = read_episodes(os.path.join(out, "episodes.csv"))
    assert len(metrics) == 2  # bcq and noisy_bcq runs
    assert len(episodes) == 4  # two episodes per run
    variants = {m["variant"] for m in metrics}
    assert variants == {"bcq", "noisy_bcq"}


def test_evaluate_missing_checkpoint_exits_1(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    code = main(["evaluate", "--run", str(empty)])
    assert code == 1
    assert "checkpoint_final.json" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# density


def test_density_single_transition_single_cell(tmp_path, workspace):
    ds = BatchDataset.load(workspace["data"])
    one = BatchDataset("parking", ds.obs_dim, ds.act_dim, seed=0)
    one.append(ds.transitions[0])
    data_path = str(tmp_path / "one.jsonl")
    one.save(data_path)
    out = str(tmp_path / "density.csv")
    assert main(["density", "--data", data_path, "--bins", "5",
                 "--out", out]) == 0
    grid = read_density_csv(out)
    assert grid.counts.sum() == 1
    assert (grid.counts > 0).sum() == 1


def test_density_from_checkpoint(tmp_path, workspace):
    ckpt = os.path.join(workspace["runs"], "noisy_bcq_seed0",
                        "checkpoint_final.json")
    out = str(tmp_path / "density.csv")
    assert main(["density", "--checkpoint", ckpt, "--episodes", "1",
                 "--seed", "1", "--out", out]) == 0
    grid = read_density_csv(out)
    assert grid.counts.sum() > 0


def test_density_requires_one_source(tmp_path, workspace):
    out = str(tmp_path / "d.csv")
    assert main(["density", "--out", out]) == 2
    assert main(["density", "--data", workspace["data"], "--checkpoint",
                 "x.json", "--out", out]) == 2


# ---------------------------------------------------------------------------
# report


def test_report_rows_per_variant(workspace, tmp_path, capsys):
    out = str(tmp_path / "summary.csv")
    assert main(["report", "--runs", workspace["runs"], "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "bcq" in printed and "noisy_bcq" in printed
    lines = open(out).read().strip().splitlines()
    assert len(lines) == 3  # header plus one row per variant


def test_report_empty_dir_exits_1(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--runs", str(empty)]) == 1


def test_no_command_exits_2():
    assert main([]) == 2
