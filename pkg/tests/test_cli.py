import csv
import json
import math
import re

import numpy as np
import pytest

from bsdqn.cli import METRICS_HEADER, read_metrics_csv, run_command, write_metrics_csv
from bsdqn.config import parse_config
from bsdqn.harness import EpisodeRecord, train
from bsdqn.nn import load_file

ORACLE_CFG = """\
K = 4
n_st = 1
queue_capacity = 5
energy_capacity = 5
idle_min = 1
idle_max = 3
st.1.lambda = 0.8
"""

TINY_TRAIN = ORACLE_CFG + """\
hidden = 16
replay_capacity = 5000
learn_start = 200
target_sync_every = 1000
eps_decay_steps = 3000
train_iterations = 6000
eval_episodes = 40
"""


@pytest.fixture
def oracle_file(tmp_path):
    path = tmp_path / "oracle.cfg"
    path.write_text(ORACLE_CFG)
    return path


def test_solve_writes_values(tmp_path, oracle_file, capsys):
    assert run_command(["solve", "--config", str(oracle_file), "--out", str(tmp_path / "vi")]) == 0
    rows = list(csv.DictReader((tmp_path / "vi" / "values.csv").open(encoding="utf-8")))
    assert len(rows) == 108
    assert "states=108" in capsys.readouterr().out


def test_solve_refuses_huge_instance(tmp_path, capsys):
    path = tmp_path / "big.cfg"
    path.write_text("n_st = 4\n")
    assert run_command(["solve", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "states" in capsys.readouterr().err


def test_train_then_eval_round_trip(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_TRAIN)
    out = tmp_path / "run"
    assert run_command(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["total_steps"] == 6000 and summary["episodes"] == 30

    rows = read_metrics_csv(out / "metrics.csv")
    assert len(rows) == 30 and list(rows[0]) == METRICS_HEADER

    resolved = parse_config(out / "config.resolved")
    assert resolved.seed == 3 and resolved.agent.hidden == 16

    net, opt = load_file(out / "model.bsdqn")
    assert net.dims == (3, 16, 15) and opt.kind == "adam" and opt.step > 0

    capsys.readouterr()
    assert run_command(["eval", "--model", str(out / "model.bsdqn"), "--config", str(cfg_path),
                        "--episodes", "40", "--seed", "99"]) == 0
    m = re.search(r"mean_pkts=(\S+) stderr=(\S+)", capsys.readouterr().out)
    mean, se = float(m.group(1)), float(m.group(2))
    assert abs(mean - summary["eval_mean"]) < 3 * math.hypot(se, summary["eval_stderr"])


def test_config_resolved_reproduces_run(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_TRAIN.replace("train_iterations = 6000", "train_iterations = 1000")
                        .replace("eval_episodes = 40", "eval_episodes = 2"))
    out = tmp_path / "run"
    assert run_command(["train", "--config", str(cfg_path), "--seed", "5", "--out", str(out)]) == 0
    cfg = parse_config(out / "config.resolved")
    summary, _ = train(cfg.env, cfg.agent, cfg.harness, cfg.seed)
    rows = read_metrics_csv(out / "metrics.csv")
    assert [int(r["reward_pkts"]) for r in rows] == [r.reward for r in summary.records]
    assert json.loads((out / "summary.json").read_text())["eval_mean"] == summary.eval_mean


def test_eval_rejects_mismatched_model(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_TRAIN.replace("train_iterations = 6000", "train_iterations = 0")
                        .replace("eval_episodes = 40", "eval_episodes = 0"))
    out = tmp_path / "run"
    assert run_command(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert run_command(["eval", "--model", str(out / "model.bsdqn"), "--episodes", "1"]) == 2
    assert "do not fit" in capsys.readouterr().err


def test_unknown_subcommand():
    assert run_command(["fly"]) != 0


def test_bad_flag_value():
    assert run_command(["train", "--out", "x", "--agent", "rainbow"]) != 0


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("gamma = 1.5\n")
    assert run_command(["solve", "--config", str(path)]) == 2
    assert "bad.cfg:1: gamma" in capsys.readouterr().err


def test_sweep_table2_smoke(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_TRAIN.replace("train_iterations = 6000", "train_iterations = 400")
                        .replace("eval_episodes = 40", "eval_episodes = 2"))
    out = tmp_path / "sweep"
    assert run_command(["sweep", "--config", str(cfg_path), "--hidden", "4,8", "--optimizers", "sgd,adam",
                        "--seeds", "2", "--out", str(out)]) == 0
    runs = list(csv.DictReader((out / "runs.csv").open()))
    summary = list(csv.DictReader((out / "summary.csv").open()))
    assert len(runs) == 8 and len(summary) == 4
    assert {r["method"] for r in summary} == {"DQN-SGD4", "DQN-SGD8", "DQN-Adam4", "DQN-Adam8"}
    for row in summary:
        if row["optimizer"] == "adam":
            assert float(row["speedup"]) == 1.0
    assert len(list(out.glob("metrics_*.csv"))) == 8


# --- metrics CSV --------------------------------------------------------------------

def test_metrics_csv_header_only(tmp_path):
    write_metrics_csv([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == b"episode,steps,reward_pkts,mean_loss,epsilon,wall_ms\n"


def test_metrics_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    records = [EpisodeRecord(i + 1, int(rng.integers(0, 3000)), float(rng.uniform()), 0.9 - i * 1e-3, 200,
                             float(rng.uniform(1, 100))) for i in range(25)]
    records[0].mean_loss = None
    write_metrics_csv(records, tmp_path / "m.csv")
    raw = (tmp_path / "m.csv").read_bytes()
    assert b"\r" not in raw
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert len(rows) == 25
    assert [int(r["reward_pkts"]) for r in rows] == [r.reward for r in records]
    assert rows[0]["mean_loss"] == ""
    for r, rec in zip(rows[1:], records[1:]):
        assert float(r["mean_loss"]) == pytest.approx(rec.mean_loss, rel=5e-6)
        assert len(r["mean_loss"].replace(".", "").replace("-", "").lstrip("0").split("e")[0]) <= 6


def test_metrics_csv_unwritable(tmp_path):
    with pytest.raises(OSError, match="m.csv"):
        write_metrics_csv([], tmp_path / "missing" / "m.csv")


def test_sweep_table3_smoke(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_TRAIN.replace("train_iterations = 6000", "train_iterations = 200")
                        .replace("eval_episodes = 40", "eval_episodes = 1"))
    out = tmp_path / "sweep"
    assert run_command(["sweep", "--config", str(cfg_path), "--grid", "table3", "--seeds", "1",
                        "--out", str(out)]) == 0
    summary = {r["method"]: r for r in csv.DictReader((out / "summary.csv").open())}
    assert list(summary) == ["DQN-SGD32", "DQN-Adam128", "DoubleDQN", "DuelDQN", "DoubleDuelDQN"]
    assert float(summary["DoubleDQN"]["speedup"]) == 1.0
    assert summary["DoubleDuelDQN"]["layers"] == "3" and summary["DQN-SGD32"]["hidden"] == "32"
    assert "convergence_speedup" in summary["DuelDQN"]
