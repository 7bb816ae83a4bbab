import csv
import json
from pathlib import Path

import pytest

from cellsched import cli

ROOT = Path(__file__).resolve().parent.parent
FIXTURE = str(ROOT / "configs" / "fixture.yaml")
FAST = ["--set", "sim.slots_per_frame=10", "--set", "sim.n_nodes=4", "--set", "sim.cells_per_node=2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_default_config(tmp_path):
    assert run("simulate", "--frames", 5, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert 0.0 <= summary["throughput"] <= 1.0 and summary["frames"] == 5
    assert len((tmp_path / "frames.jsonl").read_text().splitlines()) == 5
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"] == "ok" and man["finished"] and man["config"]["sim"]["n_nodes"] == 10


def test_simulate_seed_determinism(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--frames", 3, "--seed", 7, *FAST, "--out", tmp_path / name) == 0
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert a == b and a["seed"] == 7
    assert (tmp_path / "a" / "frames.jsonl").read_bytes() == (tmp_path / "b" / "frames.jsonl").read_bytes()


def test_simulate_static_and_out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CELLSCHED_OUT", str(tmp_path / "env"))
    assert run("simulate", "--frames", 1, "--policy", "static", *FAST) == 0
    assert (tmp_path / "env" / "summary.json").exists()


@pytest.mark.parametrize("argv", [
    ["simulate", "--config", "/nonexistent.yaml"],
    ["simulate", "--set", "sim.n_nodes=0"],
    ["simulate", "--set", "sim.bogus=1"],
    ["simulate", "--set", "nonsense"],
    ["verify", "--suite", "nope"],
    ["simulate", "--policy", "checkpoint"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert run(*argv, "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_section(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("simulation: {n_nodes: 3}\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 2


def test_verify_gradients(tmp_path, capsys):
    assert run("verify", "--suite", "gradients", "--set", "verify.gradient_points=3", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "verify_gradients.json").read_text())
    assert max(rep["critic_max_rel_err"], rep["actor_max_rel_err"]) < 1e-4
    assert "gradients: PASS" in capsys.readouterr().out


def test_verify_small_suites(tmp_path):
    assert run("verify", "--suite", "all", "--instances", 5, "--samples", 5, "--set", "verify.gradient_points=2",
               "--out", tmp_path) == 0
    for s in cli.SUITES:
        assert json.loads((tmp_path / f"verify_{s}.json").read_text())["violations"] == 0
    assert not list(tmp_path.glob("counterexamples_*"))


def test_verify_failure_exit_1(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "GRADIENT_TOL", 0.0)
    assert run("verify", "--suite", "gradients", "--set", "verify.gradient_points=1", "--out", tmp_path) == 1
    assert (tmp_path / "counterexamples_gradients.json").exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed"


def test_bench_csv_columns(tmp_path):
    assert run("bench", "--set", "bench.nodes=[3]", "--set", "bench.repeats=1", "--out", tmp_path) == 0
    with open(tmp_path / "bench.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert tuple(reader.fieldnames) == cli.BENCH_COLUMNS
    assert len(rows) == 1 and int(rows[0]["nodes"]) == 3


def test_bench_single_channel_is_degenerate():
    cfg = cli.resolve_config(None, ["sim.n_channels=1", "bench.nodes=[4]", "bench.repeats=5"], 0, None)
    row = cli.bench_rows(cfg)[0]
    # same instance either way, so only timing noise separates the two
    assert 0.5 < row["speedup"] < 2.0


def test_train_reproducible(tmp_path):
    tiny = ["--config", FIXTURE, "--set", "train.episodes=3", "--set", "train.eval_episodes=2",
            "--set", "train.nmac.exploration_episodes=1", "--set", "train.nmac.batch_size=8"]
    for name in ("a", "b"):
        assert run("train", *tiny, "--out", tmp_path / name) == 0
    a = json.loads((tmp_path / "a" / "eval.json").read_text())
    b = json.loads((tmp_path / "b" / "eval.json").read_text())
    assert a == b and a["updates"] > 0
    assert len((tmp_path / "a" / "learning_curve.jsonl").read_text().splitlines()) == 3
    assert (tmp_path / "a" / "nmac.json").exists()
    assert run("simulate", "--config", FIXTURE, "--frames", 1, "--policy", "checkpoint",
               "--checkpoint", tmp_path / "a" / "nmac.json", "--out", tmp_path / "c") == 0


def test_train_empty_run(tmp_path):
    assert run("train", "--config", FIXTURE, "--set", "train.episodes=0", "--set", "train.eval_episodes=1",
               "--out", tmp_path) == 0
    assert (tmp_path / "learning_curve.jsonl").read_text() == ""


def test_export_plots_missing_or_empty(tmp_path):
    assert run("export-plots", tmp_path / "missing") == 2
    (tmp_path / "empty").mkdir()
    assert run("export-plots", tmp_path / "empty") == 2


def test_export_plots_round_trip(tmp_path):
    m = tmp_path / "m"
    assert run("simulate", "--frames", 2, *FAST, "--out", m) == 0
    assert run("sweep", "--kind", "bandwidth", "--set", "sweep.frames=1", "--set", "sweep.bandwidth=[125, 12.5]",
               *FAST, "--out", m) == 0
    assert run("export-plots", m, "--out", tmp_path / "p") == 0
    frames = [json.loads(l) for l in (m / "frames.jsonl").read_text().splitlines()]
    with open(tmp_path / "p" / "per_channel_share.csv", newline="") as fh:
        share = list(csv.DictReader(fh))
    assert len(share) == sum(len(r["channels"]) for r in frames)
    for rec in frames:
        s = sum(float(r["share"]) for r in share if int(r["frame"]) == rec["frame"])
        assert s <= 1.0 + 1e-12 and s == pytest.approx(rec["throughput"])
    with open(tmp_path / "p" / "bandwidth_sweep.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2
