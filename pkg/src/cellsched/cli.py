"""Batch command-line entry point.

Exit codes: 0 success, 1 verification failure or runtime error, 2 usage or
configuration error.  Output directory and log level may come from the
CELLSCHED_OUT and CELLSCHED_LOG_LEVEL environment variables.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import statistics
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .jsord import greedy_orchestrate, solve_all_channels
from .model import ConfigError
from .nmac import Nmac, TrainConfig, gradient_check, train
from .oracle import (
    approximation_report,
    check_monotonicity,
    check_submodularity,
    instance_suite,
)
from .sim import (
    EdgeSim,
    NmacPolicy,
    RandomPolicy,
    SimConfig,
    SimEnv,
    StaticPolicy,
    evaluate_policy,
    run_episode,
)
from .traceio import SchemaError, TraceError, apply_overrides, export_instance, load_config

log = logging.getLogger("cellsched")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SUITES = ("monotonicity", "submodularity", "approximation", "gradients")
GRADIENT_TOL = 1e-4
BENCH_COLUMNS = ("nodes", "services", "decomposed_ms", "global_ms", "speedup")

DEFAULTS: dict = {
    "sim": {},
    "run": {"frames": 50, "policy": "random", "checkpoint": None},
    "train": {
        "episodes": 200,
        "frames_per_episode": 10,
        "eval_episodes": 20,
        "eval_seed_offset": 10_000,
        "nmac": {"batch_size": 32, "exploration_episodes": 20},
    },
    "bench": {"nodes": [4, 6, 8, 10], "cells_per_node": 2, "repeats": 5},
    "verify": {"instances": 200, "samples": 20, "gradient_points": 20},
    "sweep": {
        "frames": 5,
        "policy": "static",
        "heterogeneity": [0.0, 0.5, 1.0, 1.5],
        "bandwidth": [125.0, 62.5, 25.0, 12.5],
    },
}


class UsageError(Exception):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | None, overrides: list[str], seed: int | None, workers: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        doc = load_config(path)
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, doc)
    cfg = apply_overrides(cfg, overrides or [])
    if seed is not None:
        cfg["sim"]["seed"] = seed
        cfg["train"].setdefault("nmac", {})["seed"] = seed
    if workers is not None:
        cfg["sim"]["workers"] = workers
    cfg["sim"] = SimConfig.from_dict(cfg["sim"]).to_dict()  # validate and snapshot every field
    return cfg


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    finished: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=1, default=str))


def _out_dir(args, command: str) -> Path:
    out = Path(args.out or os.environ.get("CELLSCHED_OUT") or Path("runs") / command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1))


# simulate
def make_policy(kind: str, sim: EdgeSim, seed: int, checkpoint: str | None = None):
    if kind == "random":
        return RandomPolicy(sim.cfg.n_nodes, sim.cfg.action_dim, seed)
    if kind == "static":
        return StaticPolicy(sim)
    if kind == "checkpoint":
        if not checkpoint:
            raise UsageError("policy 'checkpoint' needs run.checkpoint")
        learner = Nmac.load(checkpoint)
        if learner.obs_dims != [sim.cfg.obs_dim] * sim.cfg.n_nodes:
            raise ConfigError("checkpoint does not match the simulation's observation schema")
        return NmacPolicy(learner)
    raise UsageError(f"unknown policy {kind!r}")


def cmd_simulate(cfg: dict, out: Path) -> int:
    sim_cfg = SimConfig.from_dict(cfg["sim"])
    run = cfg["run"]
    sim = EdgeSim(sim_cfg)
    policy = make_policy(run["policy"], sim, sim_cfg.seed, run.get("checkpoint"))
    frames_path = out / "frames.jsonl"
    with open(frames_path, "w") as fh:
        def emit(res):
            fh.write(json.dumps(res.record) + "\n")
            log.info("frame %d throughput %.4f", res.frame, res.record["throughput"])

        result = run_episode(sim, policy, int(run["frames"]), on_frame=emit)
    summary = result.metrics.summary()
    summary["policy"] = run["policy"]
    summary["seed"] = sim_cfg.seed
    _write_json(out / "summary.json", summary)
    return EXIT_OK


# train
def train_and_evaluate(cfg: dict, checkpoint: Path | None = None) -> dict:
    """Train NMAC on the configured system, then score trained vs random policies
    on the same held-out episode seeds."""
    sim_cfg = SimConfig.from_dict(cfg["sim"])
    tr = cfg["train"]
    tcfg = TrainConfig(**tr.get("nmac", {}))
    frames = int(tr["frames_per_episode"])
    n_eval = int(tr["eval_episodes"])
    offset = int(tr.get("eval_seed_offset", 10_000))

    evaluator = EdgeSim(sim_cfg)
    random_scores = evaluate_policy(
        evaluator, RandomPolicy(sim_cfg.n_nodes, sim_cfg.action_dim, tcfg.seed), n_eval, frames, offset
    )
    env = SimEnv(sim_cfg)
    learner, tlog = train(env, tcfg, int(tr["episodes"]), frames, checkpoint=checkpoint)
    trained_scores = evaluate_policy(evaluator, NmacPolicy(learner), n_eval, frames, offset)
    rmean, tmean = float(random_scores.mean()), float(trained_scores.mean())
    return {
        "learner": learner,
        "log": tlog,
        "random_scores": random_scores.tolist(),
        "trained_scores": trained_scores.tolist(),
        "random_mean": rmean,
        "trained_mean": tmean,
        "ratio": tmean / rmean if rmean > 0 else float("inf"),
    }


def cmd_train(cfg: dict, out: Path) -> int:
    ckpt = out / "nmac.json"
    res = train_and_evaluate(cfg, checkpoint=ckpt)
    if not ckpt.exists():
        res["learner"].save(ckpt)
    tlog = res["log"]
    with open(out / "learning_curve.jsonl", "w") as fh:
        for ep, r in enumerate(tlog.episode_rewards):
            fh.write(json.dumps({"episode": ep, "mean_reward": r}) + "\n")
    _write_json(out / "eval.json", {k: res[k] for k in
                                     ("random_scores", "trained_scores", "random_mean", "trained_mean", "ratio")}
                | {"updates": tlog.updates, "frames": tlog.frames})
    log.info("trained %.4f vs random %.4f (x%.3f)", res["trained_mean"], res["random_mean"], res["ratio"])
    return EXIT_OK


# verify
def run_suite(suite: str, n: int, samples: int, seed: int, gradient_points: int = 20) -> tuple[dict, list]:
    """Returns (report, counterexamples)."""
    bad = []
    if suite == "approximation":
        reports = []
        for s, inst in instance_suite(n, seed, "lemma1"):
            rep = approximation_report(inst, seed=s)
            reports.append(rep.to_dict())
            if not rep.bound_satisfied:
                bad.append({"instance_seed": s, "report": rep.to_dict(), "instance": export_instance(inst)})
        return {"suite": suite, "instances": n, "violations": len(bad), "reports": reports}, bad
    if suite in ("monotonicity", "submodularity"):
        cond = None if suite == "monotonicity" else "compute"
        check = check_monotonicity if suite == "monotonicity" else check_submodularity
        checked = 0
        for s, inst in instance_suite(n, seed, cond):
            for v in check(inst, samples, seed=s):
                bad.append({"instance_seed": s, "violation": v.to_dict(), "instance": export_instance(inst)})
            checked += 1
        return {"suite": suite, "instances": checked, "samples": samples, "violations": len(bad)}, bad
    if suite == "gradients":
        g = gradient_check(gradient_points, seed=seed)
        worst = max(g["critic_max_rel_err"], g["actor_max_rel_err"])
        if worst >= GRADIENT_TOL:
            bad.append({"max_rel_err": worst})
        return {"suite": suite, "violations": len(bad), "tolerance": GRADIENT_TOL} | g, bad
    raise UsageError(f"unknown suite {suite!r}")


def cmd_verify(cfg: dict, out: Path, suite: str, n: int | None, samples: int | None) -> int:
    v = cfg["verify"]
    n = int(v["instances"] if n is None else n)
    samples = int(v["samples"] if samples is None else samples)
    seed = int(cfg["sim"].get("seed", 0))
    suites = SUITES if suite == "all" else (suite,)
    failed = False
    for name in suites:
        t0 = time.perf_counter()
        report, bad = run_suite(name, n, samples, seed, int(v.get("gradient_points", 20)))
        report["seconds"] = time.perf_counter() - t0
        _write_json(out / f"verify_{name}.json", report)
        if bad:
            _write_json(out / f"counterexamples_{name}.json", bad)
            failed = True
        log.info("%s: %d violations", name, report["violations"])
        print(f"{name}: {'PASS' if not bad else 'FAIL'} ({report['violations']} violations)")
    return EXIT_FAIL if failed else EXIT_OK


# bench
def bench_rows(cfg: dict) -> list[dict]:
    b = cfg["bench"]
    rows = []
    for nodes in b["nodes"]:
        sim_cfg = SimConfig.from_dict(cfg["sim"] | {"n_nodes": int(nodes), "cells_per_node": int(b["cells_per_node"])})
        sim = EdgeSim(sim_cfg)
        sim.customize(RandomPolicy(sim_cfg.n_nodes, sim_cfg.action_dim, sim_cfg.seed).act(None))
        instances = [sim.instances[p] for p in sorted(sim.instances)]
        merged = sim.global_instance()
        dec, glob = [], []
        for _ in range(int(b["repeats"])):
            t0 = time.perf_counter()
            solve_all_channels(instances, workers=sim_cfg.workers)
            dec.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            greedy_orchestrate(merged)
            glob.append(time.perf_counter() - t0)
        d, g = statistics.median(dec) * 1e3, statistics.median(glob) * 1e3
        rows.append({"nodes": int(nodes), "services": len(sim.services), "decomposed_ms": d,
                     "global_ms": g, "speedup": g / d if d > 0 else float("inf")})
        log.info("bench nodes=%d decomposed %.1f ms global %.1f ms", nodes, d, g)
    return rows


def cmd_bench(cfg: dict, out: Path) -> int:
    rows = bench_rows(cfg)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# sweep
def cmd_sweep(cfg: dict, out: Path, kind: str) -> int:
    sw = cfg["sweep"]
    kinds = ("heterogeneity", "bandwidth") if kind == "all" else (kind,)
    for k in kinds:
        if k not in ("heterogeneity", "bandwidth"):
            raise UsageError(f"unknown sweep {k!r}")
        with open(out / f"sweep_{k}.jsonl", "w") as fh:
            for value in sw[k]:
                key = {"heterogeneity": "resource_heterogeneity", "bandwidth": "bandwidth_choices"}[k]
                val = [value] if k == "bandwidth" else value
                sim = EdgeSim(SimConfig.from_dict(cfg["sim"] | {key: val}))
                policy = make_policy(sw["policy"], sim, sim.cfg.seed, cfg["run"].get("checkpoint"))
                res = run_episode(sim, policy, int(sw["frames"]))
                cells = sum(r["n_cells"] for r in res.records)
                horiz = sum(c["horizontal_cells"] for r in res.records for c in r["channels"])
                fh.write(json.dumps({
                    "sweep": k, "value": value, "throughput": res.metrics.throughput_rate,
                    "arrived": res.metrics.total_arrived, "served": res.metrics.total_served,
                    "mean_reward": res.mean_reward,
                    "horizontal_fraction": horiz / cells if cells else 0.0,
                }) + "\n")
    return EXIT_OK


# export-plots
def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def export_plots(metrics_dir: Path, out: Path) -> list[Path]:
    written = []
    frames = metrics_dir / "frames.jsonl"
    if frames.exists():
        rows = []
        for rec in _read_jsonl(frames):
            for ch in rec["channels"]:
                rows.append({
                    "frame": rec["frame"], "channel_id": ch["channel_id"], "priority": ch["priority"],
                    "served": ch["served"], "arrived": rec["arrived"],
                    "share": ch["served"] / rec["arrived"] if rec["arrived"] else 0.0,
                    "frame_throughput": rec["throughput"],
                })
        p = out / "per_channel_share.csv"
        _write_csv(p, rows, ["frame", "channel_id", "priority", "served", "arrived", "share", "frame_throughput"])
        written.append(p)
    curve = metrics_dir / "learning_curve.jsonl"
    if curve.exists():
        p = out / "learning_curve.csv"
        _write_csv(p, _read_jsonl(curve), ["episode", "mean_reward"])
        written.append(p)
    for k in ("heterogeneity", "bandwidth"):
        src = metrics_dir / f"sweep_{k}.jsonl"
        if src.exists():
            p = out / f"{k}_sweep.csv"
            _write_csv(p, _read_jsonl(src), ["sweep", "value", "throughput", "arrived", "served",
                                              "mean_reward", "horizontal_fraction"])
            written.append(p)
    bench = metrics_dir / "bench.csv"
    if bench.exists():
        p = out / "runtime_bench.csv"
        with open(bench, newline="") as fh:
            _write_csv(p, list(csv.DictReader(fh)), list(BENCH_COLUMNS))
        written.append(p)
    return written


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="master seed (simulation and learner)")
    common.add_argument("--workers", type=int, help="processes for per-channel solves")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. sim.n_nodes=6 (repeatable)")
    common.add_argument("--out", help="output directory (default $CELLSCHED_OUT or runs/<command>)")

    ap = argparse.ArgumentParser(prog="cellsched", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default=os.environ.get("CELLSCHED_LOG_LEVEL", "WARNING"))
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the simulator with a fixed policy")
    p.add_argument("--frames", type=int)
    p.add_argument("--policy", choices=("random", "static", "checkpoint"))
    p.add_argument("--checkpoint")
    sub.add_parser("train", parents=[common], help="train NMAC and score it against a random policy")
    p = sub.add_parser("verify", parents=[common], help="oracle and gradient property suites")
    p.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)}, all")
    p.add_argument("--instances", type=int)
    p.add_argument("--samples", type=int)
    sub.add_parser("bench", parents=[common], help="decomposed vs global greedy runtime")
    p = sub.add_parser("sweep", parents=[common], help="heterogeneity/bandwidth parameter sweeps")
    p.add_argument("--kind", default="all", choices=("heterogeneity", "bandwidth", "all"))
    p = sub.add_parser("export-plots", parents=[common], help="turn metrics into tidy CSVs")
    p.add_argument("metrics_dir")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )

    if args.command == "export-plots":
        src = Path(args.metrics_dir)
        if not src.is_dir():
            print(f"error: metrics directory not found: {src}", file=sys.stderr)
            return EXIT_USAGE
        out = Path(args.out or src / "plots")
        out.mkdir(parents=True, exist_ok=True)
        written = export_plots(src, out)
        if not written:
            print(f"error: no metrics files in {src}", file=sys.stderr)
            return EXIT_USAGE
        for p in written:
            print(p)
        return EXIT_OK

    try:
        cfg = resolve_config(args.config, args.set, args.seed, args.workers)
        if args.command == "simulate":
            for k in ("frames", "policy", "checkpoint"):
                if getattr(args, k) is not None:
                    cfg["run"][k] = getattr(args, k)
        if args.command == "verify" and args.suite not in SUITES + ("all",):
            raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}, all")
    except (UsageError, ConfigError, SchemaError, TraceError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = _out_dir(args, args.command)
    manifest = RunManifest(args.command, cfg, int(cfg["sim"].get("seed", 0)), _version(), _now())
    manifest.write(out)
    try:
        if args.command == "simulate":
            code = cmd_simulate(cfg, out)
        elif args.command == "train":
            code = cmd_train(cfg, out)
        elif args.command == "verify":
            code = cmd_verify(cfg, out, args.suite, args.instances, args.samples)
        elif args.command == "bench":
            code = cmd_bench(cfg, out)
        else:
            code = cmd_sweep(cfg, out, args.kind)
        manifest.status = "ok" if code == EXIT_OK else "failed"
    except (UsageError, ConfigError, SchemaError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest.status, code = "error", EXIT_USAGE
    except Exception as exc:  # any module error: report and exit nonzero
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        manifest.status, code = "error", EXIT_FAIL
    manifest.finished = _now()
    manifest.outputs = sorted(str(p) for p in out.iterdir())
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
