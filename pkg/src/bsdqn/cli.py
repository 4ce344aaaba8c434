"""Command line entry point: ``bsdqn train|eval|solve|sweep``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .agent import masked_argmax
from .config import ConfigError, RunConfig, format_config, parse_config, parse_config_text
from .env import encode_state, enumerate_actions
from .harness import EpisodeRecord, compute_speedup, evaluate, train
from .mdp import StateSpaceTooLarge, value_iteration, write_value_csv
from .nn import FormatError, forward, load_file, save_file

METRICS_HEADER = ["episode", "steps", "reward_pkts", "mean_loss", "epsilon", "wall_ms"]

# Table-3 style comparison: label -> config overrides
TABLE3_METHODS = {
    "DQN-SGD32": {"agent": "dqn", "optimizer": "sgd", "hidden": 32, "layers": 1},
    "DQN-Adam128": {"agent": "dqn", "optimizer": "adam", "hidden": 128, "layers": 1},
    "DoubleDQN": {"agent": "double", "optimizer": "adam", "hidden": 32, "layers": 3},
    "DuelDQN": {"agent": "duel", "optimizer": "adam", "hidden": 32, "layers": 3},
    "DoubleDuelDQN": {"agent": "doubleduel", "optimizer": "adam", "hidden": 32, "layers": 3},
}


def _g(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def write_metrics_csv(records: list[EpisodeRecord], path) -> None:
    """One row per episode; floats carry 6 significant digits."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for r in records:
                w.writerow([r.episode, r.steps, r.reward, _g(r.mean_loss), _g(r.epsilon), _g(r.wall_ms)])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc.strerror}") from exc


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class GreedyNetworkPolicy:
    """Greedy feasible action of a stand-alone Q-network."""

    def __init__(self, net, env_cfg):
        self.net = net
        self.env_cfg = env_cfg
        self.actions = enumerate_actions(env_cfg)
        if net.output_dim != self.actions.size or net.input_dim != 1 + 2 * env_cfg.N:
            raise ValueError(
                f"model dims {net.dims} do not fit this environment "
                f"(input {1 + 2 * env_cfg.N}, {self.actions.size} actions)"
            )

    def __call__(self, s) -> int:
        q = forward(self.net, encode_state(s, self.env_cfg))
        return int(masked_argmax(q, self.actions.mask(s.b)))


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for flag, key in (("agent", "agent"), ("optimizer", "optimizer"), ("hidden", "hidden"),
                      ("layers", "layers"), ("iterations", "train_iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _load(args) -> RunConfig:
    overrides = _overrides(args)
    if args.config:
        return parse_config(args.config, overrides)
    return parse_config_text("", "<defaults>", overrides)


def _summary_dict(summary) -> dict:
    return {
        "seed": summary.seed,
        "episodes": len(summary.records),
        "total_steps": summary.total_steps,
        "convergence_episode": summary.convergence_episode,
        "converged_mean": summary.converged_mean,
        "final_mean": summary.final_mean,
        "eval_mean": summary.eval_mean,
        "eval_stderr": summary.eval_stderr,
        "wall_s": summary.wall_s,
    }


def cmd_train(args) -> int:
    cfg = _load(args)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_config(cfg.with_overrides(seed=seed)), encoding="utf-8")
    summary, agent = train(cfg.env, cfg.agent, cfg.harness, seed)
    write_metrics_csv(summary.records, out / "metrics.csv")
    save_file(out / "model.bsdqn", agent.online, agent.opt)
    info = _summary_dict(summary)
    (out / "summary.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(
        f"episodes={info['episodes']} steps={info['total_steps']} "
        f"convergence={info['convergence_episode']} eval_mean={info['eval_mean']} "
        f"eval_stderr={info['eval_stderr']}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    net, _ = load_file(args.model)
    policy = GreedyNetworkPolicy(net, cfg.env)
    seed = cfg.seed if args.seed is None else args.seed
    mean, stderr = evaluate(policy, cfg.env, args.episodes, np.random.default_rng(seed))
    print(f"episodes={args.episodes} mean_pkts={mean:.6g} stderr={stderr:.6g}")
    return 0


def cmd_solve(args) -> int:
    cfg = _load(args)
    table = value_iteration(cfg.env, cfg.agent.gamma, args.tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_value_csv(table, out / "values.csv")
    print(f"states={table.index.size} iterations={table.iterations} residual={table.residuals[-1]:.3g} "
          f"written={out / 'values.csv'}")
    return 0


def _run_cell(job):
    env_label, method, text, seed = job
    cfg = parse_config_text(text, f"<{env_label}/{method}>")
    summary, _ = train(cfg.env, cfg.agent, cfg.harness, seed)
    return env_label, method, cfg.values, _summary_dict(summary), summary.records


def _sweep_jobs(base: RunConfig, args):
    envs = [int(n) for n in args.envs.split(",")] if args.envs else [base.env.N]
    cells = []
    if args.grid == "table3":
        for label, over in TABLE3_METHODS.items():
            cells.append((label, over))
    else:
        for opt in args.optimizers.split(","):
            for h in args.hidden_list.split(","):
                cells.append((f"DQN-{opt.upper() if opt == 'sgd' else opt.capitalize()}{int(h)}",
                              {"agent": "dqn", "optimizer": opt, "hidden": int(h), "layers": 1}))
    jobs = []
    for n in envs:
        env_over = {} if n == base.env.N else {"n_st": n}
        for label, over in cells:
            # re-resolve from the user's raw file so n_st changes re-spread the arrival rates
            cfg = parse_config_text(args.raw_text, args.config or "<defaults>",
                                    {**_overrides(args), **{k: str(v) for k, v in {**env_over, **over}.items()}})
            for run in range(args.seeds):
                jobs.append((f"{n}ST", label, format_config(cfg), cfg.seed + run))
    return jobs


def _summarise(results, grid: str, baseline: str | None):
    cells = {}
    for env_label, method, values, info, _ in results:
        cell = cells.setdefault((env_label, method), {"values": values, "runs": []})
        cell["runs"].append(info)
    rows = []
    for (env_label, method), cell in cells.items():
        v, runs = cell["values"], cell["runs"]
        thr = [r["eval_mean"] for r in runs if r["eval_mean"] is not None]
        conv = [r["convergence_episode"] for r in runs if r["convergence_episode"] is not None]
        rows.append({
            "environment": env_label, "method": method, "optimizer": v["optimizer"], "hidden": v["hidden"],
            "layers": v["layers"], "runs": len(runs),
            "mean_throughput": float(np.mean(thr)) if thr else math.nan,
            "mean_convergence_episode": float(np.mean(conv)) if conv else math.nan,
            "converged_runs": len(conv),
        })
    for row in rows:
        if grid == "table3":
            base_label = baseline or "DoubleDQN"
            ref = [r for r in rows if r["environment"] == row["environment"] and r["method"] == base_label]
        else:
            base_opt = baseline or "adam"
            ref = [r for r in rows if r["environment"] == row["environment"] and r["hidden"] == row["hidden"]
                   and r["optimizer"] == base_opt]
        row["speedup"] = _ratio(row["mean_throughput"], ref[0]["mean_throughput"] if ref else math.nan)
        row["convergence_speedup"] = _ratio(row["mean_convergence_episode"],
                                            ref[0]["mean_convergence_episode"] if ref else math.nan)
    return rows


def _ratio(value: float, reference: float) -> float:
    if math.isnan(value) or math.isnan(reference) or reference <= 0:
        return math.nan
    return compute_speedup(value, reference)


def cmd_sweep(args) -> int:
    args.raw_text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    base = _load(args)
    jobs = _sweep_jobs(base, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers or int(os.environ.get("BSDQN_THREADS", "1"))
    cap = os.environ.get("BSDQN_THREADS")
    if cap:
        workers = min(workers, int(cap))
    results = []
    # single writer: workers return their records, this process writes every file
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["environment", "method", "seed", "episodes", "convergence_episode", "converged_mean",
                    "final_mean", "eval_mean", "eval_stderr"])
        if workers > 1:
            pool = ProcessPoolExecutor(max_workers=workers)
            stream = pool.map(_run_cell, jobs)
        else:
            pool, stream = None, map(_run_cell, jobs)
        try:
            for env_label, method, values, info, records in stream:
                results.append((env_label, method, values, info, records))
                write_metrics_csv(records, out / f"metrics_{env_label}_{method}_seed{info['seed']}.csv")
                w.writerow([env_label, method, info["seed"], info["episodes"], info["convergence_episode"],
                            info["converged_mean"], info["final_mean"], info["eval_mean"], info["eval_stderr"]])
                fh.flush()
        finally:
            if pool is not None:
                pool.shutdown()
    rows = _summarise(results, args.grid, args.baseline)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['environment']:>4} {r['method']:<14} thr={r['mean_throughput']:.1f} "
              f"conv={r['mean_convergence_episode']:.0f} speedup={r['speedup']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsdqn", description="Backscatter CRN scheduling with deep Q-learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, agent_flags=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if agent_flags:
            p.add_argument("--agent", choices=["dqn", "double", "duel", "doubleduel"])
            p.add_argument("--optimizer", choices=["sgd", "adam"])
            p.add_argument("--layers", type=int)
            p.add_argument("--iterations", type=int, help="training steps (train_iterations)")

    p = sub.add_parser("train", help="train one agent")
    common(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model greedily")
    common(p, agent_flags=False)
    p.add_argument("--model", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="exact value iteration on a small instance")
    common(p, agent_flags=False)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="optimizer/width grid or DQN-variant comparison")
    common(p)
    p.add_argument("--hidden", dest="hidden_list", default="16,32,64,128,256")
    p.add_argument("--optimizers", default="sgd,adam")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--grid", choices=["table2", "table3"], default="table2")
    p.add_argument("--envs", help="comma-separated ST counts, e.g. 2,3")
    p.add_argument("--baseline", help="speedup reference: optimizer (table2) or method label (table3)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FormatError, StateSpaceTooLarge, ValueError, OSError) as exc:
        print(f"bsdqn {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
