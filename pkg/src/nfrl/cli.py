"""Command-line operator surface.

Subcommands: gen-data, train, eval, check, plot-export. Output root is
./runs unless NFRL_RUN_DIR is set. Exit codes: 0 success, 2 usage or
config problem, 3 numeric failure during training (the last cadence
checkpoint stays on disk).
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from pathlib import Path

import numpy as np

from .agents import FlowPolicy, evaluate_policy
from .checkpoint import load_flow_checkpoint
from .checks import run_suite
from .config import load_config
from .envs import (PointMassEnv, generate_expert_dataset, make_maze,
                   save_dataset)
from .errors import (CheckpointError, ConfigError, ContractError, NfrlError,
                     NumericError, StateError)
from .metrics import METRICS_NAME, export_long_table
from .runners import ACTION_DIM, STATE_DIM, run_training

USAGE_EXIT = 2
NUMERIC_EXIT = 3


def run_root() -> Path:
    return Path(os.environ.get("NFRL_RUN_DIR", "runs"))


def _default_run_dir(algorithm: str, seed: int) -> Path:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return run_root() / f"{algorithm}-{stamp}-s{seed}"


def cmd_gen_data(args) -> int:
    env = PointMassEnv(make_maze(args.env))
    weights = tuple(float(x) for x in args.mode_mix.split(","))
    names = sorted(env.maze.goals)
    if len(weights) != len(names):
        raise ConfigError(
            f"--mode-mix has {len(weights)} weights, maze {args.env!r} has "
            f"{len(names)} goal modes ({', '.join(names)})")
    mix = dict(zip(names, weights))
    rng = np.random.default_rng(args.seed)
    trajs, modes = generate_expert_dataset(env, args.n_traj, mix, rng,
                                           noise_std=args.noise_std)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, trajs, env_id=args.env, seed=args.seed, modes=modes)
    print(f"wrote {len(trajs)} trajectories to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    # dedicated flags are sugar for --set entries, applied last
    for name in ("algo", "env", "dataset", "steps", "seed", "eval_every"):
        val = getattr(args, name)
        if val is not None:
            key = "algorithm" if name == "algo" else name
            overrides.append(f"{key}={val}")
    cfg = load_config(args.config or [], overrides)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(
        cfg.algorithm, cfg.seed)
    run_training(cfg, run_dir)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    model, step = load_flow_checkpoint(args.checkpoint)
    if model.d != ACTION_DIM:
        raise ConfigError(
            f"checkpoint models a {model.d}-dim event, actions are "
            f"{ACTION_DIM}-dim")
    env = PointMassEnv(make_maze(args.env))
    if args.goal not in env.maze.goals:
        raise ConfigError(f"field goal: maze {args.env!r} has no goal "
                          f"named {args.goal!r}")
    goal = np.asarray(env.maze.goals[args.goal], dtype=np.float64)
    if model.cfg.raw_cond_dim == STATE_DIM:
        policy = FlowPolicy(model, goal=None, denoise=args.denoise,
                            noise_std=args.noise_std)
    elif model.cfg.raw_cond_dim == STATE_DIM + goal.size:
        policy = FlowPolicy(model, goal=goal, denoise=args.denoise,
                            noise_std=args.noise_std)
    else:
        raise ConfigError(
            f"checkpoint conditions on {model.cfg.raw_cond_dim} dims; env "
            f"{args.env!r} offers {STATE_DIM} (state) or "
            f"{STATE_DIM + goal.size} (state plus goal)")
    rep = evaluate_policy(policy, env, goal, n_episodes=args.episodes,
                          seed=args.seed, workers=args.workers)
    lines = [f"checkpoint={args.checkpoint} step={step} env={args.env} "
             f"episodes={rep.n_episodes} denoise={int(args.denoise)}",
             f"success_rate={rep.success_rate}",
             f"return_mean={rep.return_mean}",
             f"return_std={rep.return_std}"]
    for i, (ok, ret, length) in enumerate(
            zip(rep.successes, rep.returns, rep.lengths)):
        lines.append(f"episode={i} success={int(ok)} return={ret} len={length}")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    out = Path(args.out) if args.out else Path(
        str(args.checkpoint) + ".eval.txt")
    out.write_text(report)
    return 0


def cmd_check(args) -> int:
    results = run_suite(args.suite, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_plot_export(args) -> int:
    metrics = Path(args.run) / METRICS_NAME
    if not metrics.exists():
        raise ConfigError(f"no metric series at {metrics}")
    out = Path(args.out) if args.out else Path(args.run) / "metrics-long.csv"
    rows = export_long_table(metrics, out)
    print(f"wrote {rows} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nfrl",
        description="Flow-policy training harness: data generation, "
                    "training, evaluation, and numerical self-checks.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll scripted experts into a dataset")
    g.add_argument("--env", default="open")
    g.add_argument("--n-traj", type=int, default=100)
    g.add_argument("--mode-mix", default="1.0",
                   help="comma-separated weights over the env's expert modes")
    g.add_argument("--noise-std", type=float, default=0.04)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training loop into a run dir")
    t.add_argument("--config", action="append",
                   help="key=value file; repeatable, later files win")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="single override; repeatable, applied last")
    t.add_argument("--algo", default=None)
    t.add_argument("--env", default=None)
    t.add_argument("--dataset", default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=None)
    t.add_argument("--run-dir", default=None,
                   help="explicit run directory (default: under the run root)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", default="open")
    e.add_argument("--goal", default="default")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--denoise", action="store_true")
    e.add_argument("--noise-std", type=float, default=0.1,
                   help="score-correction scale when denoising")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("check", help="run a numerical self-check suite")
    c.add_argument("suite",
                   help="jacobian | gradients | normalization | tabular | "
                        "occupancy | all")
    c.add_argument("--quick", action="store_true")
    c.set_defaults(fn=cmd_check)

    x = sub.add_parser("plot-export",
                       help="export a run's metrics as a tidy long CSV")
    x.add_argument("--run", required=True)
    x.add_argument("--out", default=None)
    x.set_defaults(fn=cmd_plot_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_EXIT
    except (ConfigError, ContractError, StateError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except NfrlError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
