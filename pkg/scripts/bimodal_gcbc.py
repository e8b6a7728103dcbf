"""Two-rooms bimodality comparison: flow GCBC against a diagonal-Gaussian
policy trained on the same relabeled batches.

Each goal mode of two_rooms is reachable through two doorways, so the expert
action distribution conditioned on (state, goal) is bimodal at the chamber
mouth. The flow keeps both routes; the Gaussian averages them into the wall
between the doors.

Run from the repo root:  python3 scripts/bimodal_gcbc.py --steps 6000
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nfrl.autodiff import Adam, Tape
from nfrl.agents import (FlowPolicy, GaussianActor, GaussianPolicy,
                         evaluate_policy, gauss_bc_update, gcbc_update)
from nfrl.envs import (PointMassEnv, ReplayBuffer, generate_expert_dataset,
                       make_maze)
from nfrl.flow import FlowConfig, FlowModel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-traj", type=int, default=300)
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--channels", type=int, default=48)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.time()

    env = PointMassEnv(make_maze("two_rooms"))
    trajs, _ = generate_expert_dataset(env, args.n_traj,
                                       {"left": 0.5, "right": 0.5},
                                       np.random.default_rng(args.seed),
                                       noise_std=0.04)
    buf = ReplayBuffer(capacity=len(trajs))
    for t in trajs:
        buf.add(t)
    print(f"dataset: {len(trajs)} trajectories [{time.time() - t0:.0f}s]")

    actor = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=6, blocks=4,
                                 channels=args.channels, encoder_layers=2,
                                 rep_dim=16, seed=args.seed + 1))
    gauss = GaussianPolicy(6, hidden=(64, 64), seed=args.seed + 2)
    a_opt, g_opt = Adam(actor.store, 3e-3), Adam(gauss.store, 3e-3)
    a_rng = np.random.default_rng(args.seed + 3)
    g_rng = np.random.default_rng(args.seed + 3)
    for step in range(args.steps):
        lr = 3e-3 + (2e-4 - 3e-3) * step / (args.steps - 1)
        a_opt.lr = g_opt.lr = lr
        gcbc_update(actor, buf, 0.99, Tape(actor.store), a_rng, batch=256,
                    noise_std=0.1, opt=a_opt)
        s, a, g = buf.sample_gcbc_batch(256, 0.99, g_rng)
        gauss_bc_update(gauss, (np.concatenate([s, g], axis=1), a),
                        Tape(gauss.store), g_rng, noise_std=0.1, opt=g_opt)
    print(f"both policies trained [{time.time() - t0:.0f}s]")

    for mode in ("left", "right"):
        goal = env.maze.goals[mode]
        nf = evaluate_policy(FlowPolicy(actor, goal=goal, denoise=True), env,
                             goal, n_episodes=args.episodes,
                             seed=args.seed + 10, workers=4)
        gs = evaluate_policy(GaussianActor(gauss, goal=goal), env, goal,
                             n_episodes=args.episodes, seed=args.seed + 10,
                             workers=4)
        print(f"{mode:>5s}:  flow {nf.success_rate:.2f} "
              f"(ret {nf.return_mean:.1f})   gauss {gs.success_rate:.2f} "
              f"(ret {gs.return_mean:.1f})   [{time.time() - t0:.0f}s]")


if __name__ == "__main__":
    main()
