"""Unsupervised goal sampling on big_maze: commanded-goal exploration with
min-density goal selection against a uniform-buffer-goal baseline.

Both arms share the loop (collect one episode toward the commanded goal, then
update the occupancy model and the goal-conditioned actor); they differ only
in which buffer state gets commanded. Coverage is the entropy of the buffer's
position histogram.

Run from the repo root:  python3 scripts/ugs_coverage.py --seeds 3
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nfrl.autodiff import Adam, Tape
from nfrl.agents import (FlowPolicy, UgsState, gcrl_actor_update,
                         gcrl_q_update, select_ugs_goal)
from nfrl.envs import PointMassEnv, ReplayBuffer, make_maze, rollout


def coverage_entropy(buf, bins=8):
    pos = np.concatenate([buf.trajectory(i).states[:, :2]
                          for i in range(len(buf))])
    h, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=bins,
                             range=[[0, 1], [0, 1]])
    p = h.ravel() / h.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def run_arm(strategy, seed, iters, grad_steps):
    from nfrl.flow import FlowConfig, FlowModel

    env = PointMassEnv(make_maze("big_maze"))
    rng = np.random.default_rng(seed)
    actor = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=6, blocks=3,
                                 channels=24, encoder_layers=2, rep_dim=8,
                                 seed=seed + 1))
    joint = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=6, blocks=3,
                                 channels=24, encoder_layers=2, rep_dim=8,
                                 seed=seed + 2))
    ugs = UgsState(joint, candidate_count=256, goal_noise_std=0.05,
                   gamma=0.99, mask_prob=0.1)
    buf = ReplayBuffer(capacity=iters + 1)
    q_opt, a_opt = Adam(joint.store, 3e-3), Adam(actor.store, 3e-3)
    for it in range(iters):
        if not len(buf):
            goal = rng.uniform(0.0, 1.0, size=2)
        elif strategy == "ugs":
            goal = select_ugs_goal(ugs, buf, rng)
        else:
            goal = buf.goal_extractor(buf.sample_states(1, rng))[0]
        traj = rollout(env, FlowPolicy(actor, goal=goal).act, rng, goal=goal)
        buf.add(traj)
        for _ in range(grad_steps):
            gcrl_q_update(ugs, buf, Tape(joint.store), rng, batch=256,
                          opt=q_opt)
            s, _, g = buf.sample_gcbc_batch(256, ugs.gamma, rng)
            gcrl_actor_update(actor, ugs, (s, g), Tape(actor.store), rng,
                              opt=a_opt)
    return coverage_entropy(buf)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--grad-steps", type=int, default=24)
    args = ap.parse_args()
    t0 = time.time()

    gaps = []
    for seed in range(args.seeds):
        ents = {}
        for strategy in ("uniform", "ugs"):
            ents[strategy] = run_arm(strategy, seed, args.iters,
                                     args.grad_steps)
            print(f"seed {seed} {strategy:>7s}: entropy {ents[strategy]:.3f} "
                  f"[{time.time() - t0:.0f}s]")
        gaps.append(ents["ugs"] - ents["uniform"])
    print(f"median entropy gain: {np.median(gaps):+.3f} nats")


if __name__ == "__main__":
    main()
