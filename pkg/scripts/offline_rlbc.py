"""Offline RL on a mixed-quality u_maze dataset: behavior cloning against the
critic-regularized actor (Q term + BC anchor) at the two alpha presets.

The dataset is 80% drifting random walks and 20% scripted expert, with dense
goal-distance rewards recomputed after collection. Cloning imitates the
mixture; the critic steers the actor toward the return-maximizing fifth.

Run from the repo root:  python3 scripts/offline_rlbc.py --seeds 3
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nfrl.autodiff import Adam, Tape
from nfrl.agents import (ActorLossWeights, CriticNet, FlowPolicy,
                         actor_update, bc_update, critic_update,
                         evaluate_policy)
from nfrl.envs import (PointMassEnv, ReplayBuffer, generate_expert_dataset,
                       make_maze, recompute_rewards, rollout)
from nfrl.flow import FlowConfig, FlowModel


def drifting_walker():
    prev = np.zeros(2)

    def act(state, rng):
        nonlocal prev
        prev = np.clip(0.9 * prev + 0.6 * rng.standard_normal(2), -1.0, 1.0)
        return prev

    return act


def mixed_dataset(env, goal, n_traj, expert_frac, rng):
    n_exp = int(round(n_traj * expert_frac))
    trajs = [rollout(env, drifting_walker(), rng, episode_id=ep)
             for ep in range(n_traj - n_exp)]
    expert, _ = generate_expert_dataset(env, n_exp, {"default": 1.0}, rng,
                                        noise_std=0.04)
    trajs += expert
    recompute_rewards(trajs, goal)
    buf = ReplayBuffer(capacity=len(trajs))
    for t in trajs:
        buf.add(t)
    return buf


def make_actor(seed):
    return FlowModel(FlowConfig(event_dim=2, raw_cond_dim=4, blocks=3,
                                channels=32, encoder_layers=2, rep_dim=16,
                                seed=seed))


def train_bc(buf, seed, steps):
    actor = make_actor(seed + 100)
    opt = Adam(actor.store, 3e-3)
    rng = np.random.default_rng(seed + 1)
    for step in range(steps):
        opt.lr = 3e-3 + (3e-4 - 3e-3) * step / (steps - 1)
        _, _, s, a = buf.sample_state_action(256, rng)
        bc_update(actor, (s, a), Tape(actor.store), rng, opt=opt)
    return actor


def train_rlbc(buf, seed, steps, alpha):
    actor = make_actor(seed + 100)
    critic = CriticNet(6, (64, 64), tau=0.005, twin=True, seed=seed + 200)
    a_opt, c_opt = Adam(actor.store, 3e-3), Adam(critic.store, 3e-3)
    rng = np.random.default_rng(seed + 1)
    w = ActorLossWeights(lambda_ent=0.0, alpha_bc=alpha)
    for step in range(steps):
        a_opt.lr = c_opt.lr = 3e-3 + (3e-4 - 3e-3) * step / (steps - 1)
        s, a, r, sn, _ = buf.sample_transitions(256, rng)
        critic_update(critic, (s, a, r, sn), actor, 0.99, Tape(critic.store),
                      rng, opt=c_opt)
        _, _, s, a = buf.sample_state_action(256, rng)
        actor_update(actor, critic, (s, a), w, Tape(actor.store), rng,
                     opt=a_opt)
    return actor


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--n-traj", type=int, default=200)
    ap.add_argument("--bc-steps", type=int, default=2500)
    ap.add_argument("--rlbc-steps", type=int, default=4000)
    ap.add_argument("--episodes", type=int, default=50)
    args = ap.parse_args()
    t0 = time.time()

    env = PointMassEnv(make_maze("u_maze"))
    goal = np.asarray(env.maze.goals["default"])
    rows = {"bc": [], "rlbc a=1": [], "rlbc a=10": []}
    for seed in range(args.seeds):
        buf = mixed_dataset(env, goal, args.n_traj, 0.2,
                            np.random.default_rng(seed))
        arms = {
            "bc": train_bc(buf, seed, args.bc_steps),
            "rlbc a=1": train_rlbc(buf, seed, args.rlbc_steps, 1.0),
            "rlbc a=10": train_rlbc(buf, seed, args.rlbc_steps, 10.0),
        }
        for name, actor in arms.items():
            rep = evaluate_policy(FlowPolicy(actor, denoise=True), env, goal,
                                  n_episodes=args.episodes, seed=seed + 10,
                                  workers=4)
            rows[name].append(rep.return_mean)
            print(f"seed {seed} {name:>9s}: success {rep.success_rate:.2f} "
                  f"return {rep.return_mean:7.1f} [{time.time() - t0:.0f}s]")
    for name, vals in rows.items():
        print(f"median {name:>9s}: {np.median(vals):7.1f}")


if __name__ == "__main__":
    main()
