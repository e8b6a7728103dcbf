"""Per-algorithm training loops behind the train command.

Every loop follows the same shape: write the manifest, save the initial
parameters, take cfg.steps updates while appending one metric record per
update, and save the final parameters. All randomness descends from
cfg.seed, so a finished run replays bit-identically (wall_ms aside) from
its manifest. A numeric failure propagates out with the last cadence
checkpoint still on disk.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .agents import (ActorLossWeights, CriticNet, FlowPolicy, UgsState,
                     actor_update, bc_update, critic_update, evaluate_policy,
                     gcbc_update, ugs_iteration)
from .autodiff import Adam, Tape
from .checkpoint import save_critic_checkpoint, save_flow_checkpoint
from .config import RunConfig
from .densities import make_dataset, make_target
from .envs import PointMassEnv, ReplayBuffer, load_dataset, make_maze
from .errors import ConfigError
from .flow import ConditionContext, FlowConfig, FlowModel
from .metrics import MetricsSink
from .objectives import MleBatch, ViTarget, mle_loss, vi_loss

STATE_DIM = 4
ACTION_DIM = 2
GOAL_DIM = 2


def flow_for(cfg: RunConfig, event_dim: int, raw_cond_dim: int) -> FlowModel:
    return FlowModel(FlowConfig(
        event_dim=event_dim, raw_cond_dim=raw_cond_dim, blocks=cfg.blocks,
        channels=cfg.channels, encoder_layers=cfg.encoder_layers,
        rep_dim=cfg.rep_dims, seed=cfg.seed))


def load_buffer(cfg: RunConfig) -> ReplayBuffer:
    if not cfg.dataset or not Path(cfg.dataset).exists():
        raise ConfigError(
            f"field dataset: {cfg.dataset!r} is not a dataset file "
            "(generate one with the gen-data command)")
    fields, trajs, _ = load_dataset(cfg.dataset)
    buf = ReplayBuffer(capacity=len(trajs))
    for t in trajs:
        buf.add(t)
    return buf


def _eval_seed(cfg: RunConfig, step: int) -> int:
    # deterministic, distinct from training streams and across eval points
    return (cfg.seed * 100003 + step) % (2 ** 31)


def _eval_policy_metrics(cfg: RunConfig, policy, env, goal, step) -> dict:
    rep = evaluate_policy(policy, env, goal, n_episodes=cfg.eval_episodes,
                          seed=_eval_seed(cfg, step), workers=cfg.workers)
    return {"success_rate": rep.success_rate,
            "return_mean": rep.return_mean,
            "return_std": rep.return_std}


def run_training(cfg: RunConfig, run_dir) -> Path:
    """Dispatch on cfg.algorithm; returns the run directory."""
    runner = {
        "density-mle": _run_density_mle,
        "density-vi": _run_density_vi,
        "bc": _run_bc,
        "gcbc": _run_gcbc,
        "rlbc": _run_rlbc,
        "ugs": _run_ugs,
    }[cfg.algorithm]
    with MetricsSink(run_dir) as sink:
        sink.write_manifest(cfg)
        runner(cfg, sink)
    return Path(run_dir)


class _StepClock:
    def __init__(self):
        self._last = time.perf_counter()

    def lap_ms(self) -> float:
        now = time.perf_counter()
        ms = (now - self._last) * 1000.0
        self._last = now
        return ms


def _cadence(cfg: RunConfig, step: int) -> bool:
    return cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0


# ---------------------------------------------------------------------------
# density fitting


def _run_density_mle(cfg: RunConfig, sink: MetricsSink) -> None:
    data_rng = np.random.default_rng(cfg.seed)
    train_rng = np.random.default_rng(cfg.seed + 1)
    data = make_dataset(cfg.dataset, data_rng, 20_000)
    model = flow_for(cfg, event_dim=data.shape[1], raw_cond_dim=0)
    save_flow_checkpoint(sink.checkpoint_path(0, "model"), model, step=0)
    opt = Adam(model.store, cfg.lr)
    clock = _StepClock()
    for step in range(1, cfg.steps + 1):
        idx = train_rng.integers(0, len(data), size=cfg.batch)
        batch = MleBatch(data[idx], ConditionContext.unconditional(cfg.batch),
                         cfg.noise_std)
        tape = Tape(model.store)
        loss = mle_loss(model, batch, tape, train_rng)
        opt.step(tape.grad)
        values = {"nll": loss}
        if cfg.eval_every and step % cfg.eval_every == 0:
            held = make_dataset(cfg.dataset,
                                np.random.default_rng(_eval_seed(cfg, step)),
                                4096)
            values["eval_nll"] = -float(np.mean(
                model.log_prob_values(held, ConditionContext.unconditional(
                    len(held)))))
        sink.log(step, clock.lap_ms(), values)
        if _cadence(cfg, step):
            save_flow_checkpoint(sink.checkpoint_path(step, "model"), model, step)
    if cfg.steps:
        save_flow_checkpoint(sink.checkpoint_path(cfg.steps, "model"), model,
                             step=cfg.steps)


def _run_density_vi(cfg: RunConfig, sink: MetricsSink) -> None:
    train_rng = np.random.default_rng(cfg.seed + 1)
    fn, dim = make_target(cfg.target)
    target = ViTarget(fn, dim)
    model = flow_for(cfg, event_dim=dim, raw_cond_dim=0)
    save_flow_checkpoint(sink.checkpoint_path(0, "model"), model, step=0)
    opt = Adam(model.store, cfg.lr)
    clock = _StepClock()
    for step in range(1, cfg.steps + 1):
        tape = Tape(model.store)
        loss = vi_loss(model, target, cfg.batch, tape, train_rng)
        opt.step(tape.grad)
        values = {"vi_loss": loss}
        if cfg.eval_every and step % cfg.eval_every == 0:
            x, _ = model.sample_values(
                ConditionContext.unconditional(4096),
                np.random.default_rng(_eval_seed(cfg, step)))
            for j in range(dim):
                values[f"mean_{j}"] = float(x[:, j].mean())
                values[f"std_{j}"] = float(x[:, j].std())
        sink.log(step, clock.lap_ms(), values)
        if _cadence(cfg, step):
            save_flow_checkpoint(sink.checkpoint_path(step, "model"), model, step)
    if cfg.steps:
        save_flow_checkpoint(sink.checkpoint_path(cfg.steps, "model"), model,
                             step=cfg.steps)


# ---------------------------------------------------------------------------
# policy learning from datasets


def _policy_eval_env(cfg: RunConfig):
    env = PointMassEnv(make_maze(cfg.env))
    if cfg.goal not in env.maze.goals:
        raise ConfigError(f"field goal: maze {cfg.env!r} has no goal "
                          f"named {cfg.goal!r}")
    return env, np.asarray(env.maze.goals[cfg.goal], dtype=np.float64)


def _run_bc(cfg: RunConfig, sink: MetricsSink) -> None:
    buf = load_buffer(cfg)
    env, goal = _policy_eval_env(cfg)
    train_rng = np.random.default_rng(cfg.seed + 1)
    actor = flow_for(cfg, event_dim=ACTION_DIM, raw_cond_dim=STATE_DIM)
    save_flow_checkpoint(sink.checkpoint_path(0, "actor"), actor, step=0)
    opt = Adam(actor.store, cfg.lr)
    clock = _StepClock()
    for step in range(1, cfg.steps + 1):
        _, _, s, a = buf.sample_state_action(cfg.batch, train_rng)
        m = bc_update(actor, (s, a), Tape(actor.store), train_rng,
                      noise_std=cfg.noise_std, opt=opt)
        if cfg.eval_every and step % cfg.eval_every == 0:
            m.update(_eval_policy_metrics(cfg, FlowPolicy(actor), env, goal,
                                          step))
        sink.log(step, clock.lap_ms(), m)
        if _cadence(cfg, step):
            save_flow_checkpoint(sink.checkpoint_path(step, "actor"), actor, step)
    if cfg.steps:
        save_flow_checkpoint(sink.checkpoint_path(cfg.steps, "actor"), actor,
                             step=cfg.steps)


def _run_gcbc(cfg: RunConfig, sink: MetricsSink) -> None:
    buf = load_buffer(cfg)
    env, goal = _policy_eval_env(cfg)
    train_rng = np.random.default_rng(cfg.seed + 1)
    actor = flow_for(cfg, event_dim=ACTION_DIM,
                     raw_cond_dim=STATE_DIM + GOAL_DIM)
    save_flow_checkpoint(sink.checkpoint_path(0, "actor"), actor, step=0)
    opt = Adam(actor.store, cfg.lr)
    clock = _StepClock()
    for step in range(1, cfg.steps + 1):
        m = gcbc_update(actor, buf, cfg.gamma_fut, Tape(actor.store),
                        train_rng, batch=cfg.batch, noise_std=cfg.noise_std,
                        opt=opt)
        if cfg.eval_every and step % cfg.eval_every == 0:
            m.update(_eval_policy_metrics(
                cfg, FlowPolicy(actor, goal=goal), env, goal, step))
        sink.log(step, clock.lap_ms(), m)
        if _cadence(cfg, step):
            save_flow_checkpoint(sink.checkpoint_path(step, "actor"), actor, step)
    if cfg.steps:
        save_flow_checkpoint(sink.checkpoint_path(cfg.steps, "actor"), actor,
                             step=cfg.steps)


def _run_rlbc(cfg: RunConfig, sink: MetricsSink) -> None:
    buf = load_buffer(cfg)
    env, goal = _policy_eval_env(cfg)
    train_rng = np.random.default_rng(cfg.seed + 1)
    actor = flow_for(cfg, event_dim=ACTION_DIM, raw_cond_dim=STATE_DIM)
    critic = CriticNet(STATE_DIM + ACTION_DIM,
                       hidden=(cfg.critic_channels, cfg.critic_channels),
                       tau=cfg.tau, twin=cfg.twin, seed=cfg.seed)
    weights = ActorLossWeights(lambda_ent=cfg.lambda_ent, alpha_bc=cfg.alpha_bc)
    save_flow_checkpoint(sink.checkpoint_path(0, "actor"), actor, step=0)
    save_critic_checkpoint(sink.checkpoint_path(0, "critic"), critic, step=0)
    a_opt = Adam(actor.store, cfg.lr)
    c_opt = Adam(critic.store, cfg.critic_lr)
    clock = _StepClock()

    def save_all(step):
        save_flow_checkpoint(sink.checkpoint_path(step, "actor"), actor, step)
        save_critic_checkpoint(sink.checkpoint_path(step, "critic"), critic, step)

    for step in range(1, cfg.steps + 1):
        s, a, r, sn, _ = buf.sample_transitions(cfg.batch, train_rng)
        m = critic_update(critic, (s, a, r, sn), actor, cfg.gamma,
                          Tape(critic.store), train_rng, opt=c_opt)
        _, _, s2, a2 = buf.sample_state_action(cfg.batch, train_rng)
        m.update(actor_update(actor, critic, (s2, a2), weights,
                              Tape(actor.store), train_rng,
                              noise_std=cfg.noise_std, opt=a_opt))
        if cfg.eval_every and step % cfg.eval_every == 0:
            m.update(_eval_policy_metrics(cfg, FlowPolicy(actor), env, goal,
                                          step))
        sink.log(step, clock.lap_ms(), m)
        if _cadence(cfg, step):
            save_all(step)
    if cfg.steps:
        save_all(cfg.steps)


# ---------------------------------------------------------------------------
# unsupervised exploration


def _run_ugs(cfg: RunConfig, sink: MetricsSink) -> None:
    env, goal = _policy_eval_env(cfg)
    train_rng = np.random.default_rng(cfg.seed + 1)
    actor = flow_for(cfg, event_dim=ACTION_DIM,
                     raw_cond_dim=STATE_DIM + GOAL_DIM)
    joint = flow_for(cfg, event_dim=GOAL_DIM,
                     raw_cond_dim=STATE_DIM + ACTION_DIM)
    ugs = UgsState(joint, candidate_count=cfg.candidate_count,
                   goal_noise_std=cfg.goal_noise_std, gamma=cfg.gamma,
                   mask_prob=cfg.mask_prob)
    buf = ReplayBuffer(capacity=max(cfg.steps, 1))
    save_flow_checkpoint(sink.checkpoint_path(0, "actor"), actor, step=0)
    save_flow_checkpoint(sink.checkpoint_path(0, "joint"), joint, step=0)
    q_opt = Adam(joint.store, cfg.lr)
    a_opt = Adam(actor.store, cfg.lr)
    clock = _StepClock()

    def save_all(step):
        save_flow_checkpoint(sink.checkpoint_path(step, "actor"), actor, step)
        save_flow_checkpoint(sink.checkpoint_path(step, "joint"), joint, step)

    for step in range(1, cfg.steps + 1):
        m = ugs_iteration(env, buf, ugs, actor, q_opt, a_opt, train_rng,
                          grad_steps=cfg.grad_steps, batch=cfg.batch)
        if cfg.eval_every and step % cfg.eval_every == 0:
            m.update(_eval_policy_metrics(
                cfg, FlowPolicy(actor, goal=goal), env, goal, step))
        sink.log(step, clock.lap_ms(), m)
        if _cadence(cfg, step):
            save_all(step)
    if cfg.steps:
        save_all(cfg.steps)
