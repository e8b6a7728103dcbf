"""Actor, critic, and goal-selection updates built on the flow library.

Five training objectives share this module: action cloning (plain and
goal-conditioned), a TD critic with a cloning-regularized flow actor,
occupancy estimation for goal-conditioned RL, and min-density goal selection
for unsupervised exploration.

Every *_update function records its loss on the caller's tape and runs the
backward pass; if an optimizer is handed in it also applies the step (plus
the polyak target update where one exists). Passing opt=None lets tests
inspect gradients without mutating parameters.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, MlpSpec, ParamStore, Tape, init_mlp_params, mlp_forward
from .envs import PointMassEnv, ReplayBuffer, rollout
from .errors import ContractError
from .flow import ConditionContext, FlowModel
from .objectives import MleBatch, apply_mask, denoised_sample, mle_loss

logger = logging.getLogger(__name__)

Array = np.ndarray

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# critics


class CriticNet:
    """Twin Q networks with polyak-averaged target copies.

    The TD backup bootstraps from min(q1', q2') of the targets; with
    twin=False the second head is dropped and the backup is the literal
    single-network rule. The actor side always queries q1.
    """

    def __init__(self, in_dim: int, hidden=(64, 64), tau: float = 0.005,
                 twin: bool = True, seed: int = 0):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.tau = tau
        self.twin = twin
        self.seed = seed
        self.spec = MlpSpec(in_dim, self.hidden, 1, layernorm=False,
                            activation="gelu")
        rng = np.random.default_rng(seed)
        named = dict(init_mlp_params(self.spec, rng, "q1"))
        if twin:
            named.update(init_mlp_params(self.spec, rng, "q2"))
        self.store = ParamStore(named)
        self.target = self.store.clone()

    @property
    def heads(self):
        return ("q1", "q2") if self.twin else ("q1",)

    def q(self, x, tape: Tape, head: str = "q1"):
        """(B,) Q-values as a tape node; x may be a node or an array."""
        out = mlp_forward(self.spec, self.store, head, x, tape)
        return ad.reshape(out, (-1,))

    def target_min_q(self, x: Array) -> Array:
        """min over target heads, plain values (the TD backup is a constant)."""
        vals = [mlp_forward(self.spec, self.target, h, x, Tape(self.target)).value
                for h in self.heads]
        return np.minimum.reduce(vals).reshape(-1)

    def polyak(self):
        self.target.lerp_from(self.store, self.tau)


def critic_update(critic: CriticNet, batch, actor: FlowModel, gamma: float,
                  tape: Tape, rng: np.random.Generator,
                  opt: Optional[Adam] = None) -> dict:
    """One TD step: MSE of every online head against r + gamma min Q'(s', a').

    a' is a single reparameterized draw from the actor at s'. Episodes here
    end by time limit rather than absorption, so the backup never masks on
    done. The polyak target update runs after the optimizer step.
    """
    s, a, r, sn = batch
    an, _ = actor.sample_values(ConditionContext.of(sn), rng)
    an = np.clip(an, -1.0, 1.0)
    y = r + gamma * critic.target_min_q(np.concatenate([sn, an], axis=1))

    x = np.concatenate([s, a], axis=1)
    losses = []
    for head in critic.heads:
        q = critic.q(tape.const(x), tape, head)
        losses.append(ad.vmean(ad.square(ad.sub(q, tape.const(y)))))
    loss = losses[0] if len(losses) == 1 else ad.add(losses[0], losses[1])
    tape.backward(loss)
    if opt is not None:
        opt.step(tape.grad)
        critic.polyak()
    return {"critic_loss": float(loss.value), "q_target_mean": float(np.mean(y))}


# ---------------------------------------------------------------------------
# actors


@dataclass(frozen=True)
class ActorLossWeights:
    lambda_ent: float = 0.0
    alpha_bc: float = 1.0


def bc_update(model: FlowModel, batch, tape: Tape, rng: np.random.Generator,
              noise_std: float = 0.1, opt: Optional[Adam] = None) -> dict:
    """Action cloning: one NLL step on p(a | s) with per-step action noising."""
    s, a = batch
    loss = mle_loss(model, MleBatch(a, ConditionContext.of(s), noise_std),
                    tape, rng)
    if opt is not None:
        opt.step(tape.grad)
    return {"bc_nll": loss}


def gcbc_update(model: FlowModel, buffer: ReplayBuffer, gamma_fut: float,
                tape: Tape, rng: np.random.Generator, batch: int = 256,
                noise_std: float = 0.1, opt: Optional[Adam] = None) -> dict:
    """Goal-conditioned cloning: goals drawn from each pair's own future."""
    s, a, g = buffer.sample_gcbc_batch(batch, gamma_fut, rng)
    ctx = ConditionContext.of(np.concatenate([s, g], axis=1))
    loss = mle_loss(model, MleBatch(a, ctx, noise_std), tape, rng)
    if opt is not None:
        opt.step(tape.grad)
    return {"gcbc_nll": loss}


def actor_update(actor: FlowModel, critic: CriticNet, batch,
                 weights: ActorLossWeights, tape: Tape,
                 rng: np.random.Generator, noise_std: float = 0.1,
                 opt: Optional[Adam] = None) -> dict:
    """Critic-guided cloning step on the actor:

        loss = -mean[Q(s, a_pi) - lambda log pi(a_pi|s)] - alpha mean[log pi(a|s)]

    a_pi is reparameterized through the flow's inverse map, so the Q term's
    gradient reaches the actor parameters; critic parameters live on their
    own store and stay fixed here. Zero-weight terms are skipped outright,
    which makes the remaining term exact rather than perturbed by 0-scaled
    arithmetic. The dataset noise for the cloning term is drawn before the
    action sample, matching bc_update's stream for the same rng state.
    """
    s, a = batch
    noised_a = None
    if weights.alpha_bc != 0.0:
        noised_a = a + noise_std * rng.standard_normal(a.shape) \
            if noise_std > 0 else a

    ctx = ConditionContext.of(s)
    a_pi, log_pi = actor.sample(ctx, rng, tape)
    q = critic.q(ad.concat_cols([tape.const(s), a_pi]), tape, "q1")
    loss = ad.neg(ad.vmean(q))
    if weights.lambda_ent != 0.0:
        loss = ad.add(loss, ad.mul(ad.vmean(log_pi), weights.lambda_ent))
    metrics = {"q_pi_mean": float(np.mean(q.value))}
    if weights.alpha_bc != 0.0:
        lp = actor.log_prob(noised_a, ctx, tape)
        metrics["bc_nll"] = float(-np.mean(lp.value))
        loss = ad.sub(loss, ad.mul(ad.vmean(lp), weights.alpha_bc))
    tape.backward(loss)
    if opt is not None:
        opt.step(tape.grad)
    metrics["actor_loss"] = float(loss.value)
    return metrics


# ---------------------------------------------------------------------------
# occupancy model and goal selection


@dataclass
class UgsState:
    """A single conditional/marginal goal-density network plus its knobs."""

    joint_model: FlowModel  # p(g | s, a) with mask -> p(g)
    candidate_count: int = 1024
    goal_noise_std: float = 0.05
    gamma: float = 0.99
    mask_prob: float = 0.1

    def marginal_log_density(self, goals: Array) -> Array:
        """log p(g): all conditioning masked out."""
        goals = np.atleast_2d(goals)
        n = goals.shape[0]
        ctx = ConditionContext.of(
            np.zeros((n, self.joint_model.cfg.raw_cond_dim))
        ).with_mask(np.ones(n, dtype=bool))
        return self.joint_model.log_prob_values(goals, ctx)


def gcrl_q_update(ugs: UgsState, buffer: ReplayBuffer, tape: Tape,
                  rng: np.random.Generator, batch: int = 256,
                  opt: Optional[Adam] = None) -> dict:
    """One NLL step on p(g | s, a) with discounted future goals.

    Goals get Gaussian jitter (the density stays smooth at desk scale) and a
    random subset of rows is masked, so one network carries the conditional
    occupancy and the goal marginal at once.
    """
    s, a, g = buffer.sample_gcbc_batch(batch, ugs.gamma, rng)
    g = g + ugs.goal_noise_std * rng.standard_normal(g.shape)
    ctx = apply_mask(ConditionContext.of(np.concatenate([s, a], axis=1)),
                     ugs.mask_prob, rng)
    loss = mle_loss(ugs.joint_model, MleBatch(g, ctx, 0.0), tape, rng)
    if opt is not None:
        opt.step(tape.grad)
    return {"occupancy_nll": loss}


def select_ugs_goal(ugs: UgsState, buffer: ReplayBuffer,
                    rng: np.random.Generator) -> Array:
    """The least-likely goal (under the learned marginal) among buffer states.

    Candidates are uniform draws from the buffer's states; ties go to the
    first index. A buffer with fewer states than candidate_count cannot
    honor the contract, so selection falls back to a uniform goal in the
    unit square with a warning.
    """
    n_states = sum(buffer.trajectory(i).horizon + 1 for i in range(len(buffer)))
    if n_states < ugs.candidate_count:
        logger.warning(
            "buffer has %d states, fewer than candidate_count=%d; "
            "falling back to a uniform goal", n_states, ugs.candidate_count)
        return rng.uniform(0.0, 1.0, size=2)
    cands = buffer.goal_extractor(buffer.sample_states(ugs.candidate_count, rng))
    scores = ugs.marginal_log_density(cands)
    return cands[int(np.argmin(scores))]


def gcrl_actor_update(actor: FlowModel, ugs: UgsState, batch, tape: Tape,
                      rng: np.random.Generator,
                      opt: Optional[Adam] = None) -> dict:
    """Push the actor toward actions that make the commanded goal likely:

        loss = -mean log p(g | s, a_pi),  a_pi ~ pi(. | s, g) reparameterized.

    The joint model's parameters sit on another store, so only its input
    gradient with respect to a_pi reaches the actor.
    """
    s, g = batch
    a_pi, _ = actor.sample(
        ConditionContext.of(np.concatenate([s, g], axis=1)), rng, tape)
    joint_raw = ad.concat_cols([tape.const(s), a_pi])
    lp = ugs.joint_model.log_prob(g, ConditionContext.of(joint_raw), tape)
    loss = ad.neg(ad.vmean(lp))
    tape.backward(loss)
    if opt is not None:
        opt.step(tape.grad)
    return {"gcrl_actor_loss": float(loss.value)}


def ugs_iteration(env: PointMassEnv, buffer: ReplayBuffer, ugs: UgsState,
                  actor: FlowModel, q_opt: Adam, actor_opt: Adam,
                  rng: np.random.Generator, grad_steps: int = 64,
                  batch: int = 256) -> dict:
    """One exploration round: pick a frontier goal, roll one episode toward
    it, then take grad_steps updates on the occupancy model and the actor."""
    goal = select_ugs_goal(ugs, buffer, rng)
    policy = FlowPolicy(actor, goal=goal)
    traj = rollout(env, policy.act, rng, goal=goal)
    buffer.add(traj)
    q_loss = a_loss = 0.0
    for _ in range(grad_steps):
        m = gcrl_q_update(ugs, buffer, Tape(ugs.joint_model.store), rng,
                          batch=batch, opt=q_opt)
        q_loss += m["occupancy_nll"]
        s, _, g = buffer.sample_gcbc_batch(batch, ugs.gamma, rng)
        m = gcrl_actor_update(actor, ugs, (s, g), Tape(actor.store), rng,
                              opt=actor_opt)
        a_loss += m["gcrl_actor_loss"]
    return {"goal_x": float(goal[0]), "goal_y": float(goal[1]),
            "episode_len": traj.horizon,
            "occupancy_nll": q_loss / grad_steps,
            "gcrl_actor_loss": a_loss / grad_steps}


# ---------------------------------------------------------------------------
# policies for rollouts and evaluation


class FlowPolicy:
    """Flow model as a stochastic policy; optionally conditions on a fixed
    goal and optionally denoises sampled actions. Actions are clipped to the
    env's box."""

    def __init__(self, model: FlowModel, goal=None, denoise: bool = False,
                 noise_std: float = 0.1):
        self.model = model
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)
        self.denoise = denoise
        self.noise_std = noise_std

    def reset(self):
        pass

    def raw_for(self, states: Array) -> Array:
        states = np.atleast_2d(states)
        if self.goal is None:
            return states
        g = np.broadcast_to(self.goal, (states.shape[0], self.goal.size))
        return np.concatenate([states, g], axis=1)

    def act(self, state: Array, rng: np.random.Generator) -> Array:
        ctx = ConditionContext.of(self.raw_for(state))
        a = denoised_sample(self.model, ctx, rng,
                            self.noise_std if self.denoise else 0.0)
        return np.clip(a[0], -1.0, 1.0)


class GaussianPolicy:
    """Diagonal-Gaussian MLP policy, the unimodal baseline: one network maps
    the (state, goal) input to a mean and per-dimension log-std."""

    def __init__(self, in_dim: int, action_dim: int = 2, hidden=(64, 64),
                 seed: int = 0):
        self.in_dim = in_dim
        self.action_dim = action_dim
        self.spec = MlpSpec(in_dim, tuple(hidden), 2 * action_dim,
                            layernorm=False, activation="gelu")
        self.store = ParamStore(
            dict(init_mlp_params(self.spec, np.random.default_rng(seed), "pi")))

    def _mean_logstd(self, x, tape: Tape):
        out = mlp_forward(self.spec, self.store, "pi", x, tape)
        mean = ad.cols(out, 0, self.action_dim)
        log_std = ad.clamp(ad.cols(out, self.action_dim, 2 * self.action_dim),
                           -5.0, 2.0)
        return mean, log_std

    def log_prob(self, a: Array, x: Array, tape: Tape):
        mean, log_std = self._mean_logstd(tape.const(np.atleast_2d(x)), tape)
        z = ad.mul(ad.sub(tape.const(np.atleast_2d(a)), mean),
                   ad.exp(ad.neg(log_std)))
        return ad.neg(ad.add(
            ad.add(ad.mul(ad.vsum(ad.square(z), axis=1), 0.5),
                   ad.vsum(log_std, axis=1)),
            0.5 * self.action_dim * LOG_2PI))

    def sample_values(self, x: Array, rng: np.random.Generator) -> Array:
        tape = Tape(self.store)
        mean, log_std = self._mean_logstd(tape.const(np.atleast_2d(x)), tape)
        eps = rng.standard_normal(mean.value.shape)
        return mean.value + np.exp(log_std.value) * eps


def gauss_bc_update(policy: GaussianPolicy, batch, tape: Tape,
                    rng: np.random.Generator, noise_std: float = 0.1,
                    opt: Optional[Adam] = None) -> dict:
    """The bc_update analogue for the Gaussian baseline, same noising."""
    s, a = batch
    if noise_std > 0:
        a = a + noise_std * rng.standard_normal(a.shape)
    loss = ad.neg(ad.vmean(policy.log_prob(a, s, tape)))
    tape.backward(loss)
    if opt is not None:
        opt.step(tape.grad)
    return {"bc_nll": float(loss.value)}


class GaussianActor:
    """Rollout adapter for GaussianPolicy mirroring FlowPolicy."""

    def __init__(self, policy: GaussianPolicy, goal=None):
        self.policy = policy
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)

    def reset(self):
        pass

    def act(self, state: Array, rng: np.random.Generator) -> Array:
        x = np.atleast_2d(state)
        if self.goal is not None:
            x = np.concatenate([x, self.goal[None, :]], axis=1)
        return np.clip(self.policy.sample_values(x, rng)[0], -1.0, 1.0)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    successes: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.returns)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else float("nan")

    @property
    def return_mean(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def return_std(self) -> float:
        return float(np.std(self.returns)) if self.returns else float("nan")


def evaluate_policy(policy, env: PointMassEnv, goal, n_episodes: int = 50,
                    seed: int = 0, workers: int = 1) -> EvalReport:
    """Roll n_episodes against a fixed task goal; success is reaching the
    goal radius before the horizon.

    Each episode owns a fresh env instance and an rng derived from
    (seed, episode index), so results are independent of worker count.
    `policy` is an object with act(state, rng) and reset(), or a zero-arg
    factory producing one per episode (required for stateful policies when
    workers > 1).
    """
    if n_episodes < 0:
        raise ContractError("n_episodes must be >= 0")
    goal = np.asarray(goal, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).spawn(n_episodes)
    factory = policy if not hasattr(policy, "act") else None

    def run(i: int):
        ep_env = PointMassEnv(env.maze)
        ep_rng = np.random.default_rng(seeds[i])
        ep_policy = factory() if factory is not None else policy
        ep_policy.reset()
        s = ep_env.reset(goal=goal)
        total, done, info = 0.0, False, {"success": False}
        n = 0
        while not done:
            s, r, done, info = ep_env.step(ep_policy.act(s, ep_rng))
            total += r
            n += 1
        return bool(info["success"]), total, n

    report = EvalReport()
    if workers > 1 and n_episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n_episodes)))
    else:
        results = [run(i) for i in range(n_episodes)]
    for ok, ret, n in results:
        report.successes.append(ok)
        report.returns.append(ret)
        report.lengths.append(n)
    return report
