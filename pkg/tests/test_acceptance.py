"""End-to-end acceptance suite. Each test measures one numbered criterion at
its stated tolerance and records a single PASS/FAIL line (replayed in the
terminal summary). Training configs are desk-scale; every target value comes
from an exact computation, an independent Monte-Carlo oracle, or a matched
comparative baseline trained on the same data.
"""
import numpy as np
import pytest
from scipy.stats import binomtest

import trainutil
from nfrl.agents import (ActorLossWeights, CriticNet, FlowPolicy,
                         GaussianActor, GaussianPolicy, UgsState,
                         actor_update, bc_update, critic_update,
                         evaluate_policy, gauss_bc_update, gcbc_update,
                         gcrl_actor_update, gcrl_q_update, select_ugs_goal)
from nfrl.autodiff import Adam, Tape
from nfrl.checks import check_gradients, check_jacobian, check_occupancy, check_tabular
from nfrl.config import ALPHA_PRESETS, GAMMA_FUT_PRESETS, RunConfig
from nfrl.densities import TwoGaussMixture, delta_dataset, gauss_target, ring_target
from nfrl.envs import (PointMassEnv, ReplayBuffer, generate_expert_dataset,
                       make_maze, recompute_rewards, rollout)
from nfrl.flow import ConditionContext, FlowConfig, FlowModel
from nfrl.objectives import ViTarget, denoised_sample, vi_loss


def linear_lr(opt, step, steps, lr0, lr1):
    opt.lr = lr0 + (lr1 - lr0) * step / max(steps - 1, 1)


# ---------------------------------------------------------------------------
# A1/A2: exact-likelihood training against a closed-form mixture


@pytest.fixture(scope="module")
def two_gauss_model():
    mix = TwoGaussMixture()
    data = mix.sample(np.random.default_rng(30), 20_000)
    model = trainutil.density_model(blocks=4, channels=32, rep_dim=4, seed=31)
    trainutil.fit_density(model, data, steps=2000, lr=4e-3, lr_final=5e-4,
                          batch=384, noise_std=0.0, seed=32)
    return mix, model


def test_a1_density_mle_matches_mixture_entropy(two_gauss_model, criterion):
    mix, model = two_gauss_model
    entropy = mix.mc_entropy(np.random.default_rng(33), 1_000_000)
    held = mix.sample(np.random.default_rng(34), 100_000)
    nll = -float(np.mean(model.log_prob_values(held)))
    gap = abs(nll - entropy)
    criterion("A1 two-gauss held-out NLL vs MC entropy", f"{gap:.4f}", "<",
              "0.1", gap < 0.1)


def test_a2_quadrature_mass_is_unit(two_gauss_model, criterion):
    _, model = two_gauss_model
    xs = np.linspace(-6.0, 6.0, 400)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mass = float(np.sum(np.exp(model.log_prob_values(grid)))
                 * (xs[1] - xs[0]) ** 2)
    criterion("A2 exp(log_prob) quadrature over [-6,6]^2", f"{mass:.4f}",
              "in", "[0.98, 1.02]", 0.98 <= mass <= 1.02)


# ---------------------------------------------------------------------------
# A3/A4: invertibility and gradient contracts (full-size property sweeps)


def test_a3_invertibility_and_jacobian(criterion):
    results = {r.name: r for r in check_jacobian(quick=False)}
    rt = results["round-trip max error"]
    fd = results["log-det vs fd determinant"]
    criterion("A3 round-trip over 1000 model/input pairs",
              f"{rt.measured:.2e}", "<", "1e-9", rt.ok)
    criterion("A3 analytic log-det vs FD determinant",
              f"{fd.measured:.2e}", "<", "1e-5", fd.ok)


def test_a4_every_loss_matches_finite_differences(criterion):
    results = check_gradients(quick=False)
    worst = max(r.measured for r in results)
    criterion("A4 worst FD relative error over all losses",
              f"{worst:.2e}", "<", "1e-4", all(r.ok for r in results))


# ---------------------------------------------------------------------------
# A5: variational inference against two unnormalized targets


def test_a5_vi_gaussian_target_moments(criterion):
    target = ViTarget(gauss_target([3.0, -2.0]), 2)
    model = trainutil.density_model(blocks=4, channels=16, rep_dim=4, seed=40)
    opt = Adam(model.store, 3e-3)
    rng = np.random.default_rng(41)
    steps = 2500
    for step in range(steps):
        linear_lr(opt, step, steps, 3e-3, 3e-4)
        tape = Tape(model.store)
        vi_loss(model, target, 256, tape, rng)
        opt.step(tape.grad)
    x, _ = model.sample_values(ConditionContext.unconditional(100_000),
                               np.random.default_rng(42))
    mean_err = float(np.max(np.abs(x.mean(axis=0) - [3.0, -2.0])))
    var_err = float(np.max(np.abs(x.var(axis=0) - 1.0)))
    criterion("A5 VI gaussian target max per-dim mean error",
              f"{mean_err:.4f}", "<", "0.05", mean_err < 0.05)
    criterion("A5 VI gaussian target max per-dim var error",
              f"{var_err:.4f}", "<", "0.1", var_err < 0.1)


def test_a5_vi_ring_target_grid_kl(criterion):
    target = ViTarget(ring_target(), 2)
    model = trainutil.density_model(blocks=6, channels=32, rep_dim=4, seed=50)
    opt = Adam(model.store, 3e-3)
    rng = np.random.default_rng(51)
    steps = 3000
    for step in range(steps):
        linear_lr(opt, step, steps, 3e-3, 3e-4)
        tape = Tape(model.store)
        vi_loss(model, target, 256, tape, rng)
        opt.step(tape.grad)
    xs = np.linspace(-4.0, 4.0, 300)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    log_t, _ = ring_target()(grid)
    pt = np.exp(log_t)
    pt /= pt.sum()
    pm = np.exp(model.log_prob_values(grid))
    pm /= pm.sum()
    live = (pt > 0) | (pm > 0)
    eps = 1e-300
    kl_mt = float(np.sum(pm[live] * (np.log(pm[live] + eps)
                                     - np.log(pt[live] + eps))))
    kl_tm = float(np.sum(pt[live] * (np.log(pt[live] + eps)
                                     - np.log(pm[live] + eps))))
    worst = max(kl_mt, kl_tm)
    criterion("A5 VI ring grid KL (both directions)", f"{worst:.4f}", "<",
              "0.05", worst < 0.05)


# ---------------------------------------------------------------------------
# A6: exact term isolation in the critic-regularized actor loss


def _actor_batch(seed=0):
    rng = np.random.default_rng(seed)
    s = rng.random((64, 4))
    a = np.clip(0.3 * rng.standard_normal((64, 2)), -1.0, 1.0)
    return s, a


def test_a6_alpha_zero_loss_is_neg_mean_q(criterion):
    actor = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=4, blocks=2,
                                 channels=6, encoder_layers=1, rep_dim=4,
                                 seed=0))
    critic = CriticNet(6, (8, 8), seed=1)
    m = actor_update(actor, critic, _actor_batch(), ActorLossWeights(0.0, 0.0),
                     Tape(actor.store), np.random.default_rng(2))
    err = abs(m["actor_loss"] + m["q_pi_mean"])
    criterion("A6 alpha=0: |loss + mean Q|", f"{err:.2e}", "<=", "1e-10",
              err <= 1e-10)


def test_a6_zero_critic_loss_is_alpha_bc_term(criterion):
    actor = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=4, blocks=2,
                                 channels=6, encoder_layers=1, rep_dim=4,
                                 seed=3))
    critic = CriticNet(6, (8, 8), seed=4)
    critic.store.values[:] = 0.0
    critic.target.values[:] = 0.0
    alpha = 3.7
    m = actor_update(actor, critic, _actor_batch(5),
                     ActorLossWeights(0.0, alpha), Tape(actor.store),
                     np.random.default_rng(6))
    err = abs(m["actor_loss"] - alpha * m["bc_nll"])
    criterion("A6 Q=0: |loss - alpha * bc_nll|", f"{err:.2e}", "<=", "1e-10",
              err <= 1e-10)


# ---------------------------------------------------------------------------
# A7: tabular chain equivalences


def test_a7_critic_matches_dp_fixed_point(criterion):
    results = {r.name: r for r in check_tabular(quick=True)}
    r = results["chain critic vs dp fixed point"]
    criterion("A7 critic vs DP fixed point", f"{r.measured:.2e}", "<", "0.01",
              r.ok)


def test_a7_occupancy_model_matches_exact(criterion):
    [r] = check_occupancy(quick=True)
    criterion("A7 occupancy model TV distance", f"{r.measured:.4f}", "<",
              "0.05", r.ok)


# ---------------------------------------------------------------------------
# A8: bimodal route data, flow policy vs diagonal Gaussian


def test_a8_flow_keeps_both_modes_gaussian_does_not(criterion):
    env = PointMassEnv(make_maze("two_rooms"))
    trajs, _ = generate_expert_dataset(env, 300, {"left": 0.5, "right": 0.5},
                                       np.random.default_rng(0),
                                       noise_std=0.04)
    buf = ReplayBuffer(capacity=len(trajs))
    for t in trajs:
        buf.add(t)

    actor = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=6, blocks=4,
                                 channels=48, encoder_layers=2, rep_dim=16,
                                 seed=1))
    gauss = GaussianPolicy(6, hidden=(64, 64), seed=2)
    a_opt, g_opt = Adam(actor.store, 3e-3), Adam(gauss.store, 3e-3)
    a_rng, g_rng = np.random.default_rng(3), np.random.default_rng(3)
    steps = 6000
    for step in range(steps):
        linear_lr(a_opt, step, steps, 3e-3, 2e-4)
        g_opt.lr = a_opt.lr
        gcbc_update(actor, buf, 0.99, Tape(actor.store), a_rng, batch=256,
                    noise_std=0.1, opt=a_opt)
        s, a, g = buf.sample_gcbc_batch(256, 0.99, g_rng)
        gauss_bc_update(gauss, (np.concatenate([s, g], axis=1), a),
                        Tape(gauss.store), g_rng, noise_std=0.1, opt=g_opt)

    nf_rate, gauss_rate = {}, {}
    for mode in ("left", "right"):
        goal = env.maze.goals[mode]
        nf_rate[mode] = evaluate_policy(
            FlowPolicy(actor, goal=goal, denoise=True), env, goal,
            n_episodes=50, seed=10, workers=4).success_rate
        gauss_rate[mode] = evaluate_policy(
            GaussianActor(gauss, goal=goal), env, goal,
            n_episodes=50, seed=10, workers=4).success_rate
    nf_min = min(nf_rate.values())
    gauss_min = min(gauss_rate.values())
    criterion("A8 flow GCBC min success over both modes",
              f"{nf_min:.2f}", ">=", "0.80", nf_min >= 0.80)
    criterion("A8 gaussian policy min success over both modes",
              f"{gauss_min:.2f}", "<", "0.50", gauss_min < 0.50)


# ---------------------------------------------------------------------------
# A9: offline RL on mixed-quality data, 5-seed median


def _drifting_walker():
    prev = np.zeros(2)

    def act(state, rng):
        nonlocal prev
        prev = np.clip(0.9 * prev + 0.6 * rng.standard_normal(2), -1.0, 1.0)
        return prev

    return act


def _u_maze_actor(seed):
    return FlowModel(FlowConfig(event_dim=2, raw_cond_dim=4, blocks=3,
                                channels=32, encoder_layers=2, rep_dim=16,
                                seed=seed))


def test_a9_rlbc_beats_bc_by_twenty_percent(criterion):
    env = PointMassEnv(make_maze("u_maze"))
    goal = np.asarray(env.maze.goals["default"])
    bc_returns, rlbc_returns = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        trajs = [rollout(env, _drifting_walker(), rng, episode_id=ep)
                 for ep in range(160)]
        expert, _ = generate_expert_dataset(env, 40, {"default": 1.0}, rng,
                                            noise_std=0.04)
        trajs += expert
        recompute_rewards(trajs, goal)
        buf = ReplayBuffer(capacity=len(trajs))
        for t in trajs:
            buf.add(t)

        bc = _u_maze_actor(seed + 100)
        opt = Adam(bc.store, 3e-3)
        brng = np.random.default_rng(seed + 1)
        for step in range(2500):
            linear_lr(opt, step, 2500, 3e-3, 3e-4)
            _, _, s, a = buf.sample_state_action(256, brng)
            bc_update(bc, (s, a), Tape(bc.store), brng, opt=opt)

        actor = _u_maze_actor(seed + 100)
        critic = CriticNet(6, (64, 64), tau=0.005, twin=True, seed=seed + 200)
        a_opt, c_opt = Adam(actor.store, 3e-3), Adam(critic.store, 3e-3)
        arng = np.random.default_rng(seed + 1)
        weights = ActorLossWeights(lambda_ent=0.0, alpha_bc=1.0)
        for step in range(4000):
            linear_lr(a_opt, step, 4000, 3e-3, 3e-4)
            c_opt.lr = a_opt.lr
            s, a, r, sn, _ = buf.sample_transitions(256, arng)
            critic_update(critic, (s, a, r, sn), actor, 0.99,
                          Tape(critic.store), arng, opt=c_opt)
            _, _, s, a = buf.sample_state_action(256, arng)
            actor_update(actor, critic, (s, a), weights, Tape(actor.store),
                         arng, opt=a_opt)

        for pool, policy in ((bc_returns, bc), (rlbc_returns, actor)):
            rep = evaluate_policy(FlowPolicy(policy, denoise=True), env, goal,
                                  n_episodes=50, seed=seed + 10, workers=4)
            pool.append(rep.return_mean)

    bc_med = float(np.median(bc_returns))
    rlbc_med = float(np.median(rlbc_returns))
    bar = bc_med + 0.2 * abs(bc_med)
    criterion("A9 median RLBC return vs BC + 20%|BC|",
              f"{rlbc_med:.1f} (bc {bc_med:.1f})", ">=", f"{bar:.1f}",
              rlbc_med >= bar)


# ---------------------------------------------------------------------------
# A10: unsupervised goal sampling coverage, 5-seed median


def _coverage_entropy(buf, bins=8):
    pos = np.concatenate([buf.trajectory(i).states[:, :2]
                          for i in range(len(buf))])
    h, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=bins,
                             range=[[0, 1], [0, 1]])
    p = h.ravel() / h.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _explore_arm(strategy, seed, iters=50, grad_steps=24):
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
    for _ in range(iters):
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
    return _coverage_entropy(buf)


def test_a10_ugs_coverage_beats_uniform_baseline(criterion):
    gains = []
    for seed in range(5):
        base = _explore_arm("uniform", seed)
        ugs = _explore_arm("ugs", seed)
        gains.append(ugs - base)
    gain = float(np.median(gains))
    criterion("A10 median coverage entropy gain (nats)", f"{gain:+.3f}", ">=",
              "+0.2", gain >= 0.2)


# ---------------------------------------------------------------------------
# A11: denoising trick on the delta-trained model


def test_a11_denoising_tightens_samples(criterion):
    point = np.array([0.5, -0.25])
    data = delta_dataset(point, 4096)
    model = trainutil.density_model(blocks=3, channels=24, seed=13)
    trainutil.fit_density(model, data, steps=1200, lr=5e-3, batch=256,
                          noise_std=0.1, seed=14)
    ctx = ConditionContext.unconditional(10_000)
    raw, _ = model.sample_values(ctx, np.random.default_rng(16))
    den = denoised_sample(model, ctx, np.random.default_rng(16), 0.1)
    d_raw = np.linalg.norm(raw - point, axis=1)
    d_den = np.linalg.norm(den - point, axis=1)
    wins = int(np.sum(d_den < d_raw))
    p = binomtest(wins, d_raw.size, 0.5, alternative="greater").pvalue
    ok = d_den.mean() < d_raw.mean() and p < 1e-6
    criterion("A11 denoised closer (sign test p)", f"{p:.2e}", "<", "1e-6", ok)


# ---------------------------------------------------------------------------
# A12: config defaults equal the published table values


def test_a12_defaults_match_tables(criterion):
    bc = RunConfig(algorithm="bc").resolved()
    gcbc = RunConfig(algorithm="gcbc").resolved()
    rlbc = RunConfig(algorithm="rlbc").resolved()
    ugs = RunConfig(algorithm="ugs").resolved()
    ok = (bc.blocks == 12 and gcbc.blocks == 6 and rlbc.blocks == 6
          and ugs.blocks == 6
          and all(c.channels == 512 and c.noise_std == 0.1
                  and c.rep_dims == 512 for c in (bc, gcbc, rlbc, ugs))
          and ugs.mask_prob == 0.1 and ugs.candidate_count == 1024
          and ugs.goal_noise_std == 0.05 and rlbc.gamma == 0.99
          and GAMMA_FUT_PRESETS == (0.97, 0.99)
          and ALPHA_PRESETS == (1.0, 10.0)
          and gcbc.gamma_fut in GAMMA_FUT_PRESETS
          and rlbc.alpha_bc in ALPHA_PRESETS)
    criterion("A12 defaults equal published table values", "all-fields", "==",
              "tables", ok)
