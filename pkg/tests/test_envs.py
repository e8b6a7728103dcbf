import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from nfrl.envs import (GOAL_RADIUS, PointMassEnv, ReplayBuffer, Trajectory,
                       generate_expert_dataset, load_dataset, make_maze,
                       recompute_rewards, rollout, sample_future_goal,
                       save_dataset, trunc_geom_offsets)
from nfrl.errors import ConfigError, ContractError, StateError

import oracles


def env_for(name):
    return PointMassEnv(make_maze(name))


def straight_traj(h=10, x0=0.0):
    # positions march right one step per index; distinct at every t
    states = np.zeros((h + 1, 4))
    states[:, 0] = x0 + np.arange(h + 1) / (h + 1)
    return Trajectory(states, np.zeros((h, 2)), np.zeros(h))


# ---------------------------------------------------------------------------
# dynamics


def test_zero_action_from_rest_stays_put():
    env = env_for("open")
    s0 = env.reset()
    s1, r, done, _ = env.step(np.zeros(2))
    np.testing.assert_array_equal(s1, s0)
    assert r == 0.0 and not done


def test_constant_pull_decreases_goal_distance_monotonically():
    env = env_for("open")
    env.reset(goal=(0.85, 0.85))
    a = np.array([1.0, 1.0])
    dists = []
    for _ in range(20):
        s, r, done, _ = env.step(a)
        dists.append(-r)
    assert np.all(np.diff(dists) < 0)


def test_wall_blocks_normal_component():
    env = env_for("u_maze")
    env.reset(start=(0.3, 0.46))
    for _ in range(8):
        s, _, _, _ = env.step(np.array([0.0, 1.0]))
    assert s[1] < 0.5  # never crossed the y=0.5 wall
    assert s[3] == 0.0  # normal velocity zeroed on contact


def test_sliding_along_wall_keeps_tangential_motion():
    env = env_for("u_maze")
    env.reset(start=(0.3, 0.49))
    s, _, _, _ = env.step(np.array([1.0, 1.0]))
    assert s[1] < 0.5 and s[0] > 0.3 and s[2] > 0.0


@settings(max_examples=300, deadline=None)
@given(
    px=st.floats(0.02, 0.98), py=st.floats(0.02, 0.98),
    vx=st.floats(-0.5, 0.5), vy=st.floats(-0.5, 0.5),
    ax=st.floats(-2.0, 2.0), ay=st.floats(-2.0, 2.0),
)
def test_step_matches_reference_resolver(px, py, vx, vy, ax, ay):
    maze = make_maze("big_maze")
    env = PointMassEnv(maze)
    env.reset(start=(px, py), velocity=(vx, vy))
    s, _, _, _ = env.step(np.array([ax, ay]))
    ref_p, ref_v = oracles.collide_step_ref((px, py), (vx, vy), (ax, ay), maze.walls)
    np.testing.assert_array_equal(s[:2], ref_p)
    np.testing.assert_array_equal(s[2:], ref_v)


def test_positions_never_cross_walls_under_random_driving():
    maze = make_maze("two_rooms")
    env = PointMassEnv(maze)
    rng = np.random.default_rng(0)
    env.reset(start=(0.45, 0.5))
    prev = env.state()[:2]
    for _ in range(500):
        s, _, done, _ = env.step(rng.uniform(-1, 1, size=2))
        cur = s[:2]
        for axis, c, s0, s1 in maze.walls:
            i = 0 if axis == "v" else 1
            j = 1 - i
            if min(prev[j], cur[j]) >= s0 and max(prev[j], cur[j]) <= s1:
                assert (prev[i] - c) * (cur[i] - c) > 0
        prev = cur
        if done:
            env.reset(start=(0.45, 0.5))
            prev = env.state()[:2]


def test_goal_episode_terminates_with_success():
    env = env_for("open")
    env.reset(start=(0.5, 0.5), goal=(0.52, 0.5))
    done, n = False, 0
    while not done:
        s, r, done, info = env.step(np.array([1.0, 0.0]))
        n += 1
    assert info["success"] and n < env.maze.horizon
    assert -r <= GOAL_RADIUS
    with pytest.raises(StateError):
        env.step(np.zeros(2))


def test_reward_free_runs_full_horizon_with_zero_reward():
    env = env_for("open")
    traj = rollout(env, lambda s, r: np.array([0.3, -0.2]), np.random.default_rng(0))
    assert traj.horizon == env.maze.horizon
    assert np.all(traj.rewards == 0.0)


def test_bad_actions_rejected():
    env = env_for("open")
    env.reset()
    with pytest.raises(ContractError):
        env.step(np.array([np.nan, 0.0]))
    with pytest.raises(ContractError):
        env.step(np.zeros(3))


def test_replaying_actions_reproduces_states_exactly():
    env = env_for("u_maze")
    trajs, _ = generate_expert_dataset(env, 3, {"default": 1.0},
                                       np.random.default_rng(1))
    for traj in trajs:
        env.reset(start=traj.states[0, :2])
        for t in range(traj.horizon):
            s, _, _, _ = env.step(traj.actions[t])
            np.testing.assert_array_equal(s, traj.states[t + 1])


def test_unknown_maze_rejected():
    with pytest.raises(ConfigError):
        make_maze("spiral")


# ---------------------------------------------------------------------------
# future-goal sampling


def test_trunc_geom_degenerate_cases():
    rng = np.random.default_rng(0)
    assert np.all(trunc_geom_offsets(1e-9, np.full(100, 50), rng) == 1)
    assert np.all(trunc_geom_offsets(0.97, np.ones(100, dtype=int), rng) == 1)


def test_trunc_geom_uniform_at_gamma_one():
    rng = np.random.default_rng(1)
    k = trunc_geom_offsets(1.0, np.full(200_000, 5), rng)
    counts = np.bincount(k, minlength=6)[1:]
    assert chisquare(counts).pvalue > 0.01


def test_trunc_geom_matches_exact_pmf():
    rng = np.random.default_rng(2)
    n, draws = 200, 1_000_000
    k = trunc_geom_offsets(0.97, np.full(draws, n), rng)
    counts = np.bincount(k, minlength=n + 1)[1:]
    expected = oracles.trunc_geom_pmf(0.97, n) * draws
    assert chisquare(counts, expected).pvalue > 0.01


def test_trunc_geom_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        trunc_geom_offsets(0.0, np.ones(3, dtype=int), rng)
    with pytest.raises(ContractError):
        trunc_geom_offsets(0.9, np.zeros(3, dtype=int), rng)


def test_future_goal_stays_inside_episode():
    buf = ReplayBuffer(capacity=4)
    buf.add(straight_traj(h=10, x0=0.0))
    buf.add(straight_traj(h=10, x0=100.0))
    rng = np.random.default_rng(3)
    for _ in range(200):
        g = sample_future_goal(buf, t=2, gamma_fut=0.99, rng=rng, traj_index=0)
        assert 0.0 <= g[0] < 1.0  # never from the x0=100 episode
    for _ in range(200):
        g = sample_future_goal(buf, t=5, gamma_fut=0.99, rng=rng, traj_index=1)
        assert g[0] >= 100.0


def test_future_goal_is_strictly_in_the_future():
    buf = ReplayBuffer(capacity=1)
    buf.add(straight_traj(h=20))
    rng = np.random.default_rng(4)
    for t in range(20):
        g = sample_future_goal(buf, t=t, gamma_fut=0.97, rng=rng, traj_index=0)
        assert g[0] > t / 21  # strictly beyond the x-position at time t


def test_future_goal_last_index_resamples_t():
    buf = ReplayBuffer(capacity=1)
    buf.add(straight_traj(h=10))
    g = sample_future_goal(buf, t=10, gamma_fut=0.99,
                           rng=np.random.default_rng(5), traj_index=0)
    assert np.isfinite(g).all()
    with pytest.raises(ContractError):
        sample_future_goal(buf, t=-1, gamma_fut=0.99,
                           rng=np.random.default_rng(6), traj_index=0)


def test_gcbc_batch_goals_come_from_own_future():
    buf = ReplayBuffer(capacity=2)
    buf.add(straight_traj(h=30, x0=0.0))
    buf.add(straight_traj(h=30, x0=-100.0))
    s, a, g = buf.sample_gcbc_batch(512, 0.97, np.random.default_rng(7))
    assert s.shape == (512, 4) and a.shape == (512, 2) and g.shape == (512, 2)
    assert np.all(g[:, 0] > s[:, 0])  # future means larger x in these episodes
    # goals from the shifted episode stay in its own coordinate range
    from_shifted = s[:, 0] < -50
    assert np.all(g[from_shifted, 0] < -50)
    assert np.all(g[~from_shifted, 0] >= 0)


def test_replay_buffer_ring_eviction_and_empty_error():
    buf = ReplayBuffer(capacity=2)
    with pytest.raises(StateError):
        buf.sample_state_action(1, np.random.default_rng(0))
    for i in range(3):
        t = straight_traj(h=5)
        t.episode_id = i
        buf.add(t)
    assert len(buf) == 2
    assert sorted(tr.episode_id for tr in buf._trajs) == [1, 2]


def test_sample_transitions_done_only_at_episode_end():
    buf = ReplayBuffer(capacity=1)
    buf.add(straight_traj(h=8))
    s, a, r, sn, done = buf.sample_transitions(2000, np.random.default_rng(8))
    # s' is the very next state of the same episode
    np.testing.assert_allclose(sn[:, 0], s[:, 0] + 1 / 9, atol=1e-12)
    assert np.all(done == (np.rint(sn[:, 0] * 9) == 8))


# ---------------------------------------------------------------------------
# scripted experts and dataset files


def test_open_maze_expert_always_reaches_goal():
    env = env_for("open")
    trajs, _ = generate_expert_dataset(env, 10, {"default": 1.0},
                                       np.random.default_rng(9))
    goal = np.array(env.maze.goals["default"])
    for traj in trajs:
        d = np.linalg.norm(traj.states[:, :2] - goal, axis=1)
        assert d.min() <= GOAL_RADIUS


def test_u_maze_expert_final_distance():
    env = env_for("u_maze")
    trajs, _ = generate_expert_dataset(env, 40, {"default": 1.0},
                                       np.random.default_rng(10))
    goal = np.array(env.maze.goals["default"])
    finals = [np.linalg.norm(t.states[-1, :2] - goal) for t in trajs]
    assert np.mean(np.array(finals) < 0.05) >= 0.95


def test_bimodal_mix_counts_within_binomial_bound():
    env = env_for("two_rooms")
    trajs, modes = generate_expert_dataset(env, 1000, {"left": 0.5, "right": 0.5},
                                           np.random.default_rng(11))
    n_left = np.sum(modes == 0.0)
    assert abs(n_left - 500) <= 5 * np.sqrt(1000 * 0.25)
    # the two modes are distinguishable from the very first action
    a0 = np.stack([t.actions[0] for t in trajs])
    assert np.all(a0[modes == 0.0, 0] < 0)
    assert np.all(a0[modes == 1.0, 0] > 0)


def test_failing_expert_aborts_generation():
    from nfrl import envs as envs_mod
    env = env_for("u_maze")
    saved = envs_mod.ROUTES["u_maze"]["default"]
    # a route that parks short of the goal can never satisfy the success bar
    envs_mod.ROUTES["u_maze"]["default"] = [[(0.8, 0.25)]]
    try:
        with pytest.raises(ContractError, match="expert"):
            generate_expert_dataset(env, 5, {"default": 1.0},
                                    np.random.default_rng(12))
    finally:
        envs_mod.ROUTES["u_maze"]["default"] = saved


def test_mode_mix_validation():
    env = env_for("two_rooms")
    with pytest.raises(ContractError):
        generate_expert_dataset(env, 5, {"left": 0.7, "right": 0.7},
                                np.random.default_rng(0))
    with pytest.raises(ConfigError):
        generate_expert_dataset(env, 5, {"sideways": 1.0}, np.random.default_rng(0))


def test_dataset_file_round_trip_is_bit_identical(tmp_path):
    env = env_for("u_maze")
    rng = np.random.default_rng(13)
    trajs, modes = generate_expert_dataset(env, 4, {"default": 1.0}, rng)
    recompute_rewards(trajs, env.maze.goals["default"])
    path = tmp_path / "u_maze.ds"
    save_dataset(path, trajs, env_id="u_maze", seed=13, modes=modes)
    header, loaded, lmodes = load_dataset(path)
    assert header["env"] == "u_maze" and int(header["n_traj"]) == 4
    assert int(header["horizon"]) == env.maze.horizon
    np.testing.assert_array_equal(lmodes, modes)
    for a, b in zip(trajs, loaded):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)


def test_dataset_rejects_garbage_and_truncation(tmp_path):
    p = tmp_path / "x.ds"
    p.write_bytes(b"hello=world\n" + b"\x00" * 64)
    with pytest.raises(ContractError, match="dataset"):
        load_dataset(p)
    env = env_for("open")
    trajs, _ = generate_expert_dataset(env, 2, {"default": 1.0},
                                       np.random.default_rng(14))
    good = tmp_path / "good.ds"
    save_dataset(good, trajs, env_id="open", seed=0)
    blob = good.read_bytes()
    (tmp_path / "cut.ds").write_bytes(blob[:-16])
    with pytest.raises(ContractError, match="size"):
        load_dataset(tmp_path / "cut.ds")


def test_recomputed_rewards_match_env_reward_function():
    env = env_for("u_maze")
    goal = np.array(env.maze.goals["default"])
    trajs, _ = generate_expert_dataset(env, 2, {"default": 1.0},
                                       np.random.default_rng(15))
    recompute_rewards(trajs, goal)
    traj = trajs[0]
    env2 = env_for("u_maze")
    env2.reset(start=traj.states[0, :2], goal=goal)
    for t in range(traj.horizon):
        _, r, done, _ = env2.step(traj.actions[t])
        np.testing.assert_allclose(r, traj.rewards[t], atol=1e-15)
        if done:
            break


def test_trajectory_validation():
    with pytest.raises(ContractError):
        Trajectory(np.zeros((5, 4)), np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(ContractError):
        Trajectory(np.full((6, 4), np.nan), np.zeros((5, 2)), np.zeros(5))
