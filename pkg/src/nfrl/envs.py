"""Point-mass maze environments, trajectory storage, and dataset generation.

The dynamics are a drag-damped double integrator on the unit square,
    vel' = (1 - drag) * (vel + dt * a),   pos' = pos + dt * vel',
with axis-aligned wall segments resolved one axis at a time: the x move is
checked against vertical walls at the old y, then the y move against
horizontal walls at the new x. A blocked axis parks the position a hair off
the wall and zeroes that velocity component, so positions never end up on a
wall. Goals live in position space (the first two state coordinates).

Datasets are rectangular: every episode runs the full horizon, collected
reward-free, and rewards for offline RL are recomputed afterwards with the
same reward function the environment uses online.
"""
from __future__ import annotations

import subprocess
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, StateError

Array = np.ndarray

DT = 0.05
DRAG = 0.1
GOAL_RADIUS = 0.05
WALL_EPS = 1e-6

# wall = (axis, c, s0, s1): "v" is the segment x=c, y in [s0, s1];
# "h" is y=c, x in [s0, s1]
Wall = tuple


@dataclass(frozen=True)
class MazeSpec:
    name: str
    walls: tuple
    start: tuple
    goals: dict  # mode name -> goal position
    horizon: int = 200


def _two_rooms_walls():
    # three chambers separated by two double (thick) walls, each pierced by
    # a low and a high doorway; the doorways are the y-gaps left open
    segs = []
    for c in (0.33, 0.41, 0.59, 0.67):
        segs += [("v", c, 0.0, 0.19), ("v", c, 0.29, 0.71), ("v", c, 0.81, 1.0)]
    return tuple(segs)


def _big_maze_walls():
    # 2x2 rooms chained bottom-left -> bottom-right -> top-right -> top-left
    return (
        ("v", 0.5, 0.0, 0.2), ("v", 0.5, 0.3, 0.5),   # lower door y in [0.2, 0.3]
        ("h", 0.5, 0.0, 0.7), ("h", 0.5, 0.8, 1.0),   # right door x in [0.7, 0.8]
        ("v", 0.5, 0.5, 0.7), ("v", 0.5, 0.8, 1.0),   # upper door y in [0.7, 0.8]
    )


MAZES = {
    "open": MazeSpec("open", (), (0.15, 0.15), {"default": (0.85, 0.85)}),
    "u_maze": MazeSpec("u_maze", (("h", 0.5, 0.0, 0.65),),
                       (0.12, 0.12), {"default": (0.12, 0.88)}),
    "big_maze": MazeSpec("big_maze", _big_maze_walls(),
                         (0.15, 0.15), {"default": (0.15, 0.85)}),
    "two_rooms": MazeSpec("two_rooms", _two_rooms_walls(), (0.5, 0.5),
                          {"left": (0.15, 0.5), "right": (0.85, 0.5)},
                          horizon=140),
}


def make_maze(name: str) -> MazeSpec:
    if name not in MAZES:
        raise ConfigError(f"unknown maze {name!r} (choices: {', '.join(MAZES)})")
    return MAZES[name]


class PointMassEnv:
    """Deterministic 2-D point mass with walls. State is [pos, vel] in R^4.

    A reset with a goal gives dense reward -||pos' - goal|| and terminates at
    the goal radius; a reset without one is reward-free (r=0) and runs the
    full horizon. Stepping a finished episode is a state error.
    """

    state_dim = 4
    action_dim = 2

    def __init__(self, maze: MazeSpec):
        self.maze = maze
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._goal: Optional[Array] = None
        self._t = 0
        self._done = True

    @staticmethod
    def reward(pos: Array, goal: Array) -> float:
        return -float(np.linalg.norm(np.asarray(pos) - np.asarray(goal)))

    def reset(self, start=None, goal=None, velocity=None) -> Array:
        self._pos = np.array(start if start is not None else self.maze.start,
                             dtype=np.float64)
        self._vel = (np.zeros(2) if velocity is None
                     else np.array(velocity, dtype=np.float64))
        self._goal = None if goal is None else np.asarray(goal, dtype=np.float64)
        self._t = 0
        self._done = False
        return self.state()

    def state(self) -> Array:
        return np.concatenate([self._pos, self._vel])

    def step(self, action: Array):
        if self._done:
            raise StateError("step() on a finished episode; call reset()")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ContractError("action must be a finite length-2 vector")
        a = np.clip(a, -1.0, 1.0)
        vel = (self._vel + DT * a) * (1.0 - DRAG)
        pos = self._pos

        nx = pos[0] + DT * vel[0]
        for axis, c, s0, s1 in self.maze.walls:
            if axis == "v" and s0 <= pos[1] <= s1 and (pos[0] - c) * (nx - c) < 0:
                nx = c + WALL_EPS * np.sign(pos[0] - c)
                vel[0] = 0.0
        ny = pos[1] + DT * vel[1]
        for axis, c, s0, s1 in self.maze.walls:
            if axis == "h" and s0 <= nx <= s1 and (pos[1] - c) * (ny - c) < 0:
                ny = c + WALL_EPS * np.sign(pos[1] - c)
                vel[1] = 0.0

        new = np.array([nx, ny])
        for i in range(2):
            if new[i] < 0.0:
                new[i], vel[i] = 0.0, 0.0
            elif new[i] > 1.0:
                new[i], vel[i] = 1.0, 0.0

        self._pos, self._vel = new, vel
        self._t += 1
        if self._goal is None:
            r, at_goal = 0.0, False
        else:
            r = self.reward(new, self._goal)
            at_goal = -r <= GOAL_RADIUS
        self._done = at_goal or self._t >= self.maze.horizon
        return self.state(), r, self._done, {"success": at_goal, "t": self._t}


# ---------------------------------------------------------------------------
# trajectory storage


@dataclass
class Transition:
    s: Array
    a: Array
    r: float
    sn: Array
    done: bool


@dataclass
class Trajectory:
    states: Array   # (H+1, state_dim)
    actions: Array  # (H, action_dim)
    rewards: Array  # (H,)
    episode_id: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        h = self.actions.shape[0]
        if self.states.shape[0] != h + 1 or self.rewards.shape[0] != h:
            raise ContractError("trajectory lengths inconsistent")
        for arr in (self.states, self.actions, self.rewards):
            if not np.all(np.isfinite(arr)):
                raise ContractError("trajectory contains non-finite values")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def position_goal(state: Array) -> Array:
    """Default goal extractor: the position slice of the state."""
    return np.asarray(state)[..., :2]


class ReplayBuffer:
    """Ring of whole trajectories; future-goal draws never leave an episode."""

    def __init__(self, capacity: int, goal_extractor: Callable = position_goal):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self.goal_extractor = goal_extractor
        self._trajs: list = []
        self._next = 0

    def add(self, traj: Trajectory):
        if len(self._trajs) < self.capacity:
            self._trajs.append(traj)
        else:
            self._trajs[self._next] = traj
            self._next = (self._next + 1) % self.capacity

    def __len__(self):
        return len(self._trajs)

    def trajectory(self, i: int) -> Trajectory:
        return self._trajs[i]

    def _require_data(self):
        if not self._trajs:
            raise StateError("replay buffer is empty")

    def sample_state_action(self, batch: int, rng: np.random.Generator):
        """Uniform (trajectory, t) pairs; returns (traj_idx, t, s, a)."""
        self._require_data()
        ti = rng.integers(0, len(self._trajs), size=batch)
        hs = np.array([self._trajs[i].horizon for i in ti])
        ts = rng.integers(0, hs)
        s = np.stack([self._trajs[i].states[t] for i, t in zip(ti, ts)])
        a = np.stack([self._trajs[i].actions[t] for i, t in zip(ti, ts)])
        return ti, ts, s, a

    def sample_transitions(self, batch: int, rng: np.random.Generator):
        """(s, a, r, s', done) arrays; done marks the last step of an episode."""
        ti, ts, s, a = self.sample_state_action(batch, rng)
        r = np.array([self._trajs[i].rewards[t] for i, t in zip(ti, ts)])
        sn = np.stack([self._trajs[i].states[t + 1] for i, t in zip(ti, ts)])
        done = np.array([t + 1 == self._trajs[i].horizon for i, t in zip(ti, ts)])
        return s, a, r, sn, done

    def sample_states(self, n: int, rng: np.random.Generator) -> Array:
        """Uniform random states across the buffer (for goal candidates)."""
        self._require_data()
        ti = rng.integers(0, len(self._trajs), size=n)
        out = []
        for i in ti:
            traj = self._trajs[i]
            out.append(traj.states[rng.integers(0, traj.horizon + 1)])
        return np.stack(out)

    def sample_gcbc_batch(self, batch: int, gamma_fut: float,
                          rng: np.random.Generator):
        """(s, a, g) with g drawn from each pair's own future, never crossing
        episode boundaries."""
        ti, ts, s, a = self.sample_state_action(batch, rng)
        hs = np.array([self._trajs[i].horizon for i in ti])
        deltas = trunc_geom_offsets(gamma_fut, hs - ts, rng)
        g = np.stack([self.goal_extractor(self._trajs[i].states[t + d])
                      for i, t, d in zip(ti, ts, deltas)])
        return s, a, g


def trunc_geom_offsets(gamma: float, n_max, rng: np.random.Generator) -> Array:
    """Draw offsets with P(delta) proportional to gamma^(delta-1) on [1, n_max].

    Inverse-CDF under the closed form CDF(k) = (1 - gamma^k) / (1 - gamma^n),
    with the gamma->1 limit handled as the uniform distribution.
    """
    if not 0.0 < gamma <= 1.0:
        raise ContractError("gamma must be in (0, 1]")
    n_max = np.atleast_1d(np.asarray(n_max, dtype=np.int64))
    if np.any(n_max < 1):
        raise ContractError("future-goal draw needs at least one future state")
    u = rng.random(n_max.shape[0])
    if gamma == 1.0:
        k = np.floor(u * n_max).astype(np.int64) + 1
    else:
        norm = 1.0 - np.power(gamma, n_max.astype(np.float64))
        k = np.floor(np.log1p(-u * norm) / np.log(gamma)).astype(np.int64) + 1
    return np.clip(k, 1, n_max)


def sample_future_goal(buffer: ReplayBuffer, t: int, gamma_fut: float,
                       rng: np.random.Generator, traj_index: Optional[int] = None):
    """Goal from the discounted future of a buffer trajectory at time t.

    t pointing at a trajectory's last state has no future; it is rejected and
    redrawn uniformly over valid indices.
    """
    buffer._require_data()
    if traj_index is None:
        traj_index = int(rng.integers(0, len(buffer)))
    traj = buffer.trajectory(traj_index)
    if t < 0:
        raise ContractError("t must be >= 0")
    if t >= traj.horizon:
        t = int(rng.integers(0, traj.horizon))
    delta = int(trunc_geom_offsets(gamma_fut, traj.horizon - t, rng)[0])
    return buffer.goal_extractor(traj.states[t + delta])


# ---------------------------------------------------------------------------
# scripted experts and dataset generation

KP = 10.0
KD = 3.0
WAYPOINT_RADIUS = 0.08

# route families: maze -> mode -> list of alternative waypoint chains, each
# ending at the mode's goal. two_rooms has two doorways per goal, giving two
# distinct optimal-length route families per mode.
ROUTES = {
    "open": {"default": [[(0.85, 0.85)]]},
    "u_maze": {"default": [[(0.8, 0.25), (0.8, 0.75), (0.12, 0.88)]]},
    "big_maze": {"default": [[(0.3, 0.25), (0.6, 0.25), (0.75, 0.4),
                              (0.75, 0.6), (0.6, 0.75), (0.3, 0.75),
                              (0.15, 0.85)]]},
    "two_rooms": {
        "left": [[(0.46, 0.24), (0.28, 0.24), (0.15, 0.5)],
                 [(0.46, 0.76), (0.28, 0.76), (0.15, 0.5)]],
        "right": [[(0.54, 0.24), (0.72, 0.24), (0.85, 0.5)],
                  [(0.54, 0.76), (0.72, 0.76), (0.85, 0.5)]],
    },
}


class WaypointController:
    """PD tracker through a waypoint chain: a = kp (w - pos) - kd vel."""

    def __init__(self, waypoints, noise_std: float = 0.0):
        self.waypoints = [np.asarray(w, dtype=np.float64) for w in waypoints]
        self.noise_std = noise_std
        self._i = 0

    def reset(self):
        self._i = 0

    def act(self, state: Array, rng: np.random.Generator) -> Array:
        pos, vel = state[:2], state[2:]
        while (self._i < len(self.waypoints) - 1
               and np.linalg.norm(pos - self.waypoints[self._i]) < WAYPOINT_RADIUS):
            self._i += 1
        a = KP * (self.waypoints[self._i] - pos) - KD * vel
        if self.noise_std > 0:
            a = a + self.noise_std * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


def rollout(env: PointMassEnv, policy_act: Callable, rng: np.random.Generator,
            start=None, goal=None, episode_id: int = 0) -> Trajectory:
    """Run one episode with act(state, rng) -> action; returns the trajectory."""
    s = env.reset(start=start, goal=goal)
    states, actions, rewards = [s], [], []
    done = False
    while not done:
        a = policy_act(s, rng)
        s, r, done, _ = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.stack(states), np.stack(actions), np.array(rewards),
                      episode_id=episode_id)


def recompute_rewards(trajs, goal) -> None:
    """Overwrite each trajectory's rewards with the env's dense goal reward,
    evaluated at the post-step positions. Used after reward-free collection."""
    goal = np.asarray(goal, dtype=np.float64)
    for traj in trajs:
        traj.rewards = -np.linalg.norm(traj.states[1:, :2] - goal, axis=1)


def generate_expert_dataset(env: PointMassEnv, n_traj: int, mode_mix,
                            rng: np.random.Generator, noise_std: float = 0.04,
                            min_success: float = 0.95):
    """Scripted-expert episodes, reward-free, full horizon, rectangular.

    mode_mix is {mode: probability} over the maze's goal modes. Success means
    passing within the goal radius at some step. Returns (trajectories, modes)
    and raises if the expert under-performs.
    """
    if n_traj < 1:
        raise ContractError("n_traj must be >= 1")
    maze = env.maze
    names = sorted(mode_mix)
    probs = np.array([mode_mix[m] for m in names], dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ContractError("mode_mix must be a probability distribution")
    for m in names:
        if m not in maze.goals:
            raise ConfigError(f"maze {maze.name!r} has no goal mode {m!r}")

    trajs, modes, hits = [], [], 0
    for ep in range(n_traj):
        mode = names[rng.choice(len(names), p=probs)]
        route = ROUTES[maze.name][mode]
        ctl = WaypointController(route[rng.integers(0, len(route))], noise_std)
        ctl.reset()
        traj = rollout(env, ctl.act, rng, episode_id=ep)
        goal = np.asarray(maze.goals[mode])
        if np.min(np.linalg.norm(traj.states[:, :2] - goal, axis=1)) <= GOAL_RADIUS:
            hits += 1
        trajs.append(traj)
        modes.append(mode)
    rate = hits / n_traj
    if rate < min_success:
        raise ContractError(
            f"scripted expert reached the goal on {rate:.0%} of episodes "
            f"(needs >= {min_success:.0%})")
    return trajs, np.array([names.index(m) for m in modes], dtype=np.float64)


# ---------------------------------------------------------------------------
# dataset files: one text header line, then raw little-endian float64 arrays


def generator_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"pkg-{__version__}"


def save_dataset(path, trajs, env_id: str, seed: int, modes=None,
                 extra: Optional[dict] = None) -> None:
    n = len(trajs)
    if n == 0:
        raise ContractError("refusing to write an empty dataset")
    h = trajs[0].horizon
    sd = trajs[0].states.shape[1]
    ad = trajs[0].actions.shape[1]
    for t in trajs:
        if t.horizon != h or t.states.shape[1] != sd or t.actions.shape[1] != ad:
            raise ContractError("dataset episodes must be rectangular")
    states = np.stack([t.states for t in trajs])
    actions = np.stack([t.actions for t in trajs])
    rewards = np.stack([t.rewards for t in trajs])
    arrays = {"states": states, "actions": actions, "rewards": rewards}
    if modes is not None:
        arrays["modes"] = np.asarray(modes, dtype=np.float64)

    fields = {
        "format": "nfrl-dataset-v1",
        "n_traj": n, "horizon": h, "state_dim": sd, "action_dim": ad,
        "env": env_id, "seed": seed, "version": generator_version(),
        "order": ",".join(arrays),
    }
    if extra:
        fields.update(extra)
    header = " ".join(f"{k}={v}" for k, v in fields.items())
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path):
    """Returns (header dict, list of Trajectory, modes array or None)."""
    with open(path, "rb") as f:
        header_line = f.readline().decode("ascii").strip()
        payload = f.read()
    fields = dict(kv.split("=", 1) for kv in header_line.split(" "))
    if fields.get("format") != "nfrl-dataset-v1":
        raise ContractError(f"not a dataset file: {path}")
    n = int(fields["n_traj"])
    h = int(fields["horizon"])
    sd = int(fields["state_dim"])
    ad = int(fields["action_dim"])
    shapes = {"states": (n, h + 1, sd), "actions": (n, h, ad),
              "rewards": (n, h), "modes": (n,)}
    order = fields["order"].split(",")
    expect = sum(int(np.prod(shapes[name])) for name in order)
    if len(payload) != expect * 8:
        raise ContractError("dataset payload size does not match header")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, off = {}, 0
    for name in order:
        size = int(np.prod(shapes[name]))
        arrays[name] = flat[off:off + size].reshape(shapes[name]).copy()
        off += size
    trajs = [Trajectory(arrays["states"][i], arrays["actions"][i],
                        arrays["rewards"][i], episode_id=i) for i in range(n)]
    return fields, trajs, arrays.get("modes")
