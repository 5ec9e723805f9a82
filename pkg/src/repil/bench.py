"""Procedurally generated gridworld with pixel observations and a scripted expert.

Each layout id deterministically fixes the wall mask, agent start, goal and a
colour palette (background tint, agent and goal hues). Layout ids
``[0, n_train_layouts)`` are training levels and the next ``n_test_layouts`` ids
are test levels.

Observations are uint8 RGB frames of shape (render_size, render_size, 3).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .dataio import ActionSpace, Trajectory, TrajectoryDataset

UP, DOWN, LEFT, RIGHT, NOOP = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "noop")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
N_ACTIONS = 5


@dataclass(frozen=True)
class GridWorldConfig:
    grid_size: int = 8
    render_size: int = 48
    n_train_layouts: int = 100
    n_test_layouts: int = 100
    max_episode_steps: int = 32
    layout_seed: int = 0
    wall_fraction: float = 0.06
    min_start_goal_distance: int = 3
    # wall_fraction * grid_size**2 walls per layout (rounded); the goal is drawn from the
    # bottom-right goal_region x goal_region block (0: anywhere);
    # the default pins it to the corner cell, which keeps BC from 25 demonstrations tractable
    goal_region: int = 1
    frame_stack: int = 3

    def __post_init__(self):
        if min(self.grid_size, self.render_size, self.n_train_layouts, self.n_test_layouts,
               self.max_episode_steps, self.frame_stack) < 1:
            raise ValueError("gridworld sizes must be positive")
        if self.render_size % self.grid_size:
            raise ValueError("render_size must be a multiple of grid_size")
        if not 0 <= self.goal_region <= self.grid_size:
            raise ValueError("goal_region must lie in [0, grid_size]")
        if not 0 <= self.wall_fraction < 0.5:
            raise ValueError("wall_fraction must lie in [0, 0.5)")
        assert not set(self.train_layouts) & set(self.test_layouts)

    @property
    def train_layouts(self) -> range:
        return range(0, self.n_train_layouts)

    @property
    def test_layouts(self) -> range:
        return range(self.n_train_layouts, self.n_train_layouts + self.n_test_layouts)

    @property
    def n_layouts(self) -> int:
        return self.n_train_layouts + self.n_test_layouts

    @property
    def obs_shape(self) -> tuple:
        return (self.render_size, self.render_size, 3)

    @property
    def stacked_obs_shape(self) -> tuple:
        return (self.render_size, self.render_size, 3 * self.frame_stack)

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace("discrete", N_ACTIONS)

    def layout_range(self, split: str) -> range:
        if split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        return self.train_layouts if split == "train" else self.test_layouts


@dataclass(frozen=True, eq=False)
class Layout:
    layout_id: int
    walls: np.ndarray  # (G, G) bool
    start: tuple
    goal: tuple
    background: np.ndarray  # RGB uint8
    wall_color: np.ndarray
    agent_color: np.ndarray
    goal_color: np.ndarray
    goal_distance: np.ndarray = field(repr=False)  # BFS distance to goal, -1 where unreachable


@dataclass(frozen=True)
class EnvState:
    agent: tuple
    goal: tuple
    walls: np.ndarray = field(repr=False, compare=False)
    steps: int
    layout_id: int
    layout: Layout = field(repr=False, compare=False)
    config: GridWorldConfig = field(repr=False, compare=False)
    done: bool = False


def _bfs(walls: np.ndarray, source) -> np.ndarray:
    G = walls.shape[0]
    dist = np.full(walls.shape, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < G and 0 <= nc < G and not walls[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


def _hsv_color(h, s, v) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.round(np.array(rgb) * 255).astype(np.uint8)


@lru_cache(maxsize=4096)
def make_layout(config: GridWorldConfig, layout_id: int) -> Layout:
    if not 0 <= layout_id < config.n_layouts:
        raise ValueError(f"layout id {layout_id} outside [0, {config.n_layouts})")
    rng = np.random.default_rng([config.layout_seed, layout_id])
    G = config.grid_size
    max_path = config.max_episode_steps // 2
    n_walls = round(config.wall_fraction * G * G)
    while True:
        walls = np.zeros(G * G, dtype=bool)
        walls[rng.choice(G * G, n_walls, replace=False)] = True
        walls = walls.reshape(G, G)
        free = np.argwhere(~walls)
        if len(free) < 2:
            continue
        start = tuple(int(v) for v in free[rng.integers(len(free))])
        k = config.goal_region or G
        goal_cells = free[(free[:, 0] >= G - k) & (free[:, 1] >= G - k)]
        if len(goal_cells) == 0:
            continue
        goal = tuple(int(v) for v in goal_cells[rng.integers(len(goal_cells))])
        dist = _bfs(walls, goal)
        d = dist[start]
        if config.min_start_goal_distance <= d <= max_path:
            break
    background = _hsv_color(rng.random(), rng.uniform(0.05, 0.3), rng.uniform(0.75, 0.95))
    wall_color = _hsv_color(rng.random(), rng.uniform(0.0, 0.3), rng.uniform(0.2, 0.35))
    agent_color = _hsv_color(rng.uniform(-0.05, 0.05) % 1.0, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
    goal_color = _hsv_color(rng.uniform(0.28, 0.38), rng.uniform(0.7, 1.0), rng.uniform(0.5, 0.8))
    walls.setflags(write=False)
    dist.setflags(write=False)
    return Layout(layout_id, walls, start, goal, background, wall_color, agent_color, goal_color, dist)


def render(state: EnvState) -> np.ndarray:
    config, layout = state.config, state.layout
    cell = config.render_size // config.grid_size
    img = np.empty((config.grid_size, config.grid_size, 3), dtype=np.uint8)
    img[:] = layout.background
    img[layout.walls] = layout.wall_color
    img[state.goal] = layout.goal_color
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    r, c = state.agent
    inset = max(1, cell // 6) if cell > 2 else 0
    img[r * cell + inset:(r + 1) * cell - inset, c * cell + inset:(c + 1) * cell - inset] = layout.agent_color
    return img


def env_reset(config: GridWorldConfig, layout_id: int):
    """Start an episode on ``layout_id``; returns ``(state, observation)``."""
    layout = make_layout(config, layout_id)
    state = EnvState(layout.start, layout.goal, layout.walls, 0, layout_id, layout, config)
    return state, render(state)


def env_step(state: EnvState, action: int):
    """Returns ``(state, observation, reward, done)``; walls and borders block movement."""
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"invalid action {action!r}")
    if state.done:
        raise RuntimeError("episode is over; call env_reset")
    dr, dc = MOVES[int(action)]
    r, c = state.agent[0] + dr, state.agent[1] + dc
    G = state.config.grid_size
    agent = state.agent
    if 0 <= r < G and 0 <= c < G and not state.walls[r, c]:
        agent = (r, c)
    steps = state.steps + 1
    reached = agent == state.goal
    done = reached or steps >= state.config.max_episode_steps
    new = replace(state, agent=agent, steps=steps, done=done)
    return new, render(new), (1.0 if reached else 0.0), done


def shortest_path_length(state: EnvState) -> int:
    return int(state.layout.goal_distance[state.agent])


def scripted_expert_action(state: EnvState) -> int:
    """First action (in index order) that decreases the BFS distance to the goal."""
    dist = state.layout.goal_distance
    d = dist[state.agent]
    if d < 0:
        raise RuntimeError(f"goal unreachable on layout {state.layout_id}: generator bug")
    if d == 0:
        return NOOP
    G = state.config.grid_size
    for a, (dr, dc) in enumerate(MOVES[:4]):
        r, c = state.agent[0] + dr, state.agent[1] + dc
        if 0 <= r < G and 0 <= c < G and dist[r, c] == d - 1:
            return a
    raise RuntimeError("BFS distances are inconsistent")


def retreating_action(state: EnvState, rng: np.random.Generator) -> int:
    """Uniform over no-op and the unblocked moves that do not shorten the path to the goal.

    The expert always shortens the path, so rollouts of this policy have (frame,
    action) support disjoint from the demonstrations, which makes them a clean
    negative for discriminator checks. Blocked moves are left out because they
    carry expert-looking action labels without moving the agent.
    """
    dist = state.layout.goal_distance
    G = state.config.grid_size
    d = dist[state.agent]
    options = [NOOP]
    for a, (dr, dc) in enumerate(MOVES[:4]):
        r, c = state.agent[0] + dr, state.agent[1] + dc
        if 0 <= r < G and 0 <= c < G and not state.layout.walls[r, c] and dist[r, c] >= d:
            options.append(a)
    return int(options[int(rng.integers(len(options)))])


def _rollout(config: GridWorldConfig, layout_id: int, policy, rng) -> Trajectory:
    state, obs = env_reset(config, layout_id)
    frames, actions, rewards = [], [], []
    done = False
    while not done:
        a = policy(state, rng)
        frames.append(obs)
        actions.append(a)
        state, obs, r, done = env_step(state, a)
        rewards.append(r)
    return Trajectory(np.stack(frames), np.array(actions, np.int64), np.array(rewards, np.float32), 0)


def generate_demonstrations(config: GridWorldConfig, n_episodes: int,
                            layout_range: Optional[range] = None,
                            rng: Optional[np.random.Generator] = None) -> TrajectoryDataset:
    """Expert rollouts on layouts drawn uniformly from ``layout_range`` (default: train)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    return _collect(config, n_episodes, layout_range, rng,
                    lambda state, _: scripted_expert_action(state))


def generate_random_rollouts(config: GridWorldConfig, n_episodes: int,
                             layout_range: Optional[range] = None,
                             rng: Optional[np.random.Generator] = None,
                             first_id: int = 0) -> TrajectoryDataset:
    """Uniformly random-action rollouts, e.g. as extra non-demonstration RepL data."""
    return _collect(config, n_episodes, layout_range, rng,
                    lambda state, r: int(r.integers(N_ACTIONS)), first_id)


def generate_rollouts(config: GridWorldConfig, n_episodes: int, policy,
                      layout_range: Optional[range] = None,
                      rng: Optional[np.random.Generator] = None,
                      first_id: int = 0) -> TrajectoryDataset:
    """Rollouts of ``policy(state, rng) -> action`` on layouts drawn uniformly from ``layout_range``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    return _collect(config, n_episodes, layout_range, rng, policy, first_id)


def _collect(config, n_episodes, layout_range, rng, policy, first_id=0) -> TrajectoryDataset:
    layout_range = config.train_layouts if layout_range is None else layout_range
    rng = np.random.default_rng() if rng is None else rng
    trajs = []
    for i in range(n_episodes):
        layout_id = int(layout_range[int(rng.integers(len(layout_range)))])
        traj = _rollout(config, layout_id, policy, rng)
        traj.trajectory_id = first_id + i
        trajs.append(traj)
    return TrajectoryDataset(trajs, config.obs_shape, config.action_space, config.frame_stack)


class GridWorldPool:
    """A batch of environments stepped in lock-step, with frame stacking and auto-reset.

    Layouts are assigned from ``layout_range``: sequentially (episode k of the
    pool gets ``layout_range[k % len]``) or uniformly at random from ``rng``.
    """

    def __init__(self, config: GridWorldConfig, n_envs: int, layout_range: Optional[range] = None,
                 rng: Optional[np.random.Generator] = None, sequential: bool = False,
                 first_episode: int = 0):
        self.config = config
        self.n_envs = n_envs
        self.layout_range = config.train_layouts if layout_range is None else layout_range
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.sequential = sequential
        self._next_episode = first_episode
        self.states = [None] * n_envs
        self.frames = [None] * n_envs
        self.episode_returns = np.zeros(n_envs)
        self.episode_lengths = np.zeros(n_envs, dtype=np.int64)

    def _pick_layout(self) -> int:
        if self.sequential:
            lid = self.layout_range[self._next_episode % len(self.layout_range)]
        else:
            lid = self.layout_range[int(self.rng.integers(len(self.layout_range)))]
        self._next_episode += 1
        return int(lid)

    def _reset_env(self, i: int):
        state, obs = env_reset(self.config, self._pick_layout())
        self.states[i] = state
        self.frames[i] = deque([obs] * self.config.frame_stack, maxlen=self.config.frame_stack)
        self.episode_returns[i] = 0.0
        self.episode_lengths[i] = 0

    def _stacked(self, i: int) -> np.ndarray:
        return np.concatenate(list(self.frames[i]), axis=-1)

    def reset(self) -> np.ndarray:
        for i in range(self.n_envs):
            self._reset_env(i)
        return self.observations()

    def observations(self) -> np.ndarray:
        return np.stack([self._stacked(i) for i in range(self.n_envs)])

    def step(self, actions):
        """Step every env; finished envs reset immediately.

        Returns ``(obs, rewards, dones, infos)`` where ``infos[i]`` carries the
        episode return/length when env i finished on this step.
        """
        rewards = np.zeros(self.n_envs, dtype=np.float32)
        dones = np.zeros(self.n_envs, dtype=bool)
        infos = [{} for _ in range(self.n_envs)]
        for i, a in enumerate(actions):
            state, obs, r, done = env_step(self.states[i], int(a))
            self.states[i] = state
            self.frames[i].append(obs)
            rewards[i], dones[i] = r, done
            self.episode_returns[i] += r
            self.episode_lengths[i] += 1
            if done:
                infos[i] = {"episode_return": float(self.episode_returns[i]),
                            "episode_length": int(self.episode_lengths[i]),
                            "layout_id": state.layout_id}
                self._reset_env(i)
        return self.observations(), rewards, dones, infos


def expert_policy(obs, states) -> np.ndarray:
    """The scripted expert as a batch policy ``(observations, env states) -> actions``."""
    return np.array([scripted_expert_action(s) for s in states], dtype=np.int64)


def random_policy(rng: np.random.Generator):
    def act(obs, states) -> np.ndarray:
        return rng.integers(N_ACTIONS, size=len(states))
    return act
