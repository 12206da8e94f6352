"""Grid maze with a risky cell, reward-noise models and batched rollouts."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np

from .errors import InvalidInputError, MapError

# up, down, left, right
ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
N_ACTIONS = len(ACTIONS)
_ALPHABET = set(".#SGR")

# Ring maze: the bottom route (9 moves) crosses the risky cell, the top
# route (11 moves) avoids it. One opening each way out of the start cell.
DEFAULT_MAP = """\
......
.####G
.####.
.####.
.####.
S.R...
"""

# Narrow variant: 5-move risky route against a 15-move safe corridor.
CORRIDOR_MAP = """\
......
.####.
.####.
.####.
.####.
S.R..G
"""


class NoiseKind(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    PARETO = "pareto"
    UNIFORM = "uniform"
    HANDCRAFT = "handcraft"


@dataclass(frozen=True)
class NoiseSpec:
    """Reward law of the risky cell. All non-trivial kinds have mean -1.

    gaussian:  -1 + 20 Z
    pareto:    -1 - 20 (L - 1/2), L ~ Lomax(shape 3, scale 1)
    uniform:   U[-25, 23]
    handcraft: U[-2, 0] w.p. 0.95, U[-57, -56] w.p. 0.025, U[54, 55] w.p. 0.025
    """

    kind: NoiseKind = NoiseKind.NONE

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))


HANDCRAFT_COMPONENTS = (
    # (probability, low, high)
    (0.95, -2.0, 0.0),
    (0.025, -57.0, -56.0),
    (0.025, 54.0, 55.0),
)
GAUSSIAN_SCALE = 20.0
PARETO_SHAPE = 3.0
PARETO_SCALE = 20.0
UNIFORM_RANGE = (-25.0, 23.0)


def sample_noise(spec: NoiseSpec, rng: np.random.Generator, size=None, step_reward: float = -1.0):
    """Draw risky-cell rewards. Returns a float when ``size`` is None."""
    kind = spec.kind
    if kind is NoiseKind.NONE:
        out = np.full(() if size is None else size, float(step_reward))
    elif kind is NoiseKind.GAUSSIAN:
        out = -1.0 + GAUSSIAN_SCALE * rng.standard_normal(size)
    elif kind is NoiseKind.PARETO:
        # numpy's pareto() is the Lomax law, mean 1/(shape-1)
        out = -1.0 - (rng.pareto(PARETO_SHAPE, size) - 1.0 / (PARETO_SHAPE - 1.0)) * PARETO_SCALE
    elif kind is NoiseKind.UNIFORM:
        out = rng.uniform(*UNIFORM_RANGE, size)
    elif kind is NoiseKind.HANDCRAFT:
        probs = [c[0] for c in HANDCRAFT_COMPONENTS]
        comp = rng.choice(len(probs), size=size, p=probs)
        lows = np.array([c[1] for c in HANDCRAFT_COMPONENTS])[comp]
        highs = np.array([c[2] for c in HANDCRAFT_COMPONENTS])[comp]
        out = lows + (highs - lows) * rng.random(size)
    else:  # pragma: no cover
        raise InvalidInputError(f"unknown noise kind {kind!r}")
    return float(out) if size is None else np.asarray(out, dtype=float)


@dataclass(frozen=True)
class GridMaze:
    width: int
    height: int
    cells: tuple  # tuple of row strings over ".#SGR"
    gamma: float = 0.999
    max_steps: int = 100
    step_reward: float = -1.0
    noise: NoiseSpec = NoiseSpec()

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise InvalidInputError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be positive")
        # transition table and cell indices are derived once
        S = self.width * self.height
        nxt = np.empty((S, N_ACTIONS), dtype=np.int64)
        for r in range(self.height):
            for c in range(self.width):
                s = r * self.width + c
                for a, (dr, dc) in enumerate(ACTIONS):
                    rr, cc = r + dr, c + dc
                    ok = 0 <= rr < self.height and 0 <= cc < self.width and self.cells[rr][cc] != "#"
                    nxt[s, a] = rr * self.width + cc if ok else s
        nxt.setflags(write=False)
        object.__setattr__(self, "_next", nxt)
        flat = "".join(self.cells)
        risky = np.array([ch == "R" for ch in flat])
        risky.setflags(write=False)
        object.__setattr__(self, "_risky", risky)

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    def _find(self, ch):
        return "".join(self.cells).index(ch)

    @property
    def start(self) -> int:
        return self._find("S")

    @property
    def goal(self) -> int:
        return self._find("G")

    @property
    def transitions(self) -> np.ndarray:
        return self._next

    @property
    def risky_mask(self) -> np.ndarray:
        return self._risky

    def is_wall(self, s: int) -> bool:
        return self.cells[s // self.width][s % self.width] == "#"

    def with_options(self, **kw) -> "GridMaze":
        fields = dict(width=self.width, height=self.height, cells=self.cells, gamma=self.gamma,
                      max_steps=self.max_steps, step_reward=self.step_reward, noise=self.noise)
        fields.update(kw)
        return GridMaze(**fields)


def parse_map(text: str, *, gamma: float = 0.999, max_steps: int = 100,
              step_reward: float = -1.0, noise: Optional[NoiseSpec] = None) -> GridMaze:
    """Parse an ASCII maze (``#`` wall, ``.`` free, ``S`` start, ``G`` goal, ``R`` risky)."""
    rows = [ln.rstrip() for ln in text.splitlines()]
    while rows and not rows[0]:
        rows.pop(0)
    while rows and not rows[-1]:
        rows.pop()
    if not rows:
        raise MapError("empty map")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MapError(f"row has length {len(row)}, expected {width}", row=i)
        for j, ch in enumerate(row):
            if ch not in _ALPHABET:
                raise MapError(f"unexpected character {ch!r}", row=i, col=j)
    for ch, name in (("S", "start"), ("G", "goal")):
        where = [(i, j) for i, row in enumerate(rows) for j, c in enumerate(row) if c == ch]
        if not where:
            raise MapError(f"map has no {name} cell")
        if len(where) > 1:
            raise MapError(f"duplicate {name} cell", row=where[1][0], col=where[1][1])
    maze = GridMaze(width, len(rows), tuple(rows), gamma=gamma, max_steps=max_steps,
                    step_reward=step_reward, noise=noise or NoiseSpec())
    if shortest_path_length(maze) is None:
        g = maze.goal
        raise MapError("goal is unreachable from start", row=g // width, col=g % width)
    return maze


def default_maze(noise: Optional[NoiseSpec] = None, **kw) -> GridMaze:
    return parse_map(DEFAULT_MAP, noise=noise, **kw)


def shortest_path_length(maze: GridMaze, avoid_risky: bool = False) -> Optional[int]:
    """Breadth-first distance from start to goal, or None if unreachable."""
    start, goal = maze.start, maze.goal
    dist = {start: 0}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        if s == goal:
            return dist[s]
        for s2 in maze.transitions[s]:
            s2 = int(s2)
            if s2 in dist or (avoid_risky and maze.risky_mask[s2]):
                continue
            dist[s2] = dist[s] + 1
            queue.append(s2)
    return None


def step(maze: GridMaze, state: int, action: int, rng: np.random.Generator):
    """One transition: (next_state, reward, reached_goal).

    The step budget is tracked by the caller (see rollout functions).
    """
    if not (0 <= action < N_ACTIONS):
        raise InvalidInputError(f"invalid action {action!r}")
    if state == maze.goal:
        raise InvalidInputError("cannot step from the terminal goal state")
    nxt = int(maze.transitions[state, action])
    if maze.risky_mask[nxt]:
        reward = sample_noise(maze.noise, rng, step_reward=maze.step_reward)
    else:
        reward = maze.step_reward
    return nxt, float(reward), nxt == maze.goal


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    total_return: float
    rewards_to_go: np.ndarray
    visited_risky: bool
    reached_goal: bool

    def __len__(self):
        return self.actions.size


def discounted_rewards_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """R_t = r_{t+1} + gamma R_{t+1}; works row-wise on padded 2-D arrays."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


@dataclass
class EpisodeBatch:
    """Padded arrays for n episodes; entries at t >= lengths[i] are zero."""

    states: np.ndarray  # (n, T) int
    actions: np.ndarray  # (n, T) int
    rewards: np.ndarray  # (n, T)
    lengths: np.ndarray  # (n,)
    reached_goal: np.ndarray  # (n,) bool
    visited_risky: np.ndarray  # (n,) bool
    gamma: float

    def __post_init__(self):
        self.rewards_to_go = discounted_rewards_to_go(self.rewards, self.gamma)
        self.returns = self.rewards_to_go[:, 0].copy()

    @property
    def n(self) -> int:
        return self.lengths.size

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.states.shape[1])[None, :] < self.lengths[:, None]

    def trajectories(self) -> List[Trajectory]:
        out = []
        for i in range(self.n):
            L = int(self.lengths[i])
            out.append(Trajectory(
                self.states[i, :L].copy(), self.actions[i, :L].copy(), self.rewards[i, :L].copy(),
                float(self.returns[i]), self.rewards_to_go[i, :L].copy(),
                bool(self.visited_risky[i]), bool(self.reached_goal[i]),
            ))
        return out


def _probs_table(policy, maze: GridMaze) -> np.ndarray:
    if hasattr(policy, "probs_table"):
        table = policy.probs_table()
    else:
        table = np.asarray(policy, dtype=float)
    if table.shape != (maze.n_states, N_ACTIONS):
        raise InvalidInputError(
            f"policy table must have shape {(maze.n_states, N_ACTIONS)}, got {table.shape}"
        )
    return table


def rollout_batch(maze: GridMaze, policy, n: int, rng: np.random.Generator) -> EpisodeBatch:
    """Run n episodes in lock-step.

    ``policy`` is anything with ``probs_table()`` or an (S, A) array of action
    probabilities. Per step the generator draws one uniform per active episode
    (in episode order), then noise for the episodes entering a risky cell.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    cum = np.cumsum(_probs_table(policy, maze), axis=1)
    T = maze.max_steps
    states = np.zeros((n, T), dtype=np.int64)
    actions = np.zeros((n, T), dtype=np.int64)
    rewards = np.zeros((n, T))
    lengths = np.zeros(n, dtype=np.int64)
    reached = np.zeros(n, dtype=bool)
    risky = np.zeros(n, dtype=bool)
    cur = np.full(n, maze.start, dtype=np.int64)
    active = np.arange(n)
    for t in range(T):
        if active.size == 0:
            break
        s = cur[active]
        u = rng.random(active.size)
        a = np.minimum((u[:, None] >= cum[s]).sum(axis=1), N_ACTIONS - 1)
        s2 = maze.transitions[s, a]
        r = np.full(active.size, float(maze.step_reward))
        hit = maze.risky_mask[s2]
        if hit.any():
            r[hit] = sample_noise(maze.noise, rng, size=int(hit.sum()), step_reward=maze.step_reward)
            risky[active[hit]] = True
        states[active, t] = s
        actions[active, t] = a
        rewards[active, t] = r
        lengths[active] = t + 1
        cur[active] = s2
        done = s2 == maze.goal
        reached[active[done]] = True
        active = active[~done]
    return EpisodeBatch(states, actions, rewards, lengths, reached, risky, maze.gamma)


def rollout_episodes(maze: GridMaze, policy, n: int, rng: np.random.Generator) -> List[Trajectory]:
    return rollout_batch(maze, policy, n, rng).trajectories()


def risk_averse_rate(trajectories) -> float:
    """Fraction of episodes that reach the goal without touching a risky cell."""
    if isinstance(trajectories, EpisodeBatch):
        return float(np.mean(trajectories.reached_goal & ~trajectories.visited_risky))
    trajectories = list(trajectories)
    if not trajectories:
        raise InvalidInputError("risk_averse_rate of an empty batch")
    good = sum(1 for tr in trajectories if tr.reached_goal and not tr.visited_risky)
    return good / len(trajectories)
