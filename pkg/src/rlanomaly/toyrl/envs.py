"""Small discrete-action environments with noisy vector observations.

Both tasks are shortest-path problems, so their optimal mean return is known
exactly and PPO progress can be judged against it.
"""

from __future__ import annotations

import math

import numpy as np

STEP_COST = -0.04
GOAL_REWARD = 1.0


class ToyEnv:
    env_id: str
    obs_dim: int
    n_actions: int
    horizon: int
    lo: float
    hi: float

    def __init__(self, seed: int | np.random.SeedSequence = 0, obs_noise: float = 0.1):
        self.rng = np.random.default_rng(seed)
        self.obs_noise = obs_noise
        self.pos = None
        self.t = 0

    # subclasses implement these four
    def _n_states(self) -> int:
        raise NotImplementedError

    def _goal(self) -> int:
        raise NotImplementedError

    def _move(self, pos: int, action: int) -> int:
        raise NotImplementedError

    def _encode(self, pos: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        clean = self._encode(self.pos)
        obs = clean + self.obs_noise * self.rng.standard_normal(self.obs_dim)
        return np.clip(obs, self.lo, self.hi)

    def reset(self) -> np.ndarray:
        starts = [s for s in range(self._n_states()) if s != self._goal()]
        self.pos = starts[int(self.rng.integers(len(starts)))]
        self.t = 0
        return self.observe()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}")
        self.pos = self._move(self.pos, int(action))
        self.t += 1
        if self.pos == self._goal():
            return self.observe(), GOAL_REWARD, True
        return self.observe(), STEP_COST, self.t >= self.horizon

    def shortest_paths(self) -> dict[int, int]:
        """Breadth-first distances to the goal over the reversed move graph."""
        n = self._n_states()
        goal = self._goal()
        dist = {goal: 0}
        frontier = [goal]
        while frontier:
            nxt = []
            for s in range(n):
                if s in dist:
                    continue
                if any(self._move(s, a) in frontier for a in range(self.n_actions)):
                    dist[s] = dist[frontier[0]] + 1
                    nxt.append(s)
            frontier = nxt
        return dist

    def optimal_mean_return(self) -> float:
        """Expected undiscounted return of an optimal policy from a uniform start."""
        dist = self.shortest_paths()
        returns = []
        for s in range(self._n_states()):
            if s == self._goal():
                continue
            d = dist[s]
            if d <= self.horizon:
                returns.append(GOAL_REWARD + STEP_COST * (d - 1))
            else:
                returns.append(STEP_COST * self.horizon)
        return float(np.mean(returns))


class GridEnv(ToyEnv):
    """5x5 grid, goal in the far corner, one-hot position plus distractor coords."""

    env_id = "grid"
    size = 5
    n_actions = 4
    horizon = 20
    n_distractors = 7
    lo, hi = -1.0, 2.0
    obs_dim = size * size + n_distractors
    _moves = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def _n_states(self):
        return self.size * self.size

    def _goal(self):
        return self.size * self.size - 1

    def _move(self, pos, action):
        r, c = divmod(pos, self.size)
        dr, dc = self._moves[action]
        r = min(max(r + dr, 0), self.size - 1)
        c = min(max(c + dc, 0), self.size - 1)
        return r * self.size + c

    def _encode(self, pos):
        v = np.zeros(self.obs_dim)
        v[pos] = 1.0
        return v


class RingEnv(ToyEnv):
    """Walk on a ring of 12 cells; harmonic position code shifted by ``offset``."""

    env_id = "ring"
    cells = 12
    n_actions = 3
    horizon = 20
    n_harmonics = 4
    obs_dim = 24
    offset = 0.5

    def __init__(self, seed=0, obs_noise: float = 0.1, offset: float | None = None):
        super().__init__(seed, obs_noise)
        if offset is not None:
            self.offset = offset
        self.lo = self.offset - 2.0
        self.hi = self.offset + 2.0

    def _n_states(self):
        return self.cells

    def _goal(self):
        return 0

    def _move(self, pos, action):
        return (pos + (-1, 1, 0)[action]) % self.cells

    def _encode(self, pos):
        theta = 2 * math.pi * pos / self.cells
        v = np.full(self.obs_dim, self.offset)
        for j in range(self.n_harmonics):
            v[2 * j] += math.cos((j + 1) * theta)
            v[2 * j + 1] += math.sin((j + 1) * theta)
        return v


class FarRingEnv(RingEnv):
    """Ring task whose observations sit far from the grid's range."""

    env_id = "ring_far"
    offset = 4.0


ENVIRONMENTS = {cls.env_id: cls for cls in (GridEnv, RingEnv, FarRingEnv)}


def make_env(env_id: str, seed=0, **kwargs) -> ToyEnv:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; known: {sorted(ENVIRONMENTS)}") from None
    return cls(seed, **kwargs)


def reencode(obs: np.ndarray, target_dim: int) -> np.ndarray:
    """Zero-pad or truncate an observation to ``target_dim`` coordinates."""
    if target_dim < 1:
        raise ValueError(f"cannot re-encode into {target_dim} dimensions")
    obs = np.asarray(obs, dtype=float)
    out = np.zeros(obs.shape[:-1] + (target_dim,))
    m = min(target_dim, obs.shape[-1])
    out[..., :m] = obs[..., :m]
    return out
