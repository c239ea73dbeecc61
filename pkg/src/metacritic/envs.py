"""Episodic environments: speeded 2AFC, a deterministic grid world, a Gaussian bandit."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, RejectedInputError, UsageError

LEFT, RIGHT = 0, 1
STIMULUS, RESPONSE = "stimulus", "response"
UP, DOWN, MOVE_LEFT, MOVE_RIGHT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), DOWN: (1, 0), MOVE_LEFT: (0, -1), MOVE_RIGHT: (0, 1)}


@dataclass(frozen=True)
class Observation:
    left: float
    right: float
    phase: str

    def features(self) -> np.ndarray:
        return np.array([self.left, self.right, 1.0 if self.phase == RESPONSE else 0.0])


@dataclass
class StepResult:
    observation: object
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TwoAFCConfig:
    signal_mean: float = 1.0
    noise_mean: float = 0.0
    signal_std: float = 1.0
    noise_std: float = 1.0
    stimulus_steps: int = 5
    post_stimulus_steps: int = 0
    reward_correct: float = 1.0
    reward_incorrect: float = 0.0
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if not self.signal_mean > self.noise_mean:
            out.append("signal_mean must exceed noise_mean")
        if self.signal_std < 0 or self.noise_std < 0:
            out.append("signal_std and noise_std must be non-negative")
        if self.stimulus_steps < 1:
            out.append("stimulus_steps must be >= 1")
        if self.post_stimulus_steps < 0:
            out.append("post_stimulus_steps must be >= 0")
        return out

    @property
    def episode_length(self) -> int:
        """Agent steps per episode, including the single response step."""
        return self.stimulus_steps + self.post_stimulus_steps + 1


def dprime_of_config(cfg: TwoAFCConfig) -> tuple[float, float]:
    """Per-observation d' and the aggregate d' over all stimulus steps."""
    pooled = 0.5 * (cfg.signal_std ** 2 + cfg.noise_std ** 2)
    if pooled <= 0:
        raise RejectedInputError("d' is undefined when both standard deviations are zero")
    d = (cfg.signal_mean - cfg.noise_mean) / math.sqrt(pooled)
    return d, d * math.sqrt(cfg.stimulus_steps)


def ideal_observer_accuracy(cfg: TwoAFCConfig) -> float:
    """Accuracy of deciding by the sign of summed (left - right) evidence."""
    return float(norm.cdf(dprime_of_config(cfg)[1] / math.sqrt(2.0)))


def signal_mean_for_accuracy(cfg: TwoAFCConfig, accuracy: float) -> float:
    """Signal mean at which the summed-evidence observer reaches ``accuracy``."""
    if not 0.5 < accuracy < 1.0:
        raise RejectedInputError("accuracy must lie in (0.5, 1)")
    aggregate = math.sqrt(2.0) * norm.ppf(accuracy)
    pooled = math.sqrt(0.5 * (cfg.signal_std ** 2 + cfg.noise_std ** 2))
    return cfg.noise_mean + aggregate / math.sqrt(cfg.stimulus_steps) * pooled


class TwoAFCEnv:
    """Speeded two-alternative forced choice.

    An episode is ``stimulus_steps`` paired observations, ``post_stimulus_steps``
    blank observations, then one response step. Actions before the response
    step are ignored; the response step reads LEFT or RIGHT and terminates.
    """

    n_actions = 2
    obs_dim = 3

    def __init__(self, cfg: TwoAFCConfig):
        problems = cfg.violations()
        if problems:
            raise ConfigError(problems)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self._t = None
        self._done = True

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.cfg
        self.signal_side = int(self.rng.integers(2))
        signal = self.rng.normal(cfg.signal_mean, cfg.signal_std, size=cfg.stimulus_steps)
        noise = self.rng.normal(cfg.noise_mean, cfg.noise_std, size=cfg.stimulus_steps)
        self._stimulus = np.zeros((cfg.stimulus_steps, 2))
        self._stimulus[:, self.signal_side] = signal
        self._stimulus[:, 1 - self.signal_side] = noise
        self._t = 0
        self._done = False
        return self._observation()

    def _observation(self) -> Observation:
        cfg = self.cfg
        if self._t < cfg.stimulus_steps:
            left, right = self._stimulus[self._t]
            return Observation(float(left), float(right), STIMULUS)
        phase = RESPONSE if self._t == cfg.episode_length - 1 else STIMULUS
        return Observation(0.0, 0.0, phase)

    @property
    def awaiting_response(self) -> bool:
        return not self._done and self._t == self.cfg.episode_length - 1

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step called on a finished episode; call reset first")
        side = "left" if self.signal_side == LEFT else "right"
        if not self.awaiting_response:
            self._t += 1
            return StepResult(self._observation(), 0.0, False, {"signal_side": side})
        if action not in (LEFT, RIGHT):
            raise RejectedInputError(f"2AFC response must be 0 (left) or 1 (right), got {action!r}")
        correct = int(action) == self.signal_side
        self._done = True
        reward = self.cfg.reward_correct if correct else self.cfg.reward_incorrect
        return StepResult(Observation(0.0, 0.0, RESPONSE), reward, True,
                          {"signal_side": side, "correct": correct})

    def sample_batch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` episodes at once.

        Returns features of shape ``(T, n, 3)`` and the signal side per episode.
        Observations do not depend on actions, so this matches ``reset``/``step``
        in distribution.
        """
        cfg = self.cfg
        sides = rng.integers(2, size=n)
        signal = rng.normal(cfg.signal_mean, cfg.signal_std, size=(cfg.stimulus_steps, n))
        noise = rng.normal(cfg.noise_mean, cfg.noise_std, size=(cfg.stimulus_steps, n))
        feats = np.zeros((cfg.episode_length, n, 3))
        left_is_signal = sides == LEFT
        feats[:cfg.stimulus_steps, :, 0] = np.where(left_is_signal, signal, noise)
        feats[:cfg.stimulus_steps, :, 1] = np.where(left_is_signal, noise, signal)
        feats[-1, :, 2] = 1.0
        return feats, sides

    def rewards_for(self, actions: np.ndarray, sides: np.ndarray) -> np.ndarray:
        correct = np.asarray(actions) == np.asarray(sides)
        return np.where(correct, self.cfg.reward_correct, self.cfg.reward_incorrect)


DEFAULT_WALLS = ((1, 1), (1, 2), (1, 3), (3, 1), (3, 2), (3, 3))


@dataclass(frozen=True)
class GridWorldConfig:
    width: int = 5
    height: int = 5
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (4, 4)
    step_reward: float = -0.01
    goal_reward: float = 1.0
    max_steps: int = 50
    walls: tuple[tuple[int, int], ...] = DEFAULT_WALLS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        object.__setattr__(self, "walls", tuple(tuple(w) for w in self.walls))

    def inside(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def violations(self) -> list[str]:
        out = []
        if self.width < 1 or self.height < 1:
            out.append("width and height must be positive")
        if self.max_steps < 1:
            out.append("max_steps must be positive")
        if self.start == self.goal:
            out.append("start and goal must differ")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.inside(cell):
                out.append(f"{name} {cell} lies outside the grid")
            if cell in self.walls:
                out.append(f"{name} {cell} is a wall")
        return out

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def index(self, cell) -> int:
        return cell[0] * self.width + cell[1]

    def move(self, cell, action: int):
        dr, dc = _MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        if not self.inside(nxt) or nxt in self.walls:
            return cell
        return nxt


def bfs_reachable(cfg: GridWorldConfig) -> bool:
    seen = {cfg.start}
    queue = deque([cfg.start])
    while queue:
        cell = queue.popleft()
        if cell == cfg.goal:
            return True
        for a in _MOVES:
            nxt = cfg.move(cell, a)
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return False


def grid_value_iteration(cfg: GridWorldConfig, gamma: float = 1.0, tol: float = 1e-12,
                         max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Exact state and action values, indexed by cell index; the goal has value 0.

    Ignores the step horizon, which exceeds every shortest path on shipped configs.
    """
    n = cfg.n_cells
    cells = [(r, c) for r in range(cfg.height) for c in range(cfg.width)]
    live = [cell for cell in cells if cell not in cfg.walls and cell != cfg.goal]
    V = np.zeros(n)
    Q = np.zeros((n, 4))
    for _ in range(max_iter):
        V_new = V.copy()
        for cell in live:
            s = cfg.index(cell)
            for a in range(4):
                nxt = cfg.move(cell, a)
                if nxt == cfg.goal:
                    Q[s, a] = cfg.goal_reward
                else:
                    Q[s, a] = cfg.step_reward + gamma * V[cfg.index(nxt)]
            V_new[s] = Q[s].max()
        delta = np.abs(V_new - V).max()
        V = V_new
        if delta < tol:
            break
    return V, Q


class GridWorldEnv:
    """Deterministic grid; blocked moves leave the agent in place.

    Entering the goal pays ``goal_reward``; every other move pays
    ``step_reward``. The episode is cut at ``max_steps`` (``info["truncated"]``).
    """

    n_actions = 4

    def __init__(self, cfg: GridWorldConfig):
        problems = cfg.violations()
        if problems:
            raise ConfigError(problems)
        self.cfg = cfg
        self.obs_dim = cfg.n_cells
        self._done = True

    def encode(self, cell) -> np.ndarray:
        x = np.zeros(self.cfg.n_cells)
        x[self.cfg.index(cell)] = 1.0
        return x

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.cell = self.cfg.start
        self._t = 0
        self._done = False
        return self.encode(self.cell)

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step called on a finished episode; call reset first")
        if action not in _MOVES:
            raise RejectedInputError(f"grid action must be one of 0..3, got {action!r}")
        before = self.cell
        self.cell = self.cfg.move(self.cell, int(action))
        self._t += 1
        info = {"cell": list(before), "next_cell": list(self.cell)}
        if self.cell == self.cfg.goal:
            self._done = True
            return StepResult(self.encode(self.cell), self.cfg.goal_reward, True, info)
        if self._t >= self.cfg.max_steps:
            self._done = True
            info["truncated"] = True
        return StepResult(self.encode(self.cell), self.cfg.step_reward, self._done, info)


@dataclass(frozen=True)
class BanditConfig:
    means: tuple[float, ...] = (1.0, 0.0)
    stds: tuple[float, ...] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "stds", tuple(float(s) for s in self.stds))

    def violations(self) -> list[str]:
        out = []
        if len(self.means) < 2:
            out.append("a bandit needs at least two arms")
        if len(self.means) != len(self.stds):
            out.append("means and stds must have the same length")
        if any(s < 0 for s in self.stds):
            out.append("arm stds must be non-negative")
        return out


class BanditEnv:
    """Single-state, single-step Gaussian bandit."""

    obs_dim = 1

    def __init__(self, cfg: BanditConfig):
        problems = cfg.violations()
        if problems:
            raise ConfigError(problems)
        self.cfg = cfg
        self.n_actions = len(cfg.means)
        self.rng = np.random.default_rng(cfg.seed)
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._done = False
        return np.ones(1)

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step called on a finished episode; call reset first")
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise RejectedInputError(f"arm index must be in 0..{self.n_actions - 1}, got {action!r}")
        self._done = True
        reward = float(self.rng.normal(self.cfg.means[action], self.cfg.stds[action]))
        return StepResult(np.ones(1), reward, True, {"arm": int(action)})

    def sample_rewards(self, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        means = np.asarray(self.cfg.means)[actions]
        stds = np.asarray(self.cfg.stds)[actions]
        return rng.normal(means, stds)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Observation):
        return asdict(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def write_trace(path, steps) -> None:
    """Dump ``(observation, action, reward, info)`` tuples as JSONL, one step per line."""
    with open(Path(path), "w") as fh:
        for obs, action, reward, info in steps:
            fh.write(json.dumps({
                "observation": _jsonable(obs),
                "action": _jsonable(action),
                "reward": _jsonable(reward),
                "info": {k: _jsonable(v) for k, v in (info or {}).items()},
            }) + "\n")
