"""Episode collection in padded ``(T, B)`` arrays.

The 2AFC and bandit tasks have action-independent observations, so whole
batches are drawn at once. Other environments are stepped in lockstep, one
environment copy per batch row.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .agent import ActorCritic, MacConfig, select_batch
from .envs import BanditEnv, TwoAFCEnv


@dataclass
class Trajectory:
    """One episode: states S_1..S_N, actions A_1..A_{N-1}, rewards R_1..R_{N-1}.

    An action of ``-1`` marks a step on which the environment read no action.
    """

    states: list
    actions: list
    rewards: list

    def __post_init__(self):
        if not (len(self.actions) == len(self.rewards) == len(self.states) - 1):
            raise ValueError("trajectory needs |actions| == |rewards| == |states| - 1")


@dataclass
class EpisodeBatch:
    features: np.ndarray  # (T, B, obs_dim), states S_1..S_T
    actions: np.ndarray   # (T, B), -1 where no action was read or past the end
    rewards: np.ndarray   # (T, B)
    mask: np.ndarray      # (T, B) True on real steps

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def B(self) -> int:
        return self.features.shape[1]

    @property
    def decisions(self) -> np.ndarray:
        return self.mask & (self.actions >= 0)

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory]) -> "EpisodeBatch":
        T = max(len(t.actions) for t in trajs)
        d = np.asarray(trajs[0].states[0]).shape[-1]
        B = len(trajs)
        feats = np.zeros((T, B, d))
        actions = np.full((T, B), -1, dtype=int)
        rewards = np.zeros((T, B))
        mask = np.zeros((T, B), dtype=bool)
        for b, tr in enumerate(trajs):
            n = len(tr.actions)
            feats[:n, b] = np.asarray(tr.states[:n], dtype=np.float64)
            actions[:n, b] = tr.actions
            rewards[:n, b] = tr.rewards
            mask[:n, b] = True
        return cls(feats, actions, rewards, mask)

    def trajectory(self, b: int) -> Trajectory:
        n = int(self.mask[:, b].sum())
        states = list(self.features[:n, b]) + [np.zeros(self.features.shape[-1])]
        return Trajectory(states, self.actions[:n, b].tolist(), self.rewards[:n, b].tolist())


@dataclass
class Rollout:
    batch: EpisodeBatch
    # per-decision logs, aligned with ``np.nonzero(batch.decisions)`` order (t-major)
    action_values: np.ndarray
    state_values: np.ndarray
    chosen_probs: np.ndarray
    correct: np.ndarray | None  # 2AFC only
    env_steps: int


def collect(agent: ActorCritic, env, n: int, rng: np.random.Generator,
            mac: MacConfig | None = None) -> Rollout:
    if isinstance(env, TwoAFCEnv):
        return _collect_2afc(agent, env, n, rng, mac)
    if isinstance(env, BanditEnv):
        return _collect_bandit(agent, env, n, rng, mac)
    return _collect_lockstep(agent, env, n, rng, mac)


def _collect_2afc(agent, env: TwoAFCEnv, n, rng, mac):
    feats, sides = env.sample_batch(n, rng)
    T = feats.shape[0]
    state = agent.initial_state(n)
    for t in range(T - 1):
        state = agent.advance(feats[t], state)
    d = select_batch(agent, feats[-1], state, mac, rng)
    actions = np.full((T, n), -1, dtype=int)
    actions[-1] = d.actions
    rewards = np.zeros((T, n))
    rewards[-1] = env.rewards_for(d.actions, sides)
    batch = EpisodeBatch(feats, actions, rewards, np.ones((T, n), dtype=bool))
    return Rollout(batch, d.action_values, d.state_values, d.chosen_prob, d.actions == sides, n * T)


def _collect_bandit(agent, env: BanditEnv, n, rng, mac):
    x = np.ones((n, 1))
    d = select_batch(agent, x, agent.initial_state(n), mac, rng)
    rewards = env.sample_rewards(d.actions, rng)
    batch = EpisodeBatch(x[None], d.actions[None], rewards[None], np.ones((1, n), dtype=bool))
    return Rollout(batch, d.action_values, d.state_values, d.chosen_prob, None, n)


def _collect_lockstep(agent, env, n, rng, mac):
    envs = [copy.deepcopy(env) for _ in range(n)]
    obs = [e.reset() for e in envs]
    alive = np.ones(n, dtype=bool)
    state = agent.initial_state(n)
    feats, acts, rews, masks, logs = [], [], [], [], []
    while alive.any():
        x = np.stack(obs).astype(np.float64)
        # finished rows still pass through the agent; their output is masked out
        d = select_batch(agent, x, state, mac, rng)
        state = d.state
        step_mask = alive.copy()
        r = np.zeros(n)
        for b in np.flatnonzero(step_mask):
            res = envs[b].step(int(d.actions[b]))
            r[b] = res.reward
            obs[b] = res.observation
            if res.terminal:
                alive[b] = False
        feats.append(x)
        acts.append(np.where(step_mask, d.actions, -1))
        rews.append(r)
        masks.append(step_mask)
        logs.append(np.stack([d.action_values, d.state_values, d.chosen_prob]))
    batch = EpisodeBatch(np.stack(feats), np.stack(acts), np.stack(rews), np.stack(masks))
    logs = np.stack(logs, axis=1)  # (3, T, B)
    dec = batch.decisions
    return Rollout(batch, logs[0][dec], logs[1][dec], logs[2][dec], None, int(batch.mask.sum()))
