"""Actor, critic heads and action selection, including the metacognitive inner loop.

The agent owns three independent heads in one :class:`ParamVector`: ``policy``
(action logits), ``q`` (value of a state-action pair) and ``v`` (value of a
state). The Q head receives the action one-hot alongside the state features;
a tabular Q head receives their outer product instead, which is a one-hot
over state-action pairs when the state features are one-hot.

All selection routines accept a batch of states with shape ``(B, obs_dim)``
and draw exactly one uniform per row per sample, so a single-state call
consumes the random stream the same way as a batch of one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .approximator import Approximator, HiddenState, ParamVector
from .errors import RejectedInputError

ACQUISITION_VARIANTS = ("independent", "without-replacement", "value-softmax")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    probs = np.atleast_2d(probs)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (32,)


class AgentState(NamedTuple):
    """Hidden state of each head; ``None`` for non-recurrent heads."""

    policy: HiddenState | None
    q: HiddenState | None
    v: HiddenState | None


@dataclass(frozen=True)
class ConfidenceRecord:
    state_value: float
    action_value: float
    confidence: float
    error: bool
    correct: bool | None = None

    @classmethod
    def from_values(cls, state_value: float, action_value: float) -> "ConfidenceRecord":
        confidence = float(action_value) - float(state_value)
        return cls(float(state_value), float(action_value), confidence, confidence < 0)

    def with_outcome(self, correct: bool) -> "ConfidenceRecord":
        return ConfidenceRecord(self.state_value, self.action_value, self.confidence, self.error, bool(correct))

    def to_bytes(self) -> bytes:
        flag = -1 if self.correct is None else int(self.correct)
        return struct.pack("<ddd?b", self.state_value, self.action_value, self.confidence, self.error, flag)


def detect_error(record: ConfidenceRecord) -> bool:
    return record.confidence < 0


@dataclass(frozen=True)
class AcquisitionRule:
    variant: str = "without-replacement"
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in ACQUISITION_VARIANTS:
            raise RejectedInputError(f"unknown acquisition variant {self.variant!r}")
        if self.temperature <= 0:
            raise RejectedInputError("acquisition temperature must be positive")


@dataclass(frozen=True)
class MacConfig:
    budget: int = 4
    acquisition: AcquisitionRule = field(default_factory=AcquisitionRule)
    final_choice: str = "greedy-over-hypotheticals"

    def __post_init__(self):
        if self.budget < 1:
            raise RejectedInputError("hypothetical budget H must be >= 1")
        if self.final_choice != "greedy-over-hypotheticals":
            raise RejectedInputError(f"unsupported final choice {self.final_choice!r}")


@dataclass
class HypotheticalSet:
    """Actions sampled inside one environment step and their critic values."""

    budget: int
    actions: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, action: int, value: float) -> None:
        if len(self.actions) >= self.budget:
            raise RejectedInputError("hypothetical set already holds H entries")
        self.actions.append(int(action))
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.actions)

    def best(self) -> int:
        """Action with the highest value; the earliest sample wins ties."""
        return self.actions[int(np.argmax(self.values))]


class ActorCritic:
    def __init__(self, obs_dim: int, n_actions: int, policy: HeadConfig = HeadConfig(),
                 q: HeadConfig = HeadConfig(), v: HeadConfig = HeadConfig(), seed: int = 0):
        if n_actions < 2:
            raise RejectedInputError("need at least two actions")
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.head_configs = {"policy": policy, "q": q, "v": v}
        q_in = obs_dim * n_actions if q.kind == "tabular" else obs_dim + n_actions
        self.policy = Approximator(policy.kind, obs_dim, n_actions, "policy", tuple(policy.hidden))
        self.q = Approximator(q.kind, q_in, 1, "q", tuple(q.hidden))
        self.v = Approximator(v.kind, obs_dim, 1, "v", tuple(v.hidden))
        self.params = ParamVector.build(
            self.policy.param_entries() + self.q.param_entries() + self.v.param_entries())
        rng = np.random.default_rng(seed)
        for head in (self.policy, self.q, self.v):
            head.initialize(self.params, rng)

    @property
    def heads(self) -> tuple[Approximator, Approximator, Approximator]:
        return self.policy, self.q, self.v

    def initial_state(self, batch: int | None = None) -> AgentState:
        return AgentState(*(h.initial_hidden(batch) for h in self.heads))

    def q_features(self, x: np.ndarray, action) -> np.ndarray:
        """Q-head input for ``action``; a negative action means "no action" (all zeros)."""
        x = np.asarray(x, dtype=np.float64)
        action = np.asarray(action)
        onehot = np.zeros(action.shape + (self.n_actions,))
        valid = action >= 0
        if np.any(valid):
            onehot[valid, action[valid]] = 1.0
        if self.q.kind == "tabular":
            return (x[..., :, None] * onehot[..., None, :]).reshape(x.shape[:-1] + (-1,))
        return np.concatenate([x, onehot], axis=-1)

    def actor_policy(self, x, hidden=None):
        """Softmax over policy-head outputs; returns ``(probs, hidden')``."""
        logits, h = self.policy.forward(self.params, x, hidden)
        return softmax(logits), h

    def critic_v(self, x, hidden=None):
        out, h = self.v.forward(self.params, x, hidden)
        return out[..., 0], h

    def critic_q(self, x, action, hidden=None):
        out, h = self.q.forward(self.params, self.q_features(x, action), hidden)
        return out[..., 0], h

    def advance(self, x, state: AgentState, action=None) -> AgentState:
        """Advance every recurrent head by one step without choosing an action."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if action is None:
            action = np.full(x.shape[0], -1)
        _, hp = self.policy.forward(self.params, x, state.policy) if self.policy.recurrent else (None, None)
        _, hq = self.critic_q(x, action, state.q) if self.q.recurrent else (None, None)
        _, hv = self.critic_v(x, state.v) if self.v.recurrent else (None, None)
        return AgentState(hp, hq, hv)


@dataclass
class BatchDecision:
    actions: np.ndarray          # (B,)
    action_values: np.ndarray    # (B,) Q of the chosen action
    state_values: np.ndarray     # (B,) V of the state
    probs: np.ndarray            # (B, A) unconditioned policy
    hyp_actions: np.ndarray      # (B, H)
    hyp_values: np.ndarray       # (B, H)
    state: AgentState

    @property
    def confidence(self) -> np.ndarray:
        return self.action_values - self.state_values

    @property
    def chosen_prob(self) -> np.ndarray:
        return self.probs[np.arange(len(self.actions)), self.actions]

    def record(self, i: int = 0) -> ConfidenceRecord:
        return ConfidenceRecord.from_values(self.state_values[i], self.action_values[i])


def _acquisition_probs(rule: AcquisitionRule, probs, logits, sampled, observed_q, v):
    if rule.variant == "independent":
        return probs
    if rule.variant == "without-replacement":
        remaining = np.where(sampled, 0.0, probs)
        mass = remaining.sum(axis=-1, keepdims=True)
        uniform_rest = (~sampled).astype(float)
        n_rest = uniform_rest.sum(axis=-1, keepdims=True)
        out = np.where(mass > 0, remaining / np.where(mass > 0, mass, 1.0),
                       uniform_rest / np.maximum(n_rest, 1.0))
        # every action already tried: fall back to the unconditioned policy
        return np.where(n_rest > 0, out, probs)
    shift = np.where(sampled, (np.nan_to_num(observed_q) - v[:, None]) / rule.temperature, 0.0)
    return softmax(logits + shift)


def _chain_hidden(agent: ActorCritic, x, state: AgentState):
    logits, hp = agent.policy.forward(agent.params, x, state.policy)
    v, hv = agent.critic_v(x, state.v)
    return logits, v, hp, hv


def mac_select_batch(agent: ActorCritic, x, state: AgentState, cfg: MacConfig,
                     rng: np.random.Generator) -> BatchDecision:
    """Run the hypothetical-action loop ``cfg.budget`` times for each row of ``x``.

    Uses only the current state and parameters; no reward or next state.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, A, H = x.shape[0], agent.n_actions, cfg.budget
    logits, v, hp, hv = _chain_hidden(agent, x, state)
    probs = softmax(logits)
    sampled = np.zeros((B, A), dtype=bool)
    observed_q = np.full((B, A), np.nan)
    hyp_actions = np.zeros((B, H), dtype=int)
    hyp_values = np.zeros((B, H))
    rows = np.arange(B)
    for h in range(H):
        acq = _acquisition_probs(cfg.acquisition, probs, logits, sampled, observed_q, v)
        a = sample_categorical(acq, rng)
        q, _ = agent.critic_q(x, a, state.q)
        hyp_actions[:, h] = a
        hyp_values[:, h] = q
        sampled[rows, a] = True
        observed_q[rows, a] = q
    best = np.argmax(hyp_values, axis=1)  # first maximum = lowest sample index
    actions = hyp_actions[rows, best]
    q_chosen, hq = agent.critic_q(x, actions, state.q)
    return BatchDecision(actions, q_chosen, v, probs, hyp_actions, hyp_values, AgentState(hp, hq, hv))


def vanilla_select_batch(agent: ActorCritic, x, state: AgentState, rng: np.random.Generator) -> BatchDecision:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logits, v, hp, hv = _chain_hidden(agent, x, state)
    probs = softmax(logits)
    actions = sample_categorical(probs, rng)
    q, hq = agent.critic_q(x, actions, state.q)
    return BatchDecision(actions, q, v, probs, actions[:, None], q[:, None], AgentState(hp, hq, hv))


def _one(state: AgentState | None, agent: ActorCritic) -> AgentState:
    return agent.initial_state(1) if state is None else state


def mac_select_action(agent: ActorCritic, x, cfg: MacConfig, rng: np.random.Generator,
                      state: AgentState | None = None):
    """Single-state metacognitive selection.

    Returns ``(action, HypotheticalSet, ConfidenceRecord, state')``.
    """
    d = mac_select_batch(agent, np.asarray(x, dtype=np.float64)[None, :], _one(state, agent), cfg, rng)
    hyp = HypotheticalSet(cfg.budget)
    for a, q in zip(d.hyp_actions[0], d.hyp_values[0]):
        hyp.add(a, q)
    return int(d.actions[0]), hyp, d.record(0), d.state


def vanilla_select_action(agent: ActorCritic, x, rng: np.random.Generator, state: AgentState | None = None):
    """Sample once from the actor; returns ``(action, ConfidenceRecord, state')``."""
    d = vanilla_select_batch(agent, np.asarray(x, dtype=np.float64)[None, :], _one(state, agent), rng)
    return int(d.actions[0]), d.record(0), d.state


def select_batch(agent: ActorCritic, x, state: AgentState, mac: MacConfig | None,
                 rng: np.random.Generator) -> BatchDecision:
    if mac is None:
        return vanilla_select_batch(agent, x, state, rng)
    return mac_select_batch(agent, x, state, mac, rng)
