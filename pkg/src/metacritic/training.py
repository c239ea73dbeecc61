"""Returns, policy-gradient estimation, control-variate baselines and the update loop.

Baseline modes for the actor update:

``none``
    Each score term is weighted by the full trajectory return G.
``mean-baseline``
    G minus the batch mean of G.
``fitted-beta``
    Trajectory-level control variate: the score is weighted by
    G - beta * Q(tau), where Q(tau) is the critic's value of the first
    decision, and the control variate's exact expectation
    ``beta * sum_a grad pi(a|S) Q(S, a)`` at that state is added back. This is
    unbiased for any fixed beta even though Q(tau) depends on the sampled
    action. beta is refit on every batch (Cov[G, Q] / Var[Q]) unless fixed.
``state-value``
    Per-step reward-to-go minus V(S_n).

``none``, ``mean-baseline`` and ``fitted-beta`` use the trajectory-level form;
``state-value`` is the per-step form usually used in practice.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import ActorCritic, MacConfig, softmax
from .errors import DegenerateBaselineError, DivergenceError, RejectedInputError
from .rollout import EpisodeBatch, Trajectory, collect

BASELINE_MODES = ("none", "mean-baseline", "fitted-beta", "state-value")
RETURN_MODES = ("discounted", "undiscounted-sum")


@dataclass(frozen=True)
class ReturnConfig:
    gamma: float = 1.0
    mode: str = "discounted"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise RejectedInputError("gamma must lie in (0, 1]")
        if self.mode not in RETURN_MODES:
            raise RejectedInputError(f"unknown return mode {self.mode!r}")

    @property
    def discount(self) -> float:
        return 1.0 if self.mode == "undiscounted-sum" else self.gamma


def _rewards(traj) -> np.ndarray:
    rewards = traj.rewards if isinstance(traj, Trajectory) else traj
    return np.asarray(rewards, dtype=np.float64)


def compute_return(traj, cfg: ReturnConfig = ReturnConfig()) -> float:
    """sum_n gamma^(n-1) R_n for a trajectory or a plain reward sequence."""
    r = _rewards(traj)
    return float(np.sum(r * cfg.discount ** np.arange(r.size)))


def compute_returns_to_go(traj, cfg: ReturnConfig = ReturnConfig()) -> np.ndarray:
    r = _rewards(traj)
    out = np.zeros_like(r)
    acc = 0.0
    for n in range(r.size - 1, -1, -1):
        acc = r[n] + cfg.discount * acc
        out[n] = acc
    return out


def batch_returns_to_go(batch: EpisodeBatch, cfg: ReturnConfig) -> np.ndarray:
    """Reward-to-go for every step of a padded batch, shape ``(T, B)``."""
    out = np.zeros_like(batch.rewards)
    acc = np.zeros(batch.B)
    for t in range(batch.T - 1, -1, -1):
        acc = np.where(batch.mask[t], batch.rewards[t] + cfg.discount * acc, 0.0)
        out[t] = acc
    return out


@dataclass(frozen=True)
class BaselineEstimate:
    beta: float
    covariance: float
    variance: float
    n: int


def estimate_beta_star(G, Q) -> BaselineEstimate:
    """Plug-in Cov[G, Q] / Var[Q] with n-1 denominators."""
    G, Q = np.asarray(G, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    if G.shape != Q.shape or G.ndim != 1:
        raise RejectedInputError("G and Q must be paired 1-d samples")
    if G.size < 2:
        raise RejectedInputError("need at least two samples")
    var = float(np.var(Q, ddof=1))
    if var <= 0:
        raise DegenerateBaselineError("sample variance of Q is zero")
    cov = float(np.cov(G, Q, ddof=1)[0, 1])
    return BaselineEstimate(cov / var, cov, var, int(G.size))


def modified_return(G, Q, mean_q, beta):
    return G - beta * (Q - mean_q)


def variance_ratio_diagnostic(G, Q) -> tuple[float, float]:
    """Empirical Var[G~]/Var[G] at the fitted beta, and 1 - Corr[G, Q]^2."""
    G, Q = np.asarray(G, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    var_g = float(np.var(G, ddof=1)) if G.size >= 2 else 0.0
    if var_g <= 0:
        raise DegenerateBaselineError("sample variance of G is zero")
    est = estimate_beta_star(G, Q)
    g_mod = modified_return(G, Q, Q.mean(), est.beta)
    corr = est.covariance / np.sqrt(var_g * est.variance)
    return float(np.var(g_mod, ddof=1) / var_g), float(1.0 - corr ** 2)


@dataclass
class GradientEstimate:
    gradient: np.ndarray
    batch_size: int
    estimator: str = "plain"
    stderr: np.ndarray | None = None


def policy_gradient_estimate(score_grads, weights, estimator: str = "plain") -> GradientEstimate:
    """Batch mean of ``weight_i * sum_n grad log p(A_n | S_n)``.

    ``score_grads`` is either an array ``(B, P)`` of per-trajectory summed score
    vectors or a list (one entry per trajectory) of per-step score vectors.
    """
    if isinstance(score_grads, np.ndarray):
        scores = np.asarray(score_grads, dtype=np.float64)
    else:
        scores = np.stack([np.sum(np.asarray(s, dtype=np.float64), axis=0) for s in score_grads])
    weights = np.asarray(weights, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or weights.shape != (scores.shape[0],):
        raise RejectedInputError("need one weight per trajectory and a batch of at least one")
    if not np.all(np.isfinite(scores)):
        raise RejectedInputError("non-finite log-probability gradient; batch rejected")
    terms = weights[:, None] * scores
    B = terms.shape[0]
    stderr = terms.std(axis=0, ddof=1) / np.sqrt(B) if B > 1 else None
    return GradientEstimate(terms.mean(axis=0), B, estimator, stderr)


@dataclass
class ForwardPass:
    logits: np.ndarray    # (T, B, A)
    q: np.ndarray         # (T, B) value of the taken action (zero-action input off decisions)
    v: np.ndarray         # (T, B)
    q_hidden: list        # hidden state entering each step, for re-evaluating Q
    tapes: dict


def forward_batch(agent: ActorCritic, batch: EpisodeBatch, record: bool = True) -> ForwardPass:
    params = agent.params
    tapes = {h.head: h.new_tape() if record else None for h in agent.heads}
    state = agent.initial_state(batch.B)
    logits, qs, vs, q_hidden = [], [], [], []
    for t in range(batch.T):
        x = batch.features[t]
        lg, hp = agent.policy.forward(params, x, state.policy, tape=tapes["policy"])
        q_hidden.append(state.q)
        q, hq = agent.q.forward(params, agent.q_features(x, batch.actions[t]), state.q, tape=tapes["q"])
        v, hv = agent.v.forward(params, x, state.v, tape=tapes["v"])
        logits.append(lg)
        qs.append(q[:, 0])
        vs.append(v[:, 0])
        state = type(state)(hp, hq, hv)
    return ForwardPass(np.stack(logits), np.stack(qs), np.stack(vs), q_hidden, tapes)


def critic_loss_and_gradient(agent: ActorCritic, batch: EpisodeBatch, targets: np.ndarray,
                             fp: ForwardPass | None = None):
    """Mean squared error of Q (on decision steps) and V (on every step) against ``targets``.

    Returns ``(loss_q, loss_v, GradientEstimate)``; the gradient is of
    ``loss_q + loss_v`` and is non-zero only on the q and v heads.
    """
    fp = fp or forward_batch(agent, batch)
    dec, mask = batch.decisions, batch.mask
    n_q, n_v = max(int(dec.sum()), 1), max(int(mask.sum()), 1)
    err_q = np.where(dec, fp.q - targets, 0.0)
    err_v = np.where(mask, fp.v - targets, 0.0)
    loss_q = float(np.sum(err_q ** 2) / n_q)
    loss_v = float(np.sum(err_v ** 2) / n_v)
    gq = agent.q.backward(agent.params, fp.tapes["q"], list((2.0 / n_q) * err_q[..., None]))
    gv = agent.v.backward(agent.params, fp.tapes["v"], list((2.0 / n_v) * err_v[..., None]))
    return loss_q, loss_v, GradientEstimate(gq.values + gv.values, batch.B, "critic-mse")


def _first_decision(batch: EpisodeBatch) -> np.ndarray:
    dec = batch.decisions
    if not np.all(dec.any(axis=0)):
        raise RejectedInputError("every trajectory needs at least one decision")
    return dec.argmax(axis=0)


def actor_output_grads(agent: ActorCritic, batch: EpisodeBatch, fp: ForwardPass, ret_cfg: ReturnConfig,
                       baseline: str = "none", fixed_beta: float | None = None):
    """Logit-space output gradients of the actor's objective estimate.

    Returns ``(dlogits (T, B, A), weights (T, B), diagnostics)``. Backpropagating
    ``dlogits`` through the policy head yields the policy-gradient estimate.
    """
    if baseline not in BASELINE_MODES:
        raise RejectedInputError(f"unknown baseline mode {baseline!r}")
    T, B, A = fp.logits.shape
    probs = softmax(fp.logits)
    dec = batch.decisions
    rtg = batch_returns_to_go(batch, ret_cfg)
    G = rtg[0]
    t0 = _first_decision(batch)
    cols = np.arange(B)
    q_tau = fp.q[t0, cols]
    diag = {"beta": None, "var_ratio_empirical": None, "var_ratio_predicted": None}
    if B >= 2:
        try:
            diag["var_ratio_empirical"], diag["var_ratio_predicted"] = variance_ratio_diagnostic(G, q_tau)
            diag["beta"] = estimate_beta_star(G, q_tau).beta
        except DegenerateBaselineError:
            pass

    correction = np.zeros((T, B, A))
    if baseline == "none":
        weights = np.broadcast_to(G, (T, B)).copy()
    elif baseline == "mean-baseline":
        weights = np.broadcast_to(G - G.mean(), (T, B)).copy()
    elif baseline == "state-value":
        weights = rtg - fp.v
    else:
        beta = fixed_beta if fixed_beta is not None else (diag["beta"] if diag["beta"] is not None else 0.0)
        diag["beta"] = beta
        # the analytic term below plays the role of E[Q]: it is E[Q(tau) * score]
        weights = np.broadcast_to(G - beta * q_tau, (T, B)).copy()
        # Q(S, a) for every action at the first decision, from the recorded hidden state
        x0 = batch.features[t0, cols]
        h0 = _index_hidden(fp.q_hidden, t0)
        q_all = np.stack([agent.q.forward(agent.params, agent.q_features(x0, np.full(B, a)), h0)[0][:, 0]
                          for a in range(A)], axis=1)
        p0 = probs[t0, cols]
        correction[t0, cols] = beta * p0 * (q_all - np.sum(p0 * q_all, axis=1, keepdims=True))
    weights = np.where(dec, weights, 0.0)
    onehot = np.zeros((T, B, A))
    tt, bb = np.nonzero(dec)
    onehot[tt, bb, batch.actions[tt, bb]] = 1.0
    score = np.where(dec[..., None], onehot - probs, 0.0)
    dlogits = (weights[..., None] * score + correction) / B
    logp = np.log(np.maximum(probs[tt, bb, batch.actions[tt, bb]], 1e-300))
    diag["actor_objective"] = float(np.sum(weights[tt, bb] * logp) / B)
    diag["mean_return"] = float(G.mean())
    return dlogits, weights, diag


def _index_hidden(hidden_list, t_idx):
    if hidden_list[0] is None:
        return None
    cols = np.arange(len(t_idx))
    h = np.stack([s.h for s in hidden_list])[t_idx, cols]
    c = np.stack([s.c for s in hidden_list])[t_idx, cols]
    return type(hidden_list[0])(h, c)


def actor_gradient(agent: ActorCritic, batch: EpisodeBatch, ret_cfg: ReturnConfig,
                   baseline: str = "none", fixed_beta: float | None = None, fp: ForwardPass | None = None):
    fp = fp or forward_batch(agent, batch)
    dlogits, _, diag = actor_output_grads(agent, batch, fp, ret_cfg, baseline, fixed_beta)
    g = agent.policy.backward(agent.params, fp.tapes["policy"], list(dlogits))
    estimator = "plain" if baseline == "none" else "control-variate"
    return GradientEstimate(g.values, batch.B, estimator), diag


@dataclass(frozen=True)
class OptimizerConfig:
    policy_lr: float = 3e-3
    q_lr: float = 1e-2
    v_lr: float = 1e-2
    batch_size: int = 16
    total_updates: int = 1000
    clip_norm: float | None = 5.0
    seed: int = 0
    method: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def violations(self) -> list[str]:
        out = []
        if self.method not in ("sgd", "adam"):
            out.append(f"optimizer method must be 'sgd' or 'adam', got {self.method!r}")
        if min(self.policy_lr, self.q_lr, self.v_lr) < 0:
            out.append("learning rates must be non-negative")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.total_updates < 0:
            out.append("total_updates must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            out.append("clip_norm must be positive when set")
        return out


def _clip(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norm = float(np.sqrt(np.sum(g * g)))
    return g * (max_norm / norm) if norm > max_norm else g


class Optimizer:
    """Per-head step rule: ascent on the policy head, descent on the critic heads.

    Actor and critic gradients are norm-clipped separately before the step.
    Adam keeps its moment estimates across calls; SGD is stateless.
    """

    def __init__(self, agent: ActorCritic, opt: OptimizerConfig):
        self.agent = agent
        self.cfg = opt
        self.t = 0
        self.m = np.zeros(len(agent.params))
        self.v = np.zeros(len(agent.params))

    def step(self, actor_grad: np.ndarray, critic_grad: np.ndarray) -> None:
        if not (np.all(np.isfinite(actor_grad)) and np.all(np.isfinite(critic_grad))):
            raise DivergenceError("non-finite gradient")
        opt = self.cfg
        actor_grad = _clip(actor_grad, opt.clip_norm)
        critic_grad = _clip(critic_grad, opt.clip_norm)
        params = self.agent.params
        direction = np.zeros(len(params))
        lrs = np.zeros(len(params))
        for head, lr, sign, grad in (("policy", opt.policy_lr, 1.0, actor_grad),
                                     ("q", opt.q_lr, -1.0, critic_grad),
                                     ("v", opt.v_lr, -1.0, critic_grad)):
            sl = params.head_slice(head)
            direction[sl] = sign * grad[sl]
            lrs[sl] = lr
        self.t += 1
        if opt.method == "adam":
            b1, b2 = opt.adam_betas
            self.m = b1 * self.m + (1 - b1) * direction
            self.v = b2 * self.v + (1 - b2) * direction ** 2
            m_hat = self.m / (1 - b1 ** self.t)
            v_hat = self.v / (1 - b2 ** self.t)
            direction = m_hat / (np.sqrt(v_hat) + opt.adam_eps)
        live = lrs != 0
        params.values[live] += lrs[live] * direction[live]


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)
    env_steps: int = 0


def train_step(agent: ActorCritic, batch: EpisodeBatch, optimizer: Optimizer, ret_cfg: ReturnConfig,
               baseline: str = "none", fixed_beta: float | None = None) -> dict:
    fp = forward_batch(agent, batch)
    targets = batch_returns_to_go(batch, ret_cfg)
    loss_q, loss_v, critic = critic_loss_and_gradient(agent, batch, targets, fp)
    actor, diag = actor_gradient(agent, batch, ret_cfg, baseline, fixed_beta, fp)
    if not (np.isfinite(loss_q) and np.isfinite(loss_v) and np.isfinite(diag["actor_objective"])):
        raise DivergenceError(f"non-finite loss (q={loss_q}, v={loss_v}, actor={diag['actor_objective']})")
    optimizer.step(actor.gradient, critic.gradient)
    return {**diag, "critic_loss_q": loss_q, "critic_loss_v": loss_v}


def train(agent: ActorCritic, env, opt: OptimizerConfig, ret_cfg: ReturnConfig = ReturnConfig(),
          baseline: str = "none", mac: MacConfig | None = None, fixed_beta: float | None = None,
          rng: np.random.Generator | None = None, metrics_path=None, callback=None,
          mac_warmup_updates: int = 0) -> TrainResult:
    """Alternate batch collection and one actor/critic update, ``opt.total_updates`` times.

    Deterministic given ``opt.seed`` (or ``rng``) and the agent's initial parameters.
    ``callback(update, record)`` may return True to stop early.
    With ``mac`` set, the first ``mac_warmup_updates`` updates still act by
    plain actor sampling so the critic is trained before it drives selection.
    Metrics go to ``metrics_path`` as JSONL, one record per update; wall-clock
    timings are kept apart in ``TrainResult.timings`` so the metrics file is
    reproducible byte for byte.
    """
    problems = opt.violations()
    if problems:
        raise RejectedInputError("; ".join(problems))
    rng = rng if rng is not None else np.random.default_rng(opt.seed)
    result = TrainResult()
    optimizer = Optimizer(agent, opt)
    fh = open(Path(metrics_path), "w") if metrics_path is not None else None
    try:
        for u in range(opt.total_updates):
            t0 = time.perf_counter()
            roll = collect(agent, env, opt.batch_size, rng, mac if u >= mac_warmup_updates else None)
            result.env_steps += roll.env_steps
            record = {"update": u, **train_step(agent, roll.batch, optimizer, ret_cfg, baseline, fixed_beta),
                      "env_steps": result.env_steps}
            record = {k: record[k] for k in METRIC_KEYS}
            result.metrics.append(record)
            result.timings.append(time.perf_counter() - t0)
            if fh is not None:
                fh.write(json.dumps(record) + "\n")
            if callback is not None and callback(u, record):
                break
    finally:
        if fh is not None:
            fh.close()
    return result


METRIC_KEYS = ("update", "mean_return", "var_ratio_empirical", "var_ratio_predicted", "beta",
               "actor_objective", "critic_loss_q", "critic_loss_v", "env_steps")
