"""Acceptance criteria 1-8 at their stated tolerances.

Each test records one PASS/FAIL line; run with ``-s`` to see them inline, or
read the "acceptance criteria" section of the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from metacritic.agent import (ActorCritic, HeadConfig, MacConfig, detect_error, mac_select_action,
                              mac_select_batch, softmax, vanilla_select_batch)
from metacritic.approximator import KINDS, gradcheck_case, relative_error
from metacritic.envs import GridWorldConfig, GridWorldEnv, TwoAFCConfig, TwoAFCEnv
from metacritic.harness.config import from_dict, load_config
from metacritic.harness.experiments import (TrainedProbe, compare_mac_vs_vanilla, run_train, summarize,
                                            titrate_2afc)
from metacritic.rollout import EpisodeBatch
from metacritic.training import ReturnConfig, actor_gradient, estimate_beta_star, modified_return

TAB = HeadConfig("tabular", ())


def fmt(x):
    return "undefined" if x is None else f"{x:.4f}"


def test_criterion_1_gradient_correctness(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {kind: max(gradcheck_case(kind, rng) for _ in range(50)) for kind in KINDS}
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    acceptance_line(1, "gradcheck, 50 cases per kind, rel err < 1e-4", ok,
                    ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")
    assert ok


# three states, two actions, one decision per trajectory
D0 = np.array([0.5, 0.3, 0.2])
R = np.array([[1.0, 0.0], [0.0, 2.0], [0.5, -1.0]])
LOGITS = np.array([[0.2, -0.1], [0.5, 0.0], [-0.3, 0.4]])


def enumerated_gradient():
    def objective(logits):
        return float(np.sum(D0[:, None] * softmax(logits) * R))

    g = np.zeros_like(LOGITS)
    for idx in np.ndindex(*LOGITS.shape):
        up, down = LOGITS.copy(), LOGITS.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        g[idx] = (objective(up) - objective(down)) / 2e-6
    return g


def test_criterion_2_policy_gradient_unbiasedness(acceptance_line):
    t0 = time.perf_counter()
    n = 200_000
    rng = np.random.default_rng(2)
    agent = ActorCritic(3, 2, TAB, TAB, TAB)
    agent.params.get("policy", "table")[...] = LOGITS
    states = rng.choice(3, size=n, p=D0)
    actions = (rng.random(n) > softmax(LOGITS)[states, 0]).astype(int)
    rewards = R[states, actions] + 0.5 * rng.normal(size=n)
    batch = EpisodeBatch(np.eye(3)[states][None], actions[None], rewards[None], np.ones((1, n), dtype=bool))
    est, _ = actor_gradient(agent, batch, ReturnConfig())
    got = est.gradient[agent.params.head_slice("policy")].reshape(3, 2)
    exact = enumerated_gradient()
    significant = np.abs(exact) > 1e-3
    err = np.abs(got - exact)[significant] / np.abs(exact)[significant]
    elapsed = time.perf_counter() - t0
    ok = bool(err.max() < 0.02) and elapsed < 120
    acceptance_line(2, "3-state 2-action MDP estimator vs enumerated gradient within 2%", ok,
                    f"max rel err {err.max():.4f} over {int(significant.sum())} coords; {elapsed:.1f}s")
    assert ok


def test_criterion_3_control_variate_identity(acceptance_line):
    t0 = time.perf_counter()
    n = 100_000
    details, ok = [], True
    for rho in (0.0, 0.5, 0.8, 0.99):
        rng = np.random.default_rng(int(1000 * rho) + 3)
        q = rng.normal(size=n)
        g = 2.0 + rho * q + math.sqrt(1 - rho ** 2) * rng.normal(size=n)
        beta = estimate_beta_star(g, q).beta
        g_mod = modified_return(g, q, q.mean(), beta)
        ratio = np.var(g_mod, ddof=1) / np.var(g, ddof=1)
        shift = abs(g_mod.mean() - g.mean()) / (np.std(g, ddof=1) / math.sqrt(n))
        ok &= abs(ratio - (1 - rho ** 2)) <= 0.05 and shift < 3
        details.append(f"rho {rho}: ratio {ratio:.4f} vs {1 - rho ** 2:.4f}, mean shift {shift:.2f} SE")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    acceptance_line(3, "Var ratio = 1 - corr^2 within 0.05, mean within 3 SE", ok,
                    "; ".join(details) + f"; {elapsed:.1f}s")
    assert ok


def test_criterion_4_mac_invariants(acceptance_line):
    t0 = time.perf_counter()
    n = 100_000
    # H = 1 against vanilla sampling
    agent = ActorCritic(3, 3, seed=4)
    x = np.tile(np.array([0.3, -0.2, 1.0]), (n, 1))
    probs = softmax(agent.policy.forward(agent.params, x[:1])[0])[0]
    mac1 = mac_select_batch(agent, x, agent.initial_state(n), MacConfig(1), np.random.default_rng(1))
    van = vanilla_select_batch(agent, x, agent.initial_state(n), np.random.default_rng(2))
    p_mac = chisquare(np.bincount(mac1.actions, minlength=3), probs * n).pvalue
    p_van = chisquare(np.bincount(van.actions, minlength=3), probs * n).pvalue
    h1_ok = p_mac > 0.01 and p_van > 0.01
    # H = |A| without replacement is greedy on every trial
    agent = ActorCritic(5, 4, seed=3)
    xs = np.random.default_rng(5).normal(size=(n, 5))
    full = mac_select_batch(agent, xs, agent.initial_state(n), MacConfig(4), np.random.default_rng(6))
    q_all = np.stack([agent.critic_q(xs, np.full(n, a))[0] for a in range(4)], axis=1)
    greedy_ok = bool(np.all(full.actions == q_all.argmax(axis=1)))
    # expected chosen Q is monotone in H within one standard error
    agent = ActorCritic(4, 4, seed=7)
    x = np.tile(np.random.default_rng(0).normal(size=4), (n, 1))
    means, ses = [], []
    for h in (1, 2, 3, 4):
        d = mac_select_batch(agent, x, agent.initial_state(n), MacConfig(h), np.random.default_rng(10 + h))
        means.append(d.action_values.mean())
        ses.append(d.action_values.std(ddof=1) / math.sqrt(n))
    mono_ok = all(means[k + 1] >= means[k] - max(ses[k], ses[k + 1]) for k in range(3))
    elapsed = time.perf_counter() - t0
    ok = h1_ok and greedy_ok and mono_ok and elapsed < 120
    acceptance_line(4, "MAC invariants (H=1 ~ vanilla, H=|A| greedy, E[Q] monotone in H)", ok,
                    f"chi2 p {p_mac:.3f}/{p_van:.3f}; greedy {greedy_ok}; "
                    f"E[Q] {', '.join(f'{m:.4f}' for m in means)}; {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_two_afc_reproduction(acceptance_line):
    t0 = time.perf_counter()
    cfg = load_config("configs/two_afc.yaml", environ={})
    probe = TrainedProbe(cfg)
    res = titrate_2afc(cfg, target=0.69, tolerance=0.03, budget=8, probe=probe)
    _, log = probe.results[res.signal_mean]
    s = summarize(log)
    elapsed = time.perf_counter() - t0
    margin = None if s["precision"] is None else s["precision"] - s["base_error_rate"]
    hp_frac, hp_rate = s["high_prob_detected_fraction"], s["high_prob_detection_rate"]
    ok = (res.converged and 0.66 <= s["accuracy"] <= 0.72 and s["n_episodes"] >= 10_000
          and margin is not None and margin >= 0.10
          and s["recall"] is not None and s["recall"] >= 0.25
          and hp_frac is not None and hp_frac >= 0.10 and hp_rate is not None and hp_rate > 0
          and elapsed <= 1800)
    acceptance_line(5, "2AFC titrated to 0.69 +- 0.03: precision - base >= 0.10, recall >= 0.25, "
                       ">= 10% of flags at policy prob > 0.9", ok,
                    f"signal_mean {res.signal_mean:.4f}, accuracy {s['accuracy']:.4f}, "
                    f"precision {fmt(s['precision'])}, base {s['base_error_rate']:.4f}, recall {fmt(s['recall'])}, "
                    f"high-prob flag share {fmt(hp_frac)}, high-prob flag rate {fmt(hp_rate)}, "
                    f"{res.iterations} probes; {elapsed:.0f}s")
    assert ok


def test_criterion_6_pre_outcome_detection(acceptance_line):
    checked, ok = 0, True
    rec = HeadConfig("recurrent", (8,))
    agent = ActorCritic(3, 2, rec, rec, rec, seed=1)
    env = TwoAFCEnv(TwoAFCConfig(stimulus_steps=5))
    rng = np.random.default_rng(0)
    for episode in range(100):
        obs = env.reset(episode)
        state = agent.initial_state(1)
        while not env.awaiting_response:
            state = agent.advance(obs.features()[None], state)
            obs = env.step(0).observation
        action, _, record, _ = mac_select_action(agent, obs.features(), MacConfig(2), rng, state)
        before, flag = record.to_bytes(), detect_error(record)
        env.step(action)
        ok &= record.to_bytes() == before and detect_error(record) is flag
        checked += 1
    grid = GridWorldEnv(GridWorldConfig())
    agent = ActorCritic(grid.obs_dim, 4, TAB, TAB, TAB, seed=2)
    obs = grid.reset()
    for _ in range(50):
        action, _, record, _ = mac_select_action(agent, obs, MacConfig(2), rng)
        before, flag = record.to_bytes(), detect_error(record)
        res = grid.step(action)
        ok &= record.to_bytes() == before and detect_error(record) is flag
        checked += 1
        obs = grid.reset() if res.terminal else res.observation
    acceptance_line(6, "confidence record fixed before env.step, byte-identical after", ok,
                    f"{checked} decisions checked")
    assert ok


@pytest.mark.slow
def test_criterion_7_mac_vs_vanilla(acceptance_line, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config("configs/grid_compare.yaml", environ={})
    res = compare_mac_vs_vanilla(cfg, range(20), [4], final_episodes=200, out_dir=tmp_path)
    vanilla, mac = res.rows
    elapsed = time.perf_counter() - t0
    curves_written = res.paths["curves"].exists() and res.paths["curves"].stat().st_size > 0
    ok = mac.p_worse is not None and mac.p_worse >= 0.05 and curves_written and elapsed <= 1200
    acceptance_line(7, "grid world, 20 paired seeds: MAC H=4 non-inferior to vanilla (one-sided, alpha 0.05)", ok,
                    f"vanilla {vanilla.mean_final_return:.4f}, MAC {mac.mean_final_return:.4f}, "
                    f"diff {mac.diff_vs_vanilla:.4f} [{mac.ci_low:.4f}, {mac.ci_high:.4f}], "
                    f"p(worse) {mac.p_worse:.3f}, excluded {len(res.excluded)}; {elapsed:.0f}s")
    assert ok


def test_criterion_8_reproducibility(acceptance_line, tmp_path):
    same = []
    for name, updates in (("two_afc", 5), ("grid_compare", 20), ("bandit", 50)):
        raw = load_config(f"configs/{name}.yaml", environ={}).to_dict()
        raw["training"]["optimizer"]["total_updates"] = updates
        raw["evaluation"]["episodes"] = 100
        cfg = from_dict(raw)
        a = run_train(cfg, tmp_path / "a", timestamp="t")
        b = run_train(cfg, tmp_path / "b", timestamp="t")
        same.append(a.metrics.read_bytes() == b.metrics.read_bytes()
                    and a.checkpoint.read_bytes() == b.checkpoint.read_bytes())
    ok = all(same)
    acceptance_line(8, "repeated runs give bit-identical metrics JSONL and checkpoints", ok,
                    f"{sum(same)}/{len(same)} configs identical")
    assert ok
