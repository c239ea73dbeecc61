"""Experiment workflows: train/evaluate runs, 2AFC titration, MAC-vs-vanilla comparison, figure data."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from ..agent import ActorCritic, MacConfig
from ..approximator import load_checkpoint, save_checkpoint
from ..envs import (BanditEnv, GridWorldEnv, TwoAFCConfig, TwoAFCEnv, grid_value_iteration,
                    ideal_observer_accuracy, signal_mean_for_accuracy)
from ..errors import DivergenceError, RejectedInputError, UsageError
from ..metacog import (accumulate_arrays, confidence_histogram, detection_by_policy_probability_arrays,
                       detection_report)
from ..rollout import collect
from ..training import train
from .config import ExperimentConfig, from_dict, load_config

TRIAL_COLUMNS = ("episode", "step", "action", "policy_prob", "state_value", "action_value",
                 "confidence", "detected", "correct")
FIG3_HEADER = ("bin_low", "bin_high", "correct", "incorrect")
FIG4A_HEADER = ("detected", "correct", "count", "frequency")
FIG4B_HEADER = ("bin_low", "bin_high", "detected", "total")


def build_env(cfg: ExperimentConfig):
    env_cfg = cfg.env_config()
    return {"two-afc": TwoAFCEnv, "grid-world": GridWorldEnv, "bandit": BanditEnv}[cfg.env.kind](env_cfg)


def build_agent(cfg: ExperimentConfig, env) -> ActorCritic:
    a = cfg.agent
    return ActorCritic(env.obs_dim, env.n_actions, a.head("policy"), a.head("q"), a.head("v"),
                       seed=cfg.seeds().agent)


# ---------------------------------------------------------------- evaluation

@dataclass
class TrialLog:
    """Per-decision evaluation record; ``correct`` comes from the environment, never the agent."""

    episode: np.ndarray
    step: np.ndarray
    action: np.ndarray
    policy_prob: np.ndarray
    state_value: np.ndarray
    action_value: np.ndarray
    correct: np.ndarray
    episode_returns: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return self.action_value - self.state_value

    @property
    def detected(self) -> np.ndarray:
        return self.confidence < 0

    def __len__(self) -> int:
        return int(self.episode.size)

    @classmethod
    def empty(cls) -> "TrialLog":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(zi, zi, zi, z, z, z, np.zeros(0, dtype=bool), z)

    @classmethod
    def concat(cls, logs: list["TrialLog"]) -> "TrialLog":
        if not logs:
            return cls.empty()
        return cls(*(np.concatenate([getattr(lg, f) for lg in logs]) for f in cls.__dataclass_fields__))


def _optimal_mask(env, feats: np.ndarray, actions: np.ndarray) -> np.ndarray:
    if isinstance(env, BanditEnv):
        means = np.asarray(env.cfg.means)
        return means[actions] >= means.max()
    if isinstance(env, GridWorldEnv):
        _, Q = grid_value_iteration(env.cfg)
        cells = feats.argmax(axis=-1)
        q = Q[cells]
        return q[np.arange(len(actions)), actions] >= q.max(axis=1) - 1e-9
    raise RejectedInputError(f"no correctness oracle for {type(env).__name__}")


def evaluate(agent: ActorCritic, env, episodes: int, mac: MacConfig | None, rng: np.random.Generator,
             batch: int = 1000) -> TrialLog:
    """Roll out ``episodes`` episodes without learning and log every decision.

    Correctness: 2AFC compares the response with the signal side; bandit and
    grid world compare the action with the argmax set of the exact values.
    """
    logs, done = [], 0
    while done < episodes:
        n = min(batch, episodes - done)
        roll = collect(agent, env, n, rng, mac)
        b = roll.batch
        tt, bb = np.nonzero(b.decisions)
        actions = b.actions[tt, bb]
        if roll.correct is not None:
            correct = np.asarray(roll.correct, dtype=bool)[bb]
        else:
            correct = _optimal_mask(env, b.features[tt, bb], actions)
        returns = np.where(b.mask, b.rewards, 0.0).sum(axis=0)
        logs.append(TrialLog(bb + done, tt, actions, roll.chosen_probs, roll.state_values,
                             roll.action_values, correct, returns))
        done += n
    return TrialLog.concat(logs)


def summarize(log: TrialLog) -> dict:
    """Evaluation summary: accuracy, precision, recall, base error rate, mean confidence by correctness."""
    report = detection_report(accumulate_arrays(log.detected, log.correct))
    conf = log.confidence

    def _mean(x):
        return float(x.mean()) if x.size else None

    probs = log.policy_prob
    flagged = log.detected
    return {
        **report.to_dict(),
        "mean_confidence_correct": _mean(conf[log.correct]),
        "mean_confidence_incorrect": _mean(conf[~log.correct]),
        "mean_return": _mean(log.episode_returns),
        "high_prob_detected_fraction": (float(np.mean(probs[flagged] > 0.9)) if flagged.any() else None),
        "high_prob_detection_rate": (float(np.mean(flagged[probs > 0.9])) if (probs > 0.9).any() else None),
        "n_episodes": int(log.episode_returns.size),
        "n_trials": len(log),
    }


def threshold_sweep(log: TrialLog, thresholds) -> list[dict]:
    """Detection report with the flag rule ``confidence < t`` for each threshold ``t``.

    Diagnostic only; the agent's own rule is fixed at ``t = 0``.
    """
    conf = log.confidence
    return [{"threshold": float(t), **detection_report(accumulate_arrays(conf < t, log.correct)).to_dict()}
            for t in thresholds]


def write_trials(path, log: TrialLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        conf, det = log.confidence, log.detected
        for i in range(len(log)):
            w.writerow([int(log.episode[i]), int(log.step[i]), int(log.action[i]), repr(float(log.policy_prob[i])),
                        repr(float(log.state_value[i])), repr(float(log.action_value[i])),
                        repr(float(conf[i])), int(det[i]), int(log.correct[i])])


def read_trials(path) -> TrialLog:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"per-trial log {path} is missing; run an evaluation first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return TrialLog.empty()

    def col(name, dtype):
        return np.array([dtype(r[name]) for r in rows])

    return TrialLog(col("episode", int), col("step", int), col("action", int), col("policy_prob", float),
                    col("state_value", float), col("action_value", float),
                    col("correct", int).astype(bool), np.zeros(0))


# ---------------------------------------------------------------- figure data

def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_figures(source, out_dir, n_conf_bins: int = 20) -> dict[str, Path]:
    """Write the three figure CSVs from a TrialLog or a run directory holding ``trials.csv``.

    ``confidence_histogram.csv``: confidence counts split by correctness.
    ``detection_joint.csv``: joint detected x correct counts and frequencies.
    ``detection_by_policy_prob.csv``: flagged trials and totals per 0.1 bin of
    the chosen action's policy probability.
    An empty log gives header-only files.
    """
    log = source if isinstance(source, TrialLog) else read_trials(Path(source) / "trials.csv")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    if len(log) == 0:
        paths["confidence_histogram"] = _write_csv(out / "confidence_histogram.csv", FIG3_HEADER, [])
        paths["detection_joint"] = _write_csv(out / "detection_joint.csv", FIG4A_HEADER, [])
        paths["detection_by_policy_prob"] = _write_csv(out / "detection_by_policy_prob.csv", FIG4B_HEADER, [])
        return paths
    conf = log.confidence
    lo, hi = float(conf.min()), float(conf.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_conf_bins + 1)
    hist = confidence_histogram(conf, log.correct, edges)
    paths["confidence_histogram"] = _write_csv(
        out / "confidence_histogram.csv", FIG3_HEADER, [(repr(a), repr(b), c, i) for a, b, c, i in hist])
    stats_ = accumulate_arrays(log.detected, log.correct)
    counts = (stats_.det_inc, stats_.det_cor, stats_.nodet_inc, stats_.nodet_cor)
    labels = ((1, 0), (1, 1), (0, 0), (0, 1))
    paths["detection_joint"] = _write_csv(
        out / "detection_joint.csv", FIG4A_HEADER,
        [(d, c, k, repr(f)) for (d, c), k, f in zip(labels, counts, stats_.frequencies)])
    bins = detection_by_policy_probability_arrays(log.policy_prob, log.detected)
    paths["detection_by_policy_prob"] = _write_csv(
        out / "detection_by_policy_prob.csv", FIG4B_HEADER, [(b.low, b.high, b.detected, b.total) for b in bins])
    return paths


# ---------------------------------------------------------------- train runs

@dataclass
class RunArtifact:
    run_dir: Path
    config: Path
    metrics: Path
    timings: Path
    checkpoint: Path
    evaluation: Path
    trials: Path
    figures: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: str(v) for k, v in asdict(self).items() if k not in ("figures", "summary")}
        d["figures"] = {k: str(v) for k, v in self.figures.items()}
        return d


def run_dir_name(cfg: ExperimentConfig, timestamp: str | None = None) -> str:
    timestamp = timestamp or datetime.now().strftime("%Y%m%d-%H%M%S")
    return f"{cfg.name}_{timestamp}_seed{cfg.seed}"


def _fresh_dir(root: Path, name: str) -> Path:
    path, k = root / name, 1
    while path.exists():
        path, k = root / f"{name}-{k}", k + 1
    path.mkdir(parents=True)
    return path


def train_agent(cfg: ExperimentConfig, metrics_path=None, callback=None):
    """Build env and agent from ``cfg`` and train; returns ``(agent, env, TrainResult)``."""
    env = build_env(cfg)
    agent = build_agent(cfg, env)
    seeds = cfg.seeds()
    t = cfg.training
    result = train(agent, env, t.optimizer_config(seeds.train), t.return_config(), t.baseline,
                   cfg.agent.mac_config(), t.fixed_beta, metrics_path=metrics_path, callback=callback,
                   mac_warmup_updates=t.mac_warmup_updates)
    return agent, env, result


def evaluate_config(cfg: ExperimentConfig, agent: ActorCritic, env, episodes: int | None = None) -> TrialLog:
    episodes = cfg.evaluation.episodes if episodes is None else episodes
    rng = np.random.default_rng(cfg.seeds().eval)
    return evaluate(agent, env, episodes, cfg.agent.mac_config(), rng, cfg.evaluation.batch)


def _finish_eval(run_dir: Path, log: TrialLog) -> tuple[Path, Path, dict, dict]:
    summary = summarize(log)
    ev = run_dir / "evaluation.json"
    ev.write_text(json.dumps(summary, indent=2) + "\n")
    trials = run_dir / "trials.csv"
    write_trials(trials, log)
    figures = emit_figures(log, run_dir / "figures")
    return ev, trials, figures, summary


def run_train(cfg: ExperimentConfig, output_root=None, timestamp: str | None = None) -> RunArtifact:
    """Train, checkpoint and evaluate one configuration into a fresh run directory."""
    cfg.validate()
    root = Path(output_root if output_root is not None else cfg.output_dir)
    run_dir = _fresh_dir(root, run_dir_name(cfg, timestamp))
    config_path = run_dir / "config.yaml"
    config_path.write_text(cfg.dump())
    metrics = run_dir / "metrics.jsonl"
    agent, env, result = train_agent(cfg, metrics_path=metrics)
    timings = run_dir / "timings.json"
    timings.write_text(json.dumps({"update_seconds": result.timings,
                                   "total_seconds": float(sum(result.timings)),
                                   "env_steps": result.env_steps}) + "\n")
    ckpt = run_dir / "checkpoint.bin"
    save_checkpoint(ckpt, agent.params, cfg.seed, {"experiment": cfg.name, "env": cfg.env.kind})
    ev, trials, figures, summary = _finish_eval(run_dir, evaluate_config(cfg, agent, env))
    return RunArtifact(run_dir, config_path, metrics, timings, ckpt, ev, trials, figures, summary)


def evaluate_run(run_dir, episodes: int | None = None) -> dict:
    """Reload a run's config and checkpoint, re-evaluate and rewrite its evaluation files."""
    run_dir = Path(run_dir)
    cfg_path, ckpt = run_dir / "config.yaml", run_dir / "checkpoint.bin"
    for p in (cfg_path, ckpt):
        if not p.exists():
            raise UsageError(f"{p} is missing; not a run directory")
    cfg = load_config(cfg_path, environ={})
    env = build_env(cfg)
    agent = build_agent(cfg, env)
    params, _, _ = load_checkpoint(ckpt)
    if params.segments != agent.params.segments:
        raise RejectedInputError("checkpoint layout does not match the configured agent")
    agent.params.values[:] = params.values
    _, _, _, summary = _finish_eval(run_dir, evaluate_config(cfg, agent, env, episodes))
    return summary


# ---------------------------------------------------------------- titration

@dataclass
class TitrationResult:
    signal_mean: float
    accuracy: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # (signal_mean, accuracy) per probe

    def to_dict(self) -> dict:
        return asdict(self)


def titrate(accuracy_fn: Callable[[float], float], target: float, tolerance: float, budget: int,
            lower: float, upper: float) -> TitrationResult:
    """Bisection on the signal mean, assuming accuracy increases with it.

    Stops at the first probe within ``tolerance`` of ``target``; otherwise
    reports the closest probe with ``converged=False``.
    """
    if not 0.5 < target < 1.0:
        raise RejectedInputError("target accuracy must lie in (0.5, 1)")
    if tolerance <= 0:
        raise RejectedInputError("tolerance must be positive")
    if budget < 1 or not upper > lower:
        raise RejectedInputError("need budget >= 1 and upper > lower")
    lo, hi = lower, upper
    history = []
    best = None
    for _ in range(budget):
        mu = 0.5 * (lo + hi)
        acc = float(accuracy_fn(mu))
        history.append((mu, acc))
        if best is None or abs(acc - target) < abs(best[1] - target):
            best = (mu, acc)
        if abs(acc - target) <= tolerance:
            return TitrationResult(mu, acc, len(history), True, history)
        if acc < target:
            lo = mu
        else:
            hi = mu
    return TitrationResult(best[0], best[1], len(history), False, history)


def _with_signal_mean(cfg: ExperimentConfig, mu: float) -> ExperimentConfig:
    raw = cfg.to_dict()
    raw["env"]["params"]["signal_mean"] = float(mu)
    return from_dict(raw)


class TrainedProbe:
    """``mu -> accuracy`` by training a fresh agent at signal mean ``mu`` and evaluating it.

    Each probe's agent and trial log are kept in ``results`` for later analysis.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.results: dict[float, tuple[ActorCritic, TrialLog]] = {}

    def __call__(self, mu: float) -> float:
        cfg = _with_signal_mean(self.cfg, mu)
        agent, env, _ = train_agent(cfg)
        log = evaluate_config(cfg, agent, env)
        self.results[mu] = (agent, log)
        return float(np.mean(log.correct))


def ideal_probe(cfg: ExperimentConfig) -> Callable[[float], float]:
    env_cfg: TwoAFCConfig = cfg.env_config()
    return lambda mu: ideal_observer_accuracy(TwoAFCConfig(**{**asdict(env_cfg), "signal_mean": mu}))


def ideal_bracket(env_cfg: TwoAFCConfig, target: float) -> tuple[float, float]:
    """Signal-mean bracket from the summed-evidence observer.

    No observer beats it, so its solution for ``target`` is a lower bound for a
    trained agent; its solution for an accuracy halfway to 1 is the upper end.
    """
    lower = signal_mean_for_accuracy(env_cfg, target)
    upper = signal_mean_for_accuracy(env_cfg, target + 0.5 * (1.0 - target))
    return lower, upper


def titrate_2afc(cfg: ExperimentConfig, target: float = 0.69, tolerance: float = 0.03, budget: int = 8,
                 mode: str = "trained", probe=None) -> TitrationResult:
    """Titrate the 2AFC signal mean until accuracy is within ``tolerance`` of ``target``.

    ``mode="trained"`` trains a fresh agent per probe; ``mode="ideal"`` uses the
    analytic observer only. Either way the bracket comes from the analytic observer.
    """
    if cfg.env.kind != "two-afc":
        raise RejectedInputError("titration needs a two-afc environment")
    if not 0.5 < target < 1.0:
        raise RejectedInputError("target accuracy must lie in (0.5, 1)")
    lower, upper = ideal_bracket(cfg.env_config(), target)
    if probe is None:
        probe = ideal_probe(cfg) if mode == "ideal" else TrainedProbe(cfg)
    if mode == "ideal":
        lower = cfg.env_config().noise_mean
    return titrate(probe, target, tolerance, budget, lower, upper)


# ---------------------------------------------------------------- comparison

@dataclass
class ComparisonRow:
    arm: str
    budget: int | None
    n_seeds: int
    mean_final_return: float
    std_final_return: float
    diff_vs_vanilla: float | None
    ci_low: float | None
    ci_high: float | None
    p_worse: float | None  # one-sided paired t-test, H1: arm < vanilla


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    final: dict            # arm -> {seed: final mean return}
    curves: list[tuple]    # (arm, seed, update, env_steps, mean_return)
    excluded: list[dict]   # divergent (arm, seed) pairs
    paths: dict = field(default_factory=dict)


def _arm_config(cfg: ExperimentConfig, seed: int, budget: int | None) -> ExperimentConfig:
    raw = cfg.to_dict()
    raw["seed"] = int(seed)
    raw["agent"]["selection"] = "vanilla" if budget is None else "mac"
    if budget is not None:
        raw["agent"]["mac"]["budget"] = int(budget)
    return from_dict(raw)


def _run_arm(job):
    cfg, arm, seed, final_episodes = job
    curve = []
    try:
        agent, env, result = train_agent(cfg)
    except DivergenceError as exc:
        return arm, seed, None, curve, str(exc)
    curve = [(arm, seed, m["update"], m["env_steps"], m["mean_return"]) for m in result.metrics]
    log = evaluate_config(cfg, agent, env, final_episodes)
    return arm, seed, float(log.episode_returns.mean()), curve, None


def _pool_map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def paired_row(arm: str, budget, mac: dict, vanilla: dict | None, alpha: float = 0.05) -> ComparisonRow:
    vals = np.array(list(mac.values()))
    mean = float(vals.mean()) if vals.size else math.nan
    std = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
    if vanilla is None:
        return ComparisonRow(arm, budget, int(vals.size), mean, std, None, None, None, None)
    seeds = sorted(set(mac) & set(vanilla))
    d = np.array([mac[s] - vanilla[s] for s in seeds])
    if d.size < 2:
        return ComparisonRow(arm, budget, int(d.size), mean, std, None, None, None, None)
    dm = float(d.mean())
    se = float(d.std(ddof=1) / math.sqrt(d.size))
    if se == 0:
        lo = hi = dm
        p = 0.0 if dm < 0 else 1.0
    else:
        half = float(stats.t.ppf(1 - alpha / 2, d.size - 1)) * se
        lo, hi = dm - half, dm + half
        p = float(stats.t.cdf(dm / se, d.size - 1))
    return ComparisonRow(arm, budget, int(d.size), mean, std, dm, lo, hi, p)


def compare_mac_vs_vanilla(cfg: ExperimentConfig, seeds, budgets, final_episodes: int = 200,
                           out_dir=None, workers: int = 1) -> ComparisonResult:
    """Train vanilla and MAC (one arm per budget H) on every seed with identical streams.

    Returns one row per arm: vanilla first, then each H, with the paired
    difference to vanilla and its 95% confidence interval. Seeds that diverge
    in any arm are excluded from that arm's paired statistics and listed.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 10:
        raise RejectedInputError("the comparison needs at least 10 seeds")
    if cfg.env.kind != "grid-world":
        raise RejectedInputError("the comparison runs on the grid world")
    arms = [("vanilla", None)] + [(f"mac-H{h}", int(h)) for h in budgets]
    jobs = [(_arm_config(cfg, s, b), name, s, final_episodes) for name, b in arms for s in seeds]
    final: dict = {name: {} for name, _ in arms}
    curves, excluded = [], []
    for arm, seed, ret, curve, err in _pool_map(_run_arm, jobs, workers):
        curves += curve
        if err is not None:
            excluded.append({"arm": arm, "seed": seed, "error": err})
        else:
            final[arm][seed] = ret
    rows = [paired_row("vanilla", None, final["vanilla"], None)]
    rows += [paired_row(name, b, final[name], final["vanilla"]) for name, b in arms[1:]]
    result = ComparisonResult(rows, final, curves, excluded)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields_ = list(ComparisonRow.__dataclass_fields__)
        result.paths["table"] = _write_csv(out / "comparison.csv", fields_,
                                           [[_csv_val(getattr(r, f)) for f in fields_] for r in rows])
        result.paths["curves"] = _write_csv(out / "curves.csv",
                                            ("arm", "seed", "update", "env_steps", "mean_return"), curves)
        (out / "excluded.json").write_text(json.dumps(excluded, indent=2) + "\n")
        result.paths["excluded"] = out / "excluded.json"
    return result


def _csv_val(v):
    return "" if v is None else v

