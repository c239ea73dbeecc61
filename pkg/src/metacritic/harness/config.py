"""Experiment configuration: a nested YAML document mapped onto dataclasses.

Schema (every key optional; omitted keys take the defaults shown by
``default_config().to_dict()``)::

    name: two-afc
    seed: 0                    # master seed, expanded into env/agent/train/eval streams
    output_dir: runs
    env:
      kind: two-afc            # two-afc | grid-world | bandit
      params: {...}            # fields of TwoAFCConfig / GridWorldConfig / BanditConfig
    agent:
      selection: vanilla       # vanilla | mac
      mac: {budget: 4, acquisition: {variant: without-replacement, temperature: 1.0},
            final_choice: greedy-over-hypotheticals}
      policy: {kind: mlp, hidden: [32]}
      q: {kind: mlp, hidden: [32]}
      v: {kind: mlp, hidden: [32]}
    training:
      optimizer: {...}         # fields of OptimizerConfig (its seed is overwritten by the master seed)
      returns: {gamma: 1.0, mode: discounted}
      baseline: none           # none | mean-baseline | fitted-beta | state-value
      fixed_beta: null
      mac_warmup_updates: 0    # updates with plain sampling before MAC selection starts
    evaluation:
      episodes: 10000
      batch: 1000

``METACRITIC_SEED`` and ``METACRITIC_OUTPUT_DIR`` override ``seed`` and
``output_dir`` when a config is loaded from a file.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from ..agent import ACQUISITION_VARIANTS, AcquisitionRule, HeadConfig, MacConfig
from ..approximator import KINDS
from ..envs import BanditConfig, GridWorldConfig, TwoAFCConfig
from ..errors import ConfigError, RejectedInputError
from ..training import BASELINE_MODES, RETURN_MODES, OptimizerConfig, ReturnConfig

ENV_KINDS = {"two-afc": TwoAFCConfig, "grid-world": GridWorldConfig, "bandit": BanditConfig}
SELECTIONS = ("vanilla", "mac")
SEED_ENV = "METACRITIC_SEED"
OUTPUT_ENV = "METACRITIC_OUTPUT_DIR"


@dataclass
class EnvSpec:
    kind: str = "two-afc"
    params: dict = field(default_factory=dict)

    def build_config(self):
        return ENV_KINDS[self.kind](**self.params)


@dataclass
class AgentSpec:
    selection: str = "vanilla"
    mac: dict = field(default_factory=lambda: {
        "budget": 4,
        "acquisition": {"variant": "without-replacement", "temperature": 1.0},
        "final_choice": "greedy-over-hypotheticals",
    })
    policy: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [32]})
    q: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [32]})
    v: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [32]})

    def mac_config(self) -> MacConfig | None:
        if self.selection == "vanilla":
            return None
        acq = AcquisitionRule(**self.mac.get("acquisition", {}))
        return MacConfig(budget=self.mac.get("budget", 4), acquisition=acq,
                         final_choice=self.mac.get("final_choice", "greedy-over-hypotheticals"))

    def head(self, name: str) -> HeadConfig:
        spec = getattr(self, name)
        return HeadConfig(spec.get("kind", "mlp"), tuple(spec.get("hidden", (32,))))


@dataclass
class TrainingSpec:
    optimizer: dict = field(default_factory=lambda: _plain(asdict(OptimizerConfig())))
    returns: dict = field(default_factory=lambda: _plain(asdict(ReturnConfig())))
    baseline: str = "none"
    fixed_beta: float | None = None
    mac_warmup_updates: int = 0

    def optimizer_config(self, seed: int) -> OptimizerConfig:
        opt = dict(self.optimizer)
        if "adam_betas" in opt:
            opt["adam_betas"] = tuple(opt["adam_betas"])
        opt["seed"] = seed
        return OptimizerConfig(**opt)

    def return_config(self) -> ReturnConfig:
        return ReturnConfig(**self.returns)


@dataclass
class EvaluationSpec:
    episodes: int = 10_000
    batch: int = 1000


@dataclass
class Seeds:
    env: int
    agent: int
    train: int
    eval: int


@dataclass
class ExperimentConfig:
    name: str = "two-afc"
    seed: int = 0
    output_dir: str = "runs"
    env: EnvSpec = field(default_factory=EnvSpec)
    agent: AgentSpec = field(default_factory=AgentSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)

    def seeds(self) -> Seeds:
        """Independent streams derived from the master seed; stable across runs."""
        children = np.random.SeedSequence(self.seed).spawn(4)
        env, agent, train, ev = (int(c.generate_state(1, dtype=np.uint32)[0]) for c in children)
        return Seeds(env, agent, train, ev)

    def env_config(self):
        cfg = self.env.build_config()
        # the env's own seed follows the master seed unless set explicitly
        if "seed" not in self.env.params:
            cfg = type(cfg)(**{**asdict(cfg), "seed": self.seeds().env})
        return cfg

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def violations(self) -> list[str]:
        return _violations(self)

    def validate(self) -> "ExperimentConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self


def _plain(x):
    """Tuples to lists, recursively, so the dict matches what YAML hands back."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _default_params(kind: str) -> dict:
    cls = ENV_KINDS.get(kind)
    if cls is None:
        return {}
    return _plain({k: v for k, v in asdict(cls()).items() if k != "seed"})


def from_dict(raw: dict | None) -> ExperimentConfig:
    """Build a config from a (possibly partial) nested dict; defaults fill the gaps.

    Unknown keys are reported as violations rather than silently dropped.
    """
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    problems = _unknown_keys(raw)
    base = ExperimentConfig().to_dict()
    kind = (raw.get("env") or {}).get("kind", base["env"]["kind"])
    base["env"]["params"] = _default_params(kind)
    merged = _merge(base, raw)
    try:
        cfg = ExperimentConfig(
            name=merged["name"], seed=merged["seed"], output_dir=merged["output_dir"],
            env=EnvSpec(**merged["env"]), agent=AgentSpec(**merged["agent"]),
            training=TrainingSpec(**merged["training"]), evaluation=EvaluationSpec(**merged["evaluation"]),
        )
    except TypeError as exc:
        raise ConfigError(problems + [str(exc)]) from None
    problems += cfg.violations()
    if problems:
        raise ConfigError(problems)
    return cfg


def _unknown_keys(raw: dict) -> list[str]:
    out = []
    allowed = {f.name for f in fields(ExperimentConfig)}
    sections = {"env": EnvSpec, "agent": AgentSpec, "training": TrainingSpec, "evaluation": EvaluationSpec}
    for k, v in raw.items():
        if k not in allowed:
            out.append(f"unknown key {k!r}")
        elif k in sections and isinstance(v, dict):
            known = {f.name for f in fields(sections[k])}
            out += [f"unknown key {k}.{kk}" for kk in v if kk not in known]
    return out


def _check(problems: list, fn, prefix: str):
    try:
        return fn()
    except (RejectedInputError, TypeError, ValueError) as exc:
        problems.append(f"{prefix}: {exc}")
        return None


def _violations(cfg: ExperimentConfig) -> list[str]:
    out: list[str] = []
    if not isinstance(cfg.name, str) or not cfg.name:
        out.append("name must be a non-empty string")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        out.append("seed must be a non-negative integer")
    if cfg.env.kind not in ENV_KINDS:
        out.append(f"env.kind must be one of {sorted(ENV_KINDS)}, got {cfg.env.kind!r}")
    else:
        env_cfg = _check(out, cfg.env.build_config, "env.params")
        if env_cfg is not None:
            out += [f"env.params: {p}" for p in env_cfg.violations()]
    a = cfg.agent
    if a.selection not in SELECTIONS:
        out.append(f"agent.selection must be one of {list(SELECTIONS)}, got {a.selection!r}")
    variant = (a.mac.get("acquisition") or {}).get("variant", "without-replacement")
    if variant not in ACQUISITION_VARIANTS:
        out.append(f"agent.mac.acquisition.variant must be one of {list(ACQUISITION_VARIANTS)}")
    else:
        budget = a.mac.get("budget", 4)
        if not isinstance(budget, int) or budget < 1:
            out.append("agent.mac.budget must be an integer >= 1")
        else:
            _check(out, lambda: AgentSpec(selection="mac", mac=a.mac).mac_config(), "agent.mac")
    for name in ("policy", "q", "v"):
        spec = getattr(a, name)
        if spec.get("kind", "mlp") not in KINDS:
            out.append(f"agent.{name}.kind must be one of {list(KINDS)}")
        hidden = spec.get("hidden", [32])
        if not all(isinstance(h, int) and h > 0 for h in hidden):
            out.append(f"agent.{name}.hidden must be positive integers")
    t = cfg.training
    if t.baseline not in BASELINE_MODES:
        out.append(f"training.baseline must be one of {list(BASELINE_MODES)}, got {t.baseline!r}")
    opt = _check(out, lambda: t.optimizer_config(0), "training.optimizer")
    if opt is not None:
        out += [f"training.optimizer: {p}" for p in opt.violations()]
    if not isinstance(t.mac_warmup_updates, int) or t.mac_warmup_updates < 0:
        out.append("training.mac_warmup_updates must be a non-negative integer")
    if t.returns.get("mode", "discounted") not in RETURN_MODES:
        out.append(f"training.returns.mode must be one of {list(RETURN_MODES)}")
    else:
        _check(out, t.return_config, "training.returns")
    if not isinstance(cfg.evaluation.episodes, int) or cfg.evaluation.episodes < 0:
        out.append("evaluation.episodes must be a non-negative integer")
    if not isinstance(cfg.evaluation.batch, int) or cfg.evaluation.batch < 1:
        out.append("evaluation.batch must be a positive integer")
    return out


def apply_env_overrides(raw: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw = dict(raw or {})
    if environ.get(SEED_ENV):
        try:
            raw["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError([f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}"]) from None
    if environ.get(OUTPUT_ENV):
        raw["output_dir"] = environ[OUTPUT_ENV]
    return raw


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"invalid YAML: {exc}"]) from None
    return from_dict(raw)


def load_config(path, environ=None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: invalid YAML: {exc}"]) from None
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    return from_dict(apply_env_overrides(raw, environ))


def default_config(kind: str = "two-afc") -> ExperimentConfig:
    return from_dict({"name": kind, "env": {"kind": kind}})
