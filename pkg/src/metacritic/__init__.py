"""Metacognitive actor-critic: an actor-critic whose actor proposes hypothetical
actions for the critic to score before acting, and which flags its own likely
errors from the sign of Q(S, A) - V(S)."""

from .agent import (AcquisitionRule, ActorCritic, ConfidenceRecord, HeadConfig, HypotheticalSet, MacConfig,
                    detect_error, mac_select_action, vanilla_select_action)
from .approximator import Approximator, ParamVector, finite_difference_gradient, load_checkpoint, save_checkpoint
from .envs import (BanditConfig, BanditEnv, GridWorldConfig, GridWorldEnv, TwoAFCConfig, TwoAFCEnv,
                   dprime_of_config)
from .errors import ConfigError, DegenerateBaselineError, DivergenceError, RejectedInputError, UsageError
from .training import (OptimizerConfig, ReturnConfig, compute_return, compute_returns_to_go, estimate_beta_star,
                       modified_return, policy_gradient_estimate, train, variance_ratio_diagnostic)

__version__ = "0.1.0"
