"""Round-based simulator for longest-chain consensus, its Stubborn variant,
attacks on both, and post-hoc verifiers."""

from .config import ConfigError, Scenario, load_scenario, preset_names
from .engine import Sim, calibrate_t_conf, run_experiment, run_trial
from .trace import RunTrace
from .verifiers import (Verdict, check_consistency, check_liveness, check_recovery_lemma,
                        count_adversarial_blocks, count_convergence_opportunities,
                        honest_majority_predicate)

__all__ = [
    "ConfigError", "Scenario", "load_scenario", "preset_names",
    "Sim", "calibrate_t_conf", "run_experiment", "run_trial", "RunTrace",
    "Verdict", "check_consistency", "check_liveness", "check_recovery_lemma",
    "count_adversarial_blocks", "count_convergence_opportunities", "honest_majority_predicate",
]

__version__ = "0.1.0"
