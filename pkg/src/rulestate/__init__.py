"""Bayesian population-level compliance monitoring over a joint rule state."""

from .adaptability import (ApplicabilityUpdate, CostLedger, ParameterUpdate, RegulatoryUpdate,
                           UpdateLog, apply_update, load_updates)
from .cavi import (CaviConfig, Posterior, VariationalState, effective_prior, elbo, fit,
                   posterior_summary, run_cavi)
from .datagen import Benchmark, GenConfig, benchmark_rules, generate, write_benchmark
from .errors import RuleStateError
from .estimator import RuleStateInference
from .links import LinkKind, inverse, transform
from .rules import (Applicability, Entity, RuleSpec, SignalTable, load_rules, read_entities,
                    summarize)
from .scoring import ScoreReport, rbs_scores, score_entities
from .sequential import entity_filter, estimate_gamma_sq, filter_trajectory, run_periods

__version__ = "0.1.0"

__all__ = [
    "Applicability", "ApplicabilityUpdate", "Benchmark", "CaviConfig", "CostLedger", "Entity",
    "GenConfig", "LinkKind", "ParameterUpdate", "Posterior", "RegulatoryUpdate",
    "RuleSpec", "RuleStateError", "RuleStateInference", "ScoreReport", "SignalTable",
    "UpdateLog", "VariationalState", "apply_update", "benchmark_rules", "effective_prior",
    "elbo", "entity_filter", "estimate_gamma_sq", "filter_trajectory", "fit", "generate",
    "inverse", "load_rules", "load_updates", "posterior_summary", "rbs_scores",
    "read_entities", "run_cavi", "run_periods", "score_entities", "summarize", "transform",
    "write_benchmark",
]
