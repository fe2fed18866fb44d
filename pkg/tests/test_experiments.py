import json
import math

import pytest

from rulestate.errors import UnknownExperiment
from rulestate.experiments import (EXPERIMENTS, joint_eta_sd, monotonicity_violations,
                                   prior_configurations, run_experiment, single_rule_sd)
from rulestate.datagen import benchmark_rules


def test_trace_experiment_has_no_decreases(tmp_path):
    rep = run_experiment("6", J=300, seed=2)
    row = rep.metrics[0]
    assert row["converged"] and row["decreases"] == 0 and row["substep_decreases"] == 0
    body = json.loads(rep.write(tmp_path).read_text())
    assert "wall_times" not in body
    assert (tmp_path / "experiment_6.timing.json").exists()


def test_overall_reports_both_methods():
    rep = run_experiment("1", J=300, seed=2)
    assert [m["method"] for m in rep.metrics] == ["RSI", "RBS"]
    assert all(0.0 <= m["f1"] <= 1.0 for m in rep.metrics)


def test_sensitivity_covers_five_priors():
    rep = run_experiment("sensitivity", J=300, seed=2)
    assert [m["prior"] for m in rep.metrics] == list(prior_configurations(benchmark_rules()))


def test_monotonicity_checker():
    assert monotonicity_violations([0.0, 1.0, 1.0, 2.0]) == []
    assert monotonicity_violations([0.0, 1.0, 0.5]) == [2]
    assert monotonicity_violations([-1.0, -1.0 - 1e-12]) == []
    assert monotonicity_violations([0.0, -1e-12], floor=1.0) == []
    assert monotonicity_violations([0.0, -1e-12]) == [1]


def test_single_rule_sd_shrinks_like_one_over_root_n():
    a, _ = single_rule_sd(100, 0)
    b, _ = single_rule_sd(400, 0)
    assert a / b == pytest.approx(2.0, rel=0.05)


def test_shared_factor_sd_has_a_floor():
    # with K rules and loading rho, even exact knowledge of every phi leaves
    # Var(eta) = 1 / (1 + K rho^2 / (1 - rho^2))
    floor = math.sqrt(1.0 / (1.0 + 5 * 0.25 / 0.75))
    assert joint_eta_sd(20_000, 0) == pytest.approx(floor, rel=1e-3)


def test_unknown_experiment():
    assert "sensitivity" in EXPERIMENTS
    with pytest.raises(UnknownExperiment):
        run_experiment("99")
