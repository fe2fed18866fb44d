import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rulestate.cavi import (CaviConfig, RuleParams, Stats, VariationalState,
                            activation_probability, effective_prior, elbo, eta_variance, fit,
                            init_state, iterate, leave_one_out_eta, posterior_summary,
                            psi_posterior, rho_gradient, rule_prior, run_cavi,
                            solve_phi_delta, update_activation, update_delta, update_eta,
                            update_phi, update_rho)
from rulestate.datagen import benchmark_rules
from rulestate.experiments import monotonicity_violations
from rulestate.errors import ConfigError, EmptyRuleSet, InnerLoopDivergence
from rulestate.rules import Applicability, RuleSpec, SignalTable

APP = Applicability("size", ">=", 0, "units")


def rule(rid="A", mu=0.0, tau2=1.0, omega2=0.04, sigma2=1.0, pi=0.9, link="identity"):
    return RuleSpec(rid, link, pi, mu, tau2, omega2, sigma2, 1.0, APP)


def stats(n, t_bar, spread=1.0):
    n = np.asarray(n, dtype=float)
    t_bar = np.asarray(t_bar, dtype=float)
    return Stats(n, np.where(n > 0, t_bar, 0.0), n * (t_bar ** 2 + spread))


# random problems for the property tests
problems = st.integers(1, 6).flatmap(lambda K: st.tuples(
    st.lists(st.floats(-2, 2), min_size=K, max_size=K),          # mu
    st.lists(st.floats(0.05, 2.0), min_size=K, max_size=K),      # tau2
    st.lists(st.floats(0.01, 0.5), min_size=K, max_size=K),      # omega2
    st.lists(st.floats(0.05, 1.0), min_size=K, max_size=K),      # sigma2
    st.lists(st.floats(0.05, 0.95), min_size=K, max_size=K),     # pi
    st.lists(st.integers(0, 300), min_size=K, max_size=K),       # n
    st.lists(st.floats(-3, 3), min_size=K, max_size=K),          # t_bar
    st.floats(0.01, 0.95),                                       # rho0
))


def build(problem):
    mu, tau2, omega2, sigma2, pi, n, t_bar, rho0 = problem
    rules = [rule(f"R{i}", mu[i], tau2[i], omega2[i], sigma2[i], pi[i])
             for i in range(len(mu))]
    return rules, stats(n, t_bar, 0.5), rho0


# initialisation


def test_init_matches_table_priors():
    rules = benchmark_rules()
    state = init_state(rules, CaviConfig(rho0=0.1))
    assert state.m_phi[0] == 1.39 and state.v_phi[0] == 0.25 and state.rho_a[0] == 0.92
    assert state.rho == 0.1


def test_zero_start_for_free_rho_is_rejected():
    with pytest.raises(ConfigError):
        CaviConfig(rho0=0.0)
    CaviConfig(rho0=0.0, fix_rho=True)


@pytest.mark.parametrize("kw", [{"tol": 0.0}, {"shrink": 1.0}, {"inner_solver": "newton"},
                                {"clamp_activation": 0.0}, {"max_iter": 0}])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        CaviConfig(**kw)


def test_single_rule_starts_at_standard_normal_eta():
    state = init_state([rule()])
    assert (state.m_eta, state.v_eta) == (0.0, 1.0)


def test_empty_rule_set():
    with pytest.raises(EmptyRuleSet):
        init_state([])


# eta and the effective prior


def test_eta_without_coupling():
    rules = benchmark_rules()
    state = init_state(rules)
    state.rho = 0.0
    state.m_phi = state.m_phi + 0.3
    assert update_eta(state, rules) == (1.0, 0.0)


def test_eta_worked_example():
    r = rule(mu=0.0, tau2=1.0)
    state = init_state([r])
    state.rho, state.m_phi[:] = 0.5, 0.6
    v, m = update_eta(state, [r])
    assert v == pytest.approx(0.75, abs=1e-12)
    assert m == pytest.approx(0.3, abs=1e-12)


@given(st.floats(0.0, 0.999))
def test_eta_mean_is_zero_without_deviation(rho):
    rules = benchmark_rules()
    state = init_state(rules)
    state.rho = rho
    v, m = update_eta(state, rules)
    assert m == 0.0 and 0.0 < v <= 1.0


def test_effective_prior_examples():
    r = rule(mu=1.39, tau2=0.25)
    ep = effective_prior(r, 0.7, 0.3, 0.0)
    assert (ep.mu_tilde, ep.psi_tilde_sq) == (1.39, 0.25)
    ep = effective_prior(r, 0.3, 0.75, 0.5)
    assert ep.mu_tilde == pytest.approx(1.465, abs=1e-12)
    assert ep.psi_tilde_sq == pytest.approx(0.234375, abs=1e-12)


@given(st.floats(0.0, 0.999), st.floats(0.01, 5.0))
def test_effective_prior_preserves_variance_at_standard_eta(rho, tau2):
    ep = effective_prior(rule(tau2=tau2), 0.0, 1.0, rho)
    assert ep.psi_tilde_sq == pytest.approx(tau2, rel=1e-12)


def test_rule_prior_uses_the_other_rules():
    rules = [rule("A", tau2=1.0), rule("B", tau2=1.0)]
    state = init_state(rules)
    state.rho, state.m_phi[:] = 0.5, [0.6, 5.0]
    v, m = leave_one_out_eta(state, rules, 1)
    assert (v, m) == pytest.approx((0.75, 0.3))
    assert rule_prior(state, rules, 1).mu_tilde == pytest.approx(0.15)


# phi, delta, activation


def test_phi_update_conjugate_example():
    r = rule(mu=0.0, tau2=1.0, sigma2=1.0)
    state = init_state([r], CaviConfig(rho0=0.0, fix_rho=True))
    state.rho_a[:] = 1.0
    v, m = update_phi(0, state, [r], stats([4], [2.0]))
    assert (v, m) == pytest.approx((0.2, 1.6), abs=1e-12)


@given(st.integers(1, 1000), st.floats(-2, 2))
def test_phi_stays_at_prior_mean_without_residual(n, mu):
    r = rule(mu=mu)
    state = init_state([r], CaviConfig(rho0=0.0, fix_rho=True))
    _, m = update_phi(0, state, [r], stats([n], [mu]))
    assert m == pytest.approx(mu, abs=1e-12)


def test_delta_update_examples():
    r = rule(omega2=0.04)
    state = init_state([r])
    assert update_delta(0, state, [r], stats([0], [0.0])) == (0.04, 0.0)
    state.m_phi[:] = 0.7
    assert update_delta(0, state, [r], stats([50], [0.7]))[1] == 0.0


def test_activation_examples():
    assert activation_probability(0.3, -4.0, -4.0) == pytest.approx(0.3)
    assert activation_probability(0.5, 0.0, 0.0) == 0.5


def test_activation_without_observations_keeps_prior():
    rules = benchmark_rules()
    state = init_state(rules)
    r = update_activation(state, rules, stats([0] * 5, [0.0] * 5))
    assert np.allclose(r, [x.prior_activation for x in rules])


@given(st.floats(-3, 3), st.floats(0.01, 2), st.floats(0.01, 0.5), st.floats(0, 500),
       st.floats(-3, 3))
def test_alternating_solver_reaches_the_direct_solution(mu_t, psi2, omega2, c, t_bar):
    direct = solve_phi_delta(mu_t, psi2, omega2, c, t_bar)
    alt = solve_phi_delta(mu_t, psi2, omega2, c, t_bar, solver="alternate", tol=1e-14,
                          max_iter=200_000)
    assert alt == pytest.approx(direct, rel=1e-9, abs=1e-9)


def test_alternating_solver_reports_divergence():
    with pytest.raises(InnerLoopDivergence):
        solve_phi_delta(0.0, 1.0, 0.5, 1e4, 1.0, solver="alternate", max_iter=3)


# objective and rho


def test_objective_is_zero_at_prior_without_data():
    rules = benchmark_rules()
    config = CaviConfig(rho0=0.0, fix_rho=True)
    state = init_state(rules, config)
    assert elbo(state, rules, stats([0] * 5, [0.0] * 5)) == pytest.approx(0.0, abs=1e-12)


def test_deviation_terms_drop_out_without_deviation():
    rules = benchmark_rules()
    state = init_state(rules)
    state.rho = 0.4
    p = RuleParams.from_rules(rules)
    b = float(np.sum(state.v_phi / p.tau2))
    K = len(rules)

    # the coupling term with the deviation sums set to zero, written out directly
    def variance_only(rho):
        x = rho * rho
        c, e = 1 - x, 1 + (K - 1) * x
        return -0.5 * ((K - 1) * math.log(c) + math.log(e) + b / c - x * b / (c * e) - b)

    h = 1e-6
    fd = (variance_only(0.4 + h) - variance_only(0.4 - h)) / (2 * h)
    assert rho_gradient(state, rules) == pytest.approx(fd, rel=1e-7)


def _fd(state, rules, s, h=1e-6):
    up, down = state.copy(), state.copy()
    up.rho += h
    down.rho -= h
    return (elbo(up, rules, s) - elbo(down, rules, s)) / (2 * h)


def test_gradient_at_zero_matches_finite_difference():
    rules = benchmark_rules()[:3]
    state = init_state(rules)
    state.m_phi = state.m_phi + np.array([0.4, -0.2, 0.5])
    state.rho = 0.0
    s = stats([10, 20, 30], [1.0, 0.0, 2.0])
    assert rho_gradient(state, rules) == pytest.approx(_fd(state, rules, s), abs=1e-6)


@given(st.floats(0.05, 0.95), st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3),
       st.lists(st.floats(0.02, 0.5), min_size=3, max_size=3))
def test_gradient_matches_finite_difference(rho, dev, var):
    rules = benchmark_rules()[:3]
    state = init_state(rules)
    state.m_phi = state.m_phi + np.array(dev)
    state.v_phi = np.array(var)
    state.rho = rho
    # without data the objective stays O(1), so the difference quotient is not
    # swamped by rounding
    s = stats([0, 0, 0], [0.0, 0.0, 0.0])
    g, fd = rho_gradient(state, rules), _fd(state, rules, s)
    assert abs(g - fd) <= 1e-5 * abs(fd) + 1e-8


def test_rho_stays_put_at_zero_gradient():
    rules = benchmark_rules()
    state = init_state(rules)
    state.v_phi = RuleParams.from_rules(rules).tau2.copy()
    state.rho = 0.0
    rho, step = update_rho(state, rules)
    assert rho == 0.0 and step is None


def test_rho_step_is_projected_below_one():
    # five identical, sharply known deviations: the coupling term keeps rising towards 1
    rules = [rule(f"R{i}") for i in range(5)]
    state = init_state(rules)
    state.m_phi[:] = 3.0
    state.v_phi[:] = 1e-14
    state.rho = 0.9
    config = CaviConfig(step=100.0, curvature_step=False, adaptive_step=False)
    rho, step = update_rho(state, rules, config=config)
    assert rho == config.rho_max and step == 100.0


# full fits


def _conjugate_psi(r, n, t_bar):
    prior_var = r.prior_var + r.drift_var
    prec = 1.0 / prior_var + n / r.obs_noise
    return (r.prior_mean / prior_var + n * t_bar / r.obs_noise) / prec, 1.0 / prec


def test_single_rule_matches_conjugate_posterior():
    r = rule(mu=0.4, tau2=0.5, omega2=0.1, sigma2=0.3)
    s = stats([25], [1.1])
    config = CaviConfig(rho0=0.0, fix_rho=True, clamp_activation=1.0)
    state = fit(s, [r], config)
    m, v = psi_posterior(state, [r], s)
    em, ev = _conjugate_psi(r, 25, 1.1)
    assert m[0] == pytest.approx(em, abs=1e-12) and v[0] == pytest.approx(ev, abs=1e-12)
    assert state.iteration <= 2


def test_empty_signal_table_returns_prior():
    rules = benchmark_rules()
    state, post = run_cavi(SignalTable.empty(), rules)
    p = RuleParams.from_rules(rules)
    assert np.allclose(state.m_phi, p.mu) and np.allclose(state.v_phi, p.tau2)
    assert np.allclose(state.m_delta, 0.0) and np.allclose(state.v_delta, p.omega2)
    assert np.allclose(state.rho_a, p.pi)
    assert post.m_eta == 0.0 and state.converged


@given(problems)
def test_objective_never_decreases(problem):
    rules, s, rho0 = build(problem)
    state = fit(s, rules, CaviConfig(rho0=rho0, max_iter=300, trace_substeps=True))
    # the objective can sit near zero while its terms are O(1); judge rounding on that scale
    assert monotonicity_violations(state.elbo_trace, floor=1.0) == []
    sub = [state.elbo_trace[0]] + [v for *_, v in state.substeps]
    assert monotonicity_violations(sub, floor=1.0) == []


@given(problems)
def test_state_stays_in_bounds(problem):
    rules, s, rho0 = build(problem)
    state = fit(s, rules, CaviConfig(rho0=rho0, max_iter=300))
    assert 0.0 <= state.rho < 1.0
    assert np.all((state.rho_a > 0) & (state.rho_a < 1))
    assert np.all(state.v_phi > 0) and np.all(state.v_delta > 0)
    assert 0.0 < state.v_eta <= 1.0
    assert 0.0 < eta_variance(state, rules) <= 1.0 + 1e-12


@given(problems)
def test_posterior_variances_shrink_with_data(problem):
    rules, s, rho0 = build(problem)
    state = fit(s, rules, CaviConfig(rho0=rho0, max_iter=300))
    p = RuleParams.from_rules(rules)
    assert np.all(state.v_delta <= p.omega2 * (1 + 1e-12))


@given(problems)
def test_fit_is_deterministic(problem):
    rules, s, rho0 = build(problem)
    config = CaviConfig(rho0=rho0, max_iter=200)
    a, b = fit(s, rules, config), fit(s, rules, config)
    assert a.elbo_trace == b.elbo_trace
    assert np.array_equal(a.factor_vector(), b.factor_vector())


def test_restart_from_converged_state_is_stationary():
    rules = benchmark_rules()
    s = stats([300, 200, 100, 150, 250], [0.8, 0.2, 1.5, -0.3, 0.4], 0.3)
    state = fit(s, rules)
    again = fit(s, rules, state=state)
    assert again.iteration - state.iteration == 1
    assert np.max(np.abs(again.factor_vector() - state.factor_vector())) < 1e-9


def test_one_iteration_from_scratch_matches_iterate():
    rules = benchmark_rules()
    s = stats([30, 20, 10, 15, 25], [0.8, 0.2, 1.5, -0.3, 0.4], 0.3)
    config = CaviConfig(max_iter=1)
    state = init_state(rules, config)
    value = iterate(state, RuleParams.from_rules(rules), s, config)
    assert fit(s, rules, config).elbo_trace[-1] == value


def test_state_round_trips_through_dict():
    rules = benchmark_rules()
    s = stats([30, 20, 10, 15, 25], [0.8, 0.2, 1.5, -0.3, 0.4], 0.3)
    state = fit(s, rules)
    back = VariationalState.from_dict(state.to_dict())
    assert np.array_equal(back.factor_vector(), state.factor_vector())


def test_posterior_summary_fields():
    rules = benchmark_rules()
    s = stats([30, 20, 10, 15, 25], [0.8, 0.2, 1.5, -0.3, 0.4], 0.3)
    state = fit(s, rules)
    post = posterior_summary(state, rules, s)
    row = post.rules[0]
    assert row.m_psi == pytest.approx(row.m_phi + row.m_delta)
    assert row.sd_psi <= math.hypot(row.sd_phi, row.sd_delta) + 1e-12
    assert set(post.to_dict()) >= {"m_eta", "sd_eta", "rho", "rules", "elbo"}


def test_fixed_rho_is_respected():
    rules = benchmark_rules()
    s = stats([30, 20, 10, 15, 25], [0.8, 0.2, 1.5, -0.3, 0.4], 0.3)
    state = fit(s, rules, CaviConfig(rho0=0.3, fix_rho=True))
    assert state.rho == 0.3
    clamp = fit(s, rules, replace(CaviConfig(), clamp_activation=1.0))
    assert np.all(clamp.rho_a == 1.0)
