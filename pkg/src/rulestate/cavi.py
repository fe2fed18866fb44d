"""Coordinate ascent over the joint rule state.

Latent state: a global compliance-culture factor ``eta`` and, per rule,
an activation ``a_i``, a compliance level ``phi_i`` and a drift ``delta_i``.
Rules share ``eta`` through ``phi_i = mu_i + rho tau_i eta + noise``, so with
``eta`` integrated out the compliance levels are jointly Gaussian::

    phi ~ N(mu, D + rho^2 tau tau^T),   D = diag(tau_i^2 (1 - rho^2))

The variational family is ``prod_i q(a_i) q(phi_i) q(delta_i)`` with
Gaussian factors for the continuous parts and a Bernoulli for ``a_i``;
``rho`` is a point estimate. The objective (called the ELBO throughout) is::

    sum_i [ within_i + r_i A_i + (1 - r_i) B_i
            - KL(Bern(r_i) || Bern(pi_i)) - KL(q(delta_i) || N(0, omega_i^2)) ]
      + E_q log N(phi; mu, Sigma) + sum_i H(q(phi_i))

where

* ``A_i = E_q log N(t_bar_i; phi_i + delta_i, sigma_i^2 / n_i)`` is the
  expected log density of the rule mean when the rule is in force,
* ``B_i = log N(t_bar_i; 0, sigma_bg_i^2 / n_i)`` is the background density,
* ``within_i`` is the within-rule scatter term shared by both branches, so
  that with ``r_i = 1`` the data term equals the full-data Gaussian
  log-likelihood.

The exact update for ``q(phi_i)`` combines the data with the conditional
prior of ``phi_i`` given the other rules. That conditional is the effective
prior ``N(mu_i + rho tau_i m, tau_i^2 (1 - rho^2) + rho^2 tau_i^2 v)`` where
``(m, v)`` is the posterior of ``eta`` given every *other* rule's factor
mean. Rules are visited in order and each update is the exact maximiser in
its own block, so the trace is monotone. Only sufficient statistics
``(n_i, t_bar_i, sum_sq_i)`` are touched; one sweep costs ``O(K)``.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit, xlogy

from .errors import ConfigError, EmptyRuleSet, InnerLoopDivergence, NonFiniteState
from .rules import ObservationSummary, summarize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CaviConfig:
    tol: float = 1e-10
    param_tol: float = 1e-9
    max_iter: int = 2000
    inner_tol: float = 1e-10
    inner_max: int = 1000
    inner_solver: str = "direct"
    rho0: float = 0.1
    rho_eps: float = 1e-6
    step: float = 0.05
    shrink: float = 0.5
    max_backtracks: int = 30
    # let the starting step grow after a full-size step is accepted
    adaptive_step: bool = True
    max_step: float = 1e3
    # scale the first trial step by the local curvature of the rho term
    curvature_step: bool = True
    # after each sweep, solve all factor means jointly
    joint_means: bool = True
    # extra (variances, means, rho) rounds per iteration; all vectorised
    polish_rounds: int = 20
    fix_rho: bool = False
    clamp_activation: float = None
    trace_substeps: bool = False

    def __post_init__(self):
        for name in ("tol", "param_tol", "inner_tol", "step", "rho_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.shrink < 1:
            raise ConfigError("shrink must lie in (0, 1)")
        if self.max_iter < 1 or self.inner_max < 1 or self.max_backtracks < 0:
            raise ConfigError("iteration caps must be positive")
        if self.inner_solver not in ("direct", "alternate"):
            raise ConfigError("inner_solver must be 'direct' or 'alternate'")
        upper = 1.0 - self.rho_eps
        if self.fix_rho:
            if not 0.0 <= self.rho0 <= upper:
                raise ConfigError(f"fixed rho must lie in [0, {upper}]")
        elif not 0.0 < self.rho0 <= upper:
            raise ConfigError(f"rho0 must lie in (0, {upper}]; a zero start gives a zero "
                              "first gradient (use fix_rho=True to pin rho at 0)")
        if self.clamp_activation is not None and not 0.0 < self.clamp_activation <= 1.0:
            raise ConfigError("clamp_activation must lie in (0, 1]")

    @property
    def rho_max(self):
        return 1.0 - self.rho_eps


@dataclass(frozen=True)
class RuleParams:
    """Hyperparameters of a rule list as aligned arrays."""

    ids: tuple
    pi: np.ndarray
    mu: np.ndarray
    tau2: np.ndarray
    omega2: np.ndarray
    sigma2: np.ndarray
    sbg2: np.ndarray

    @classmethod
    def from_rules(cls, rules):
        if isinstance(rules, cls):
            return rules
        rules = list(rules)
        if not rules:
            raise EmptyRuleSet("at least one rule is required")

        def arr(name):
            return np.array([getattr(r, name) for r in rules], dtype=float)

        return cls(tuple(r.id for r in rules), arr("prior_activation"), arr("prior_mean"),
                   arr("prior_var"), arr("drift_var"), arr("obs_noise"), arr("background_var"))

    @property
    def tau(self):
        return np.sqrt(self.tau2)

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class Stats:
    """Sufficient statistics aligned with :class:`RuleParams`."""

    n: np.ndarray
    t_bar: np.ndarray  # 0.0 where n == 0; never read there
    sum_sq: np.ndarray

    @classmethod
    def from_summary(cls, summary, K=None):
        if isinstance(summary, cls):
            return summary
        if summary is None:
            z = np.zeros(K)
            return cls(z, z.copy(), z.copy())
        n = np.array([s.n for s in summary.rules], dtype=float)
        t_bar = np.array([s.t_bar if s.n else 0.0 for s in summary.rules], dtype=float)
        sum_sq = np.array([s.sum_sq for s in summary.rules], dtype=float)
        return cls(n, t_bar, sum_sq)


@dataclass
class VariationalState:
    rule_ids: tuple
    m_eta: float
    v_eta: float
    rho_a: np.ndarray
    m_phi: np.ndarray
    v_phi: np.ndarray
    m_delta: np.ndarray
    v_delta: np.ndarray
    rho: float
    elbo_trace: list = field(default_factory=list)
    substeps: list = field(default_factory=list)
    events: list = field(default_factory=list)
    iteration: int = 0
    converged: bool = False
    step: float = None

    def copy(self):
        return replace(self, rho_a=self.rho_a.copy(), m_phi=self.m_phi.copy(),
                       v_phi=self.v_phi.copy(), m_delta=self.m_delta.copy(),
                       v_delta=self.v_delta.copy(), elbo_trace=list(self.elbo_trace),
                       substeps=list(self.substeps), events=list(self.events))

    @property
    def K(self):
        return len(self.rule_ids)

    def factor_vector(self):
        """Every variational parameter as one flat array (for comparisons)."""
        return np.concatenate([[self.m_eta, self.v_eta, self.rho], self.rho_a, self.m_phi,
                               self.v_phi, self.m_delta, self.v_delta])

    def check_finite(self):
        if not np.all(np.isfinite(self.factor_vector())):
            raise NonFiniteState("non-finite value in variational state", dump=self.to_dict())

    def to_dict(self):
        return {
            "rule_ids": list(self.rule_ids),
            "m_eta": self.m_eta, "v_eta": self.v_eta, "rho": self.rho,
            "rho_a": self.rho_a.tolist(), "m_phi": self.m_phi.tolist(),
            "v_phi": self.v_phi.tolist(), "m_delta": self.m_delta.tolist(),
            "v_delta": self.v_delta.tolist(),
            "elbo_trace": list(self.elbo_trace), "iteration": self.iteration,
            "converged": self.converged, "step": self.step,
            "events": list(self.events),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["rule_ids"]), float(d["m_eta"]), float(d["v_eta"]),
                   np.array(d["rho_a"], float), np.array(d["m_phi"], float),
                   np.array(d["v_phi"], float), np.array(d["m_delta"], float),
                   np.array(d["v_delta"], float), float(d["rho"]),
                   elbo_trace=list(d.get("elbo_trace", [])), events=list(d.get("events", [])),
                   iteration=int(d.get("iteration", 0)), converged=bool(d.get("converged")),
                   step=d.get("step"))


@dataclass(frozen=True)
class EffectivePrior:
    mu_tilde: float
    psi_tilde_sq: float


def init_state(rules, config=None):
    """Start every factor at its prior; ``rho`` at ``rho0``."""
    config = config or CaviConfig()
    p = RuleParams.from_rules(rules)
    rho_a = p.pi.copy()
    if config.clamp_activation is not None:
        rho_a[:] = config.clamp_activation
    return VariationalState(p.ids, 0.0, 1.0, rho_a, p.mu.copy(), p.tau2.copy(),
                            np.zeros(len(p)), p.omega2.copy(), float(config.rho0),
                            step=config.step)


# ---------------------------------------------------------------------------
# building blocks


def _effective(p, m_eta, v_eta, rho):
    mu_t = p.mu + rho * p.tau * m_eta
    psi2 = p.tau2 * (1.0 - rho * rho) + (rho * rho) * p.tau2 * v_eta
    return mu_t, psi2


def effective_prior(rule, m_eta, v_eta, rho):
    """Prior on ``phi_i`` once ``eta ~ N(m_eta, v_eta)`` is integrated out."""
    tau2 = rule.prior_var
    mu_t = rule.prior_mean + rho * math.sqrt(tau2) * m_eta
    psi2 = tau2 * (1.0 - rho * rho) + rho * rho * tau2 * v_eta
    return EffectivePrior(mu_t, psi2)


def _gauss_kl(m, v, m0, v0):
    """KL(N(m, v) || N(m0, v0)), elementwise."""
    return 0.5 * (np.log(v0 / v) + (v + (m - m0) ** 2) / v0 - 1.0)


def _bern_kl(r, pi):
    return xlogy(r, r / pi) + xlogy(1.0 - r, (1.0 - r) / (1.0 - pi))


def _data_terms(p, s, m_psi, v_psi):
    """``(within, A, B)`` per rule; zeros where a rule has no observations."""
    n = s.n
    has = n > 0
    nn = np.where(has, n, 1.0)
    ss = s.sum_sq - nn * s.t_bar ** 2
    within = np.where(has, -0.5 * (nn - 1.0) * (LOG_2PI + np.log(p.sigma2))
                      - 0.5 * np.log(nn) - ss / (2.0 * p.sigma2), 0.0)
    a1 = np.where(has, -0.5 * (LOG_2PI + np.log(p.sigma2 / nn))
                  - nn * ((s.t_bar - m_psi) ** 2 + v_psi) / (2.0 * p.sigma2), 0.0)
    a0 = np.where(has, -0.5 * (LOG_2PI + np.log(p.sbg2 / nn))
                  - nn * s.t_bar ** 2 / (2.0 * p.sbg2), 0.0)
    return within, a1, a0


def _standardised(p, m_phi, v_phi):
    """``(m_phi - mu) / tau`` and ``v_phi / tau^2``."""
    return (m_phi - p.mu) / p.tau, v_phi / p.tau2


def _coupling(rho, K, a_sum, a_sq, b_sum):
    """Part of the joint prior term that depends on ``rho``.

    ``a_sq + b_sum`` is ``sum_i S_i / tau_i^2`` with
    ``S_i = v_phi_i + (m_phi_i - mu_i)^2``.
    """
    x = rho * rho
    c = 1.0 - x
    e = 1.0 + (K - 1) * x
    logdet = (K - 1) * math.log(c) + math.log(e)
    quad = (a_sq + b_sum) / c - x * (a_sum * a_sum + b_sum) / (c * e)
    return -0.5 * (logdet + quad - (a_sq + b_sum))


def _coupling_gradient(rho, K, a_sum, a_sq, b_sum):
    x = rho * rho
    c = 1.0 - x
    e = 1.0 + (K - 1) * x
    d_dx = (0.5 * (K - 1) / c - 0.5 * (K - 1) / e - 0.5 * (a_sq + b_sum) / (c * c)
            + 0.5 * (a_sum * a_sum + b_sum) * (e - x * c * (K - 1)) / (c * e) ** 2)
    return 2.0 * rho * d_dx


def _coupling_curvature(rho, K, moments, rel=1e-6):
    h = rel * max(min(rho, 1.0 - rho), 1e-12)
    lo, hi = max(rho - h, 0.0), rho + h
    return (_coupling_gradient(hi, K, *moments) - _coupling_gradient(lo, K, *moments)) / (hi - lo)


def _moments(p, state):
    a, b = _standardised(p, state.m_phi, state.v_phi)
    return math.fsum(a.tolist()), math.fsum((a * a).tolist()), math.fsum(b.tolist())


def elbo_terms(state, rules, summary, clamped=False):
    """Per-rule objective contributions and the term that couples rules.

    The per-rule part holds everything that would remain with ``rho = 0``
    (where it reduces to independent Gaussian KLs against ``N(mu_i, tau_i^2)``).
    """
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    within, a1, a0 = _data_terms(p, s, state.m_phi + state.m_delta,
                                 state.v_phi + state.v_delta)
    r = state.rho_a
    per_rule = (within + r * a1 + (1.0 - r) * a0
                - _gauss_kl(state.m_phi, state.v_phi, p.mu, p.tau2)
                - _gauss_kl(state.m_delta, state.v_delta, 0.0, p.omega2))
    if not clamped:
        per_rule = per_rule - _bern_kl(r, p.pi)
    coupling = _coupling(state.rho, len(p), *_moments(p, state))
    return coupling, per_rule


def elbo(state, rules, summary, clamped=False):
    """Objective value. Summed with ``fsum`` in a fixed order, so identical
    states give identical bits."""
    coupling, per_rule = elbo_terms(state, rules, summary, clamped)
    return math.fsum([coupling, *per_rule.tolist()])


# ---------------------------------------------------------------------------
# coordinate updates


def _eta_given(rho, count, a_sum):
    if rho == 0.0 or count == 0:
        return 1.0, 0.0
    c = 1.0 - rho * rho
    v = 1.0 / (1.0 + count * rho * rho / c)
    return v, v * rho * a_sum / c


def update_eta(state, rules):
    """Posterior of ``eta`` given the current factor means; ``(v_eta, m_eta)``.

    ``v_eta = 1 / (1 + rho^2 / (1 - rho^2) * K)`` and
    ``m_eta = v_eta * sum_i rho (m_phi_i - mu_i) / (tau_i (1 - rho^2))``.
    With ``rho = 0`` the factor decouples and stays at N(0, 1).
    """
    p = RuleParams.from_rules(rules)
    a, _ = _standardised(p, state.m_phi, state.v_phi)
    return _eta_given(state.rho, len(p), math.fsum(a.tolist()))


def eta_variance(state, rules):
    """Marginal posterior variance of ``eta``: the conditional variance plus
    the spread induced by the uncertainty in every ``phi_i``."""
    p = RuleParams.from_rules(rules)
    rho = state.rho
    v, _ = _eta_given(rho, len(p), 0.0)
    if rho == 0.0:
        return v
    _, b = _standardised(p, state.m_phi, state.v_phi)
    w = v * rho / (1.0 - rho * rho)
    return v + w * w * math.fsum(b.tolist())


def leave_one_out_eta(state, rules, rule_index):
    """``(v, m)`` of ``eta`` given every rule except ``rule_index``."""
    p = RuleParams.from_rules(rules)
    a, _ = _standardised(p, state.m_phi, state.v_phi)
    rest = math.fsum(np.delete(a, rule_index).tolist())
    return _eta_given(state.rho, len(p) - 1, rest)


def rule_prior(state, rules, rule_index):
    """Effective prior actually used by the update of ``phi_i``."""
    p = RuleParams.from_rules(rules)
    v, m = leave_one_out_eta(state, p, rule_index)
    mu_t, psi2 = _effective(p, m, v, state.rho)
    return EffectivePrior(float(mu_t[rule_index]), float(psi2[rule_index]))


def _gain(state, s, p, i):
    return state.rho_a[i] * s.n[i] / p.sigma2[i]


def update_phi(rule_index, state, rules, summary):
    """Single coordinate step for ``q(phi_i)`` given the current ``q(delta_i)``."""
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    i = rule_index
    prior = rule_prior(state, p, i)
    c = _gain(state, s, p, i)
    v = 1.0 / (1.0 / prior.psi_tilde_sq + c)
    m = v * (prior.mu_tilde / prior.psi_tilde_sq + c * (s.t_bar[i] - state.m_delta[i]))
    return v, m


def update_delta(rule_index, state, rules, summary):
    """Single coordinate step for ``q(delta_i)`` given the current ``q(phi_i)``."""
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    i = rule_index
    c = _gain(state, s, p, i)
    v = 1.0 / (1.0 / p.omega2[i] + c)
    m = v * c * (s.t_bar[i] - state.m_phi[i])
    return v, m


def solve_phi_delta(mu_t, psi2, omega2, c, t_bar, m_phi=0.0, m_delta=0.0,
                    solver="direct", tol=1e-10, max_iter=1000):
    """Jointly optimal ``(m_phi, v_phi, m_delta, v_delta)`` for one rule.

    The two means solve a 2x2 linear system; ``solver="alternate"`` reaches
    the same fixed point by alternating the single-coordinate updates,
    starting from ``(m_phi, m_delta)``.
    """
    v_phi = 1.0 / (1.0 / psi2 + c)
    v_delta = 1.0 / (1.0 / omega2 + c)
    if solver == "direct":
        a11 = 1.0 / psi2 + c
        a22 = 1.0 / omega2 + c
        b1 = mu_t / psi2 + c * t_bar
        b2 = c * t_bar
        det = a11 * a22 - c * c
        return (a22 * b1 - c * b2) / det, v_phi, (a11 * b2 - c * b1) / det, v_delta
    for _ in range(max_iter):
        new_phi = v_phi * (mu_t / psi2 + c * (t_bar - m_delta))
        new_delta = v_delta * c * (t_bar - new_phi)
        change = max(abs(new_phi - m_phi), abs(new_delta - m_delta))
        m_phi, m_delta = new_phi, new_delta
        if change < tol:
            return m_phi, v_phi, m_delta, v_delta
    raise InnerLoopDivergence(f"phi/delta alternation exceeded {max_iter} steps")


def activation_probability(prior, log_l1, log_l0):
    """Posterior odds update ``sigmoid(logit(prior) + log_l1 - log_l0)``."""
    return float(expit(logit(prior) + log_l1 - log_l0))


def activation_log_likelihoods(state, rules, summary):
    """``(log L1, log L0)`` per rule: the expected log density of the rule
    mean under ``a_i = 1`` and its background density under ``a_i = 0``."""
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    _, a1, a0 = _data_terms(p, s, state.m_phi + state.m_delta, state.v_phi + state.v_delta)
    return a1, a0


def _activation_one(p, s, state, i):
    n, sig2, sbg2, tb = s.n[i], p.sigma2[i], p.sbg2[i], s.t_bar[i]
    m = state.m_phi[i] + state.m_delta[i]
    v = state.v_phi[i] + state.v_delta[i]
    a1 = -0.5 * (LOG_2PI + math.log(sig2 / n)) - n * ((tb - m) ** 2 + v) / (2.0 * sig2)
    a0 = -0.5 * (LOG_2PI + math.log(sbg2 / n)) - n * tb * tb / (2.0 * sbg2)
    r = float(expit(logit(p.pi[i]) + a1 - a0))
    return min(max(r, 1e-300), float(np.nextafter(1.0, 0.0)))


def update_activation(state, rules, summary):
    """New ``q(a_i)`` probabilities. Rules without observations keep ``pi_i``."""
    p = RuleParams.from_rules(rules)
    a1, a0 = activation_log_likelihoods(state, p, summary)
    r = expit(logit(p.pi) + a1 - a0)
    # keep strictly inside (0, 1) so the Bernoulli KL stays finite
    return np.clip(r, 1e-300, np.nextafter(1.0, 0.0))


def rho_gradient(state, rules):
    """Closed-form derivative of the objective in ``rho``.

    Only the joint prior term depends on ``rho``. It needs three sums over
    rules: ``sum S_i / tau_i^2`` (split into ``sum a_i^2 + sum b_i``),
    ``sum a_i`` and ``sum b_i``, with ``a_i = (m_phi_i - mu_i) / tau_i`` and
    ``b_i = v_phi_i / tau_i^2``. The derivative vanishes at ``rho = 0``
    and for a single rule.
    """
    p = RuleParams.from_rules(rules)
    return _coupling_gradient(state.rho, len(p), *_moments(p, state))


def update_rho(state, rules, summary=None, config=None, clamped=None):
    """Projected gradient step on ``rho`` with backtracking.

    Returns ``(rho, accepted_step)``; ``accepted_step`` is ``None`` when
    ``rho`` did not move. A step is only taken if the objective does not go
    down. Only the coupling term depends on ``rho``, so the line search
    compares that term alone.
    """
    config = config or CaviConfig()
    p = RuleParams.from_rules(rules)
    K = len(p)
    moments = _moments(p, state)
    g = _coupling_gradient(state.rho, K, *moments)
    if g == 0.0 or not math.isfinite(g):
        return state.rho, None
    base = _coupling(state.rho, K, *moments)
    alpha = state.step if (config.adaptive_step and state.step) else config.step
    if config.curvature_step:
        # near rho = 1 the curvature explodes and a fixed step is useless;
        # start the search at the Newton step when the term is locally concave
        h = _coupling_curvature(state.rho, K, moments)
        if h < 0.0:
            alpha = -1.0 / h
    for _ in range(config.max_backtracks + 1):
        proposal = min(max(state.rho + alpha * g, 0.0), config.rho_max)
        if proposal == state.rho:
            return state.rho, None
        if _coupling(proposal, K, *moments) >= base:
            return proposal, alpha
        alpha *= config.shrink
    state.events.append({"iteration": state.iteration, "event": "rho_backtrack_exhausted",
                         "gradient": g})
    log.warning("rho line search exhausted at iteration %d; rho left at %g",
                state.iteration, state.rho)
    return state.rho, None


# ---------------------------------------------------------------------------
# driver


def _record(state, name, rules, summary, clamped, config):
    if config.trace_substeps:
        state.substeps.append((state.iteration, name, elbo(state, rules, summary, clamped)))


def sweep_rules(state, p, s, config, index=None):
    """Per-rule block (effective prior, phi/delta, activation) for every
    rule in order, or only for ``index``.

    The ``eta`` sum is kept current after each rule, so rule ``i + 1``
    already sees the new factor of rule ``i``.
    """
    a, _ = _standardised(p, state.m_phi, state.v_phi)
    a_sum = math.fsum(a.tolist())
    K = len(p)
    order = range(K) if index is None else [int(i) for i in np.atleast_1d(index)]
    free = config.clamp_activation is None
    for i in order:
        v, m = _eta_given(state.rho, K - 1, a_sum - a[i])
        mu_t = p.mu[i] + state.rho * p.tau[i] * m
        psi2 = p.tau2[i] * (1.0 - state.rho ** 2) + state.rho ** 2 * p.tau2[i] * v
        c = _gain(state, s, p, i)
        out = solve_phi_delta(mu_t, psi2, p.omega2[i], c, s.t_bar[i],
                              state.m_phi[i], state.m_delta[i],
                              config.inner_solver, config.inner_tol, config.inner_max)
        state.m_phi[i], state.v_phi[i], state.m_delta[i], state.v_delta[i] = out
        if free and s.n[i] > 0:
            state.rho_a[i] = _activation_one(p, s, state, i)
        new_a = (state.m_phi[i] - p.mu[i]) / p.tau[i]
        a_sum += new_a - a[i]
        a[i] = new_a


def solve_means(state, p, s):
    """Exact joint maximiser of every ``(m_phi_i, m_delta_i)`` at once.

    With variances, activations and ``rho`` fixed the objective is a
    quadratic in the means whose rules interact only through the sum of the
    standardised deviations ``z_i = (m_phi_i - mu_i) / tau_i``. Profiling out
    each drift and solving for that sum gives the optimum in ``O(K)``. Per-rule
    sweeps reach the same point, but slowly when ``rho`` is near 1.
    """
    rho = state.rho
    K = len(p)
    c = state.rho_a * s.n / p.sigma2
    inv_w = 1.0 / p.omega2
    h = c * inv_w / (c + inv_w)
    H = h * p.tau2
    r = (s.t_bar - p.mu) / p.tau
    x = rho * rho
    keep = 1.0 - x
    spread = 1.0 + (K - 1) * x
    kappa_keep = x / spread  # kappa * (1 - rho^2)
    denom = keep * H + 1.0
    alpha = keep * H * r / denom
    # 1 - sum(beta), arranged so that no cancellation occurs near rho = 1
    slack = keep / spread + kappa_keep * math.fsum((keep * H / denom).tolist())
    total = math.fsum(alpha.tolist()) / slack
    z = alpha + kappa_keep * total / denom
    state.m_phi = p.mu + p.tau * z
    state.m_delta = c * (s.t_bar - state.m_phi) / (c + inv_w)


def _rho_step(state, p, s, config, clamped):
    rho, accepted = update_rho(state, p, s, config, clamped)
    if accepted is not None:
        state.rho = rho
        if config.adaptive_step:
            full = accepted >= (state.step or config.step)
            state.step = min(accepted * (2.0 if full else 1.0), config.max_step)


def solve_variances(state, p, s):
    """Exact ``v_phi`` and ``v_delta`` for every rule.

    Both depend only on ``rho`` and the activations, never on the means;
    ``1 / v_phi - r n / sigma^2`` is the conditional prior precision of
    ``phi_i`` given the other rules.
    """
    rho = state.rho
    K = len(p)
    c = state.rho_a * s.n / p.sigma2
    v_loo, _ = _eta_given(rho, K - 1, 0.0)
    psi2 = p.tau2 * (1.0 - rho * rho) + rho * rho * p.tau2 * v_loo
    state.v_phi = 1.0 / (1.0 / psi2 + c)
    state.v_delta = 1.0 / (1.0 / p.omega2 + c)


def iterate(state, p, s, config):
    """One outer iteration, in the order eta, rules, rho. Returns the ELBO."""
    clamped = config.clamp_activation is not None
    state.v_eta, state.m_eta = update_eta(state, p)
    _record(state, "eta", p, s, clamped, config)
    sweep_rules(state, p, s, config)
    _record(state, "rules", p, s, clamped, config)
    rounds = max(config.polish_rounds, 1) if config.joint_means else 1
    for k in range(rounds):
        if config.joint_means:
            if k:
                solve_variances(state, p, s)
            solve_means(state, p, s)
            _record(state, "means", p, s, clamped, config)
        if config.fix_rho:
            break
        before = state.rho
        _rho_step(state, p, s, config, clamped)
        _record(state, "rho", p, s, clamped, config)
        if abs(state.rho - before) <= config.param_tol:
            break
    if config.joint_means and not config.fix_rho:
        # leave the means optimal for the rho just accepted
        solve_variances(state, p, s)
        solve_means(state, p, s)
        _record(state, "means", p, s, clamped, config)
    state.v_eta, state.m_eta = update_eta(state, p)
    state.check_finite()
    return elbo(state, p, s, clamped)


def fit(summary, rules, config=None, state=None):
    """Run coordinate ascent from ``state`` (or the prior) to convergence."""
    config = config or CaviConfig()
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    clamped = config.clamp_activation is not None
    if state is None:
        state = init_state(p, config)
    else:
        state = state.copy()
        if config.fix_rho:
            state.rho = config.rho0
        if clamped:
            state.rho_a[:] = config.clamp_activation
    if state.step is None:
        state.step = config.step
    state.converged = False
    prev = elbo(state, p, s, clamped)
    if not state.elbo_trace:
        state.elbo_trace.append(prev)
    for _ in range(config.max_iter):
        before = state.factor_vector()
        state.iteration += 1
        cur = iterate(state, p, s, config)
        state.elbo_trace.append(cur)
        moved = np.max(np.abs(state.factor_vector() - before))
        if abs(cur - prev) < config.tol * max(1.0, abs(cur)) and moved < config.param_tol:
            state.converged = True
            break
        prev = cur
    else:
        log.warning("coordinate ascent hit max_iter=%d without converging", config.max_iter)
    return state


@dataclass
class RulePosterior:
    rule_id: str
    activation: float
    m_phi: float
    sd_phi: float
    m_delta: float
    sd_delta: float
    m_psi: float
    sd_psi: float


@dataclass
class Posterior:
    rules: list
    m_eta: float
    sd_eta: float
    rho: float
    converged: bool
    iterations: int
    elbo: float

    def to_dict(self):
        return {
            "m_eta": self.m_eta, "sd_eta": self.sd_eta, "rho": self.rho,
            "converged": self.converged, "iterations": self.iterations, "elbo": self.elbo,
            "rules": [vars(r) for r in self.rules],
        }


def psi_posterior(state, rules, summary):
    """Mean and variance of ``psi_i = phi_i + delta_i`` per rule.

    The factorised ``q`` gets the mean right but drops the posterior
    correlation between ``phi_i`` and ``delta_i``; the variance is recovered
    from the joint precision of the pair (diagonal ``1/v_phi``, ``1/v_delta``,
    off-diagonal ``r_i n_i / sigma_i^2``).
    """
    p = RuleParams.from_rules(rules)
    s = Stats.from_summary(summary, len(p))
    c = state.rho_a * s.n / p.sigma2
    l11, l22 = 1.0 / state.v_phi, 1.0 / state.v_delta
    var = (l11 + l22 - 2.0 * c) / (l11 * l22 - c * c)
    return state.m_phi + state.m_delta, var


def posterior_summary(state, rules, summary):
    p = RuleParams.from_rules(rules)
    m_psi, v_psi = psi_posterior(state, p, summary)
    rows = [RulePosterior(rid, float(state.rho_a[i]), float(state.m_phi[i]),
                          math.sqrt(state.v_phi[i]), float(state.m_delta[i]),
                          math.sqrt(state.v_delta[i]), float(m_psi[i]), math.sqrt(v_psi[i]))
            for i, rid in enumerate(p.ids)]
    return Posterior(rows, state.m_eta, math.sqrt(eta_variance(state, p)), state.rho, state.converged,
                     state.iteration, state.elbo_trace[-1] if state.elbo_trace else None)


def run_cavi(signals, rules, config=None, threads=1):
    """Summarise ``signals`` and fit; returns ``(state, posterior)``."""
    summary = signals if isinstance(signals, ObservationSummary) else \
        summarize(signals, rules, threads=threads)
    state = fit(summary, rules, config)
    return state, posterior_summary(state, rules, summary)
