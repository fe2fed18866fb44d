"""Compliance trajectories across regulatory periods.

Each rule's compliance level follows a Gaussian random walk,
``phi^(t) = phi^(t-1) + N(0, q^2)``, observed through the period mean
``t_bar^(t) ~ N(phi^(t) + delta^(t), sigma^2 / n^(t))``. The period drift
``delta^(t)`` has an independent ``N(0, omega^2)`` prior each period. Its
posterior mean, taken from the innovation, is subtracted from the
observation, and the compliance level is then updated with the exact Kalman
gain ``v / (v + sigma^2 / n)``. The drift enters as a plug-in estimate: its
variance is reported but not carried into the level's variance.

A second filter runs per entity: its deviation from the population is a
persistent offset ``u ~ N(0, gamma^2)``, so each entity gets its own
mean and variance for every period.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPeriodSequence, InsufficientData, NoObservations
from .rules import summarize

DEFAULT_PROCESS_VAR = 0.01
GAMMA_FLOOR = 1e-8


def predict(m, v, q_sq):
    """Random-walk step: mean kept, variance grows by ``q_sq``."""
    return m, v + q_sq


def update(m, v, t_bar, n, sigma_sq):
    """Condition on a period mean; returns ``(m, v, gain)``. ``n = 0`` leaves the state as is."""
    if n <= 0 or t_bar is None:
        return m, v, 0.0
    gain = v / (v + sigma_sq / n)
    return m + gain * (t_bar - m), (1.0 - gain) * v, gain


def drift_estimate(m_pred, v_pred, t_bar, n, sigma_sq, omega_sq):
    """Posterior mean and variance of the period drift given the innovation."""
    if n <= 0 or t_bar is None:
        return 0.0, omega_sq
    total = omega_sq + v_pred + sigma_sq / n
    return omega_sq * (t_bar - m_pred) / total, omega_sq - omega_sq * omega_sq / total


@dataclass
class FilterState:
    """Predicted and filtered moments of one rule, period by period."""

    rule_id: str
    periods: list
    q_sq: float
    m_pred: np.ndarray
    v_pred: np.ndarray
    m_filt: np.ndarray
    v_filt: np.ndarray
    gain: np.ndarray
    m_drift: np.ndarray
    v_drift: np.ndarray
    n: np.ndarray
    t_bar: np.ndarray  # NaN where a period has no observation
    sigma_sq: np.ndarray

    def __len__(self):
        return len(self.periods)

    @property
    def observations(self):
        """The values the compliance filter actually conditioned on."""
        return self.t_bar - self.m_drift

    def to_dict(self):
        def clean(a):
            return [None if not math.isfinite(x) else float(x) for x in a]

        return {"rule_id": self.rule_id, "periods": list(self.periods), "q_sq": self.q_sq,
                "m_pred": clean(self.m_pred), "v_pred": clean(self.v_pred),
                "m_filt": clean(self.m_filt), "v_filt": clean(self.v_filt),
                "gain": clean(self.gain), "m_drift": clean(self.m_drift),
                "v_drift": clean(self.v_drift), "n": [int(x) for x in self.n],
                "t_bar": clean(self.t_bar)}


def _as_period(entry):
    """``(n, t_bar)`` from a RuleSummary or a pair."""
    if hasattr(entry, "n"):
        return int(entry.n), entry.t_bar
    n, t_bar = entry
    return int(n), t_bar


def filter_trajectory(summaries, rule, q_sq=DEFAULT_PROCESS_VAR, init=None, periods=None,
                      rules_by_period=None, drift=True):
    """Predict/update sweep over the period summaries of one rule.

    ``summaries`` holds one ``RuleSummary`` (or ``(n, t_bar)``) per period.
    ``rules_by_period`` optionally gives the rule in force each period, so an
    amendment takes effect before that period's predict step. ``init``
    defaults to the static prior ``(mu, tau^2)``. With ``drift=False`` the
    period drift is fixed at zero.
    """
    summaries = list(summaries)
    T = len(summaries)
    if T == 0:
        raise EmptyPeriodSequence(f"rule {rule.id!r}: no periods to filter")
    if q_sq < 0:
        raise ValueError("q_sq must be non-negative")
    periods = list(periods) if periods is not None else [str(t + 1) for t in range(T)]
    in_force = list(rules_by_period) if rules_by_period is not None else [rule] * T
    m, v = init if init is not None else (rule.prior_mean, rule.prior_var)
    out = {k: np.zeros(T) for k in ("m_pred", "v_pred", "m_filt", "v_filt", "gain",
                                    "m_drift", "v_drift", "n", "t_bar", "sigma_sq")}
    for t, entry in enumerate(summaries):
        r = in_force[t]
        n, t_bar = _as_period(entry)
        m, v = predict(m, v, q_sq)
        out["m_pred"][t], out["v_pred"][t] = m, v
        if drift:
            md, vd = drift_estimate(m, v, t_bar, n, r.obs_noise, r.drift_var)
        else:
            md, vd = 0.0, 0.0
        y = None if (n <= 0 or t_bar is None) else t_bar - md
        m, v, k = update(m, v, y, n, r.obs_noise)
        out["m_filt"][t], out["v_filt"][t], out["gain"][t] = m, v, k
        out["m_drift"][t], out["v_drift"][t] = md, vd
        out["n"][t] = n
        out["t_bar"][t] = np.nan if y is None else t_bar
        out["sigma_sq"][t] = r.obs_noise
    return FilterState(rule.id, periods, q_sq, **out)


def run_periods(period_tables, rules, entities=None, q_sq=DEFAULT_PROCESS_VAR,
                updates=None, drift=True):
    """Filter every rule over a sequence of ``(label, SignalTable)`` periods.

    ``updates`` maps a period label to the regulatory updates that take
    effect at the start of that period. Applicability is recomputed for each
    period's table when ``entities`` is given. Returns
    ``({rule_id: FilterState}, [rules in force per period])``.
    """
    period_tables = list(period_tables)
    if not period_tables:
        raise EmptyPeriodSequence("no periods given")
    updates = updates or {}
    current = list(rules)
    in_force, per_rule = [], {r.id: [] for r in rules}
    for label, table in period_tables:
        for u in updates.get(label, []):
            current = u.apply_to(current)
        in_force.append(list(current))
        if entities is not None:
            table.assign_applicability(entities, current)
        summary = summarize(table, current)
        for s in summary.rules:
            per_rule[s.rule_id].append(s)
    labels = [label for label, _ in period_tables]
    q = q_sq if isinstance(q_sq, dict) else {r.id: q_sq for r in rules}
    states = {}
    for i, r in enumerate(rules):
        states[r.id] = filter_trajectory(per_rule[r.id], r, q[r.id], periods=labels,
                                         rules_by_period=[p[i] for p in in_force], drift=drift)
    return states, in_force


# ---------------------------------------------------------------------------
# entity level


@dataclass
class EntityTrajectory:
    entity_id: str
    rule_id: str
    periods: list
    gamma_sq: float
    mean: np.ndarray
    var: np.ndarray
    offset_mean: np.ndarray
    offset_var: np.ndarray
    observed: np.ndarray = field(default=None)

    @property
    def sd(self):
        return np.sqrt(self.var)

    def to_dict(self):
        return {"entity_id": self.entity_id, "rule_id": self.rule_id,
                "periods": list(self.periods), "gamma_sq": self.gamma_sq,
                "mean": self.mean.tolist(), "sd": self.sd.tolist()}


def entity_filter(observations, population, gamma_sq, sigma_sq=None, entity_id=""):
    """Per-period compliance of one entity, ``c^(t) = pop^(t) + delta^(t) + u``.

    ``observations`` holds one transformed signal per period of
    ``population`` (``None`` or NaN where missing). The population moments
    are taken as the prior for each period; the offset ``u`` starts at
    ``N(0, gamma_sq)`` and is refined by every observation.
    """
    if not gamma_sq > 0:
        raise ValueError("gamma_sq must be positive")
    obs = np.array([np.nan if o is None else float(o) for o in observations], dtype=float)
    T = len(population)
    if len(obs) != T:
        raise ValueError(f"expected {T} observations, one per period")
    if not np.any(np.isfinite(obs)):
        raise NoObservations(f"entity {entity_id!r} has no observation for rule "
                             f"{population.rule_id!r}")
    noise = population.sigma_sq if sigma_sq is None else np.full(T, float(sigma_sq))
    m_u, v_u = 0.0, float(gamma_sq)
    mean, var = np.zeros(T), np.zeros(T)
    u_mean, u_var = np.zeros(T), np.zeros(T)
    for t in range(T):
        prior_m = population.m_filt[t] + population.m_drift[t] + m_u
        prior_v = population.v_filt[t] + v_u
        if np.isfinite(obs[t]):
            s = prior_v + noise[t]
            innov = obs[t] - prior_m
            mean[t] = prior_m + prior_v / s * innov
            var[t] = prior_v - prior_v * prior_v / s
            m_u, v_u = m_u + v_u / s * innov, v_u - v_u * v_u / s
        else:
            mean[t], var[t] = prior_m, prior_v
        u_mean[t], u_var[t] = m_u, v_u
    return EntityTrajectory(entity_id, population.rule_id, list(population.periods),
                            float(gamma_sq), mean, var, u_mean, u_var, np.isfinite(obs))


def estimate_gamma_sq(residuals, floor=GAMMA_FLOOR):
    """Method-of-moments estimate of the between-entity variance.

    ``residuals`` is an ``(entities, periods)`` array (NaN where missing) or a
    mapping of entity to per-period residuals. Uses entities with at least
    two periods: the variance of their period averages, less the average
    within-entity variance divided by the number of periods.
    """
    if isinstance(residuals, dict):
        rows = [np.asarray(v, dtype=float) for v in residuals.values()]
    else:
        rows = list(np.atleast_2d(np.asarray(residuals, dtype=float)))
    rows = [r[np.isfinite(r)] for r in rows]
    rows = [r for r in rows if len(r) >= 2]
    if len(rows) < 2:
        raise InsufficientData("need at least two entities with two or more periods each")
    means = np.array([r.mean() for r in rows])
    within = np.array([r.var(ddof=1) / len(r) for r in rows])
    est = means.var(ddof=1) - within.mean()
    return float(max(est, floor))
