"""scikit-learn style front end.

``fit`` takes a :class:`~rulestate.rules.SignalTable` (the signals play the
role of ``X``; there are no labels), ``transform`` produces audit scores and
``predict`` flags entities.
"""

import json
from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adaptability import apply_update
from .cavi import CaviConfig, VariationalState, elbo, fit, posterior_summary
from .errors import ConfigError, ValidationError
from .rules import SignalTable, load_rules, rules_hash, summarize
from .scoring import DEFAULT_THRESHOLD, score_entities

_CONFIG_FIELDS = {f.name for f in fields(CaviConfig)}

STATE_FORMAT = "rulestate-state"
STATE_VERSION = 1


def state_document(state, rules, threshold=DEFAULT_THRESHOLD):
    """Versioned, full-precision record of a fitted state plus the rules digest."""
    return {"format": STATE_FORMAT, "version": STATE_VERSION,
            "rules_hash": rules_hash(rules), "threshold": threshold,
            "state": state.to_dict()}


def save_state(path, state, rules, threshold=DEFAULT_THRESHOLD):
    with open(path, "w") as fh:
        json.dump(state_document(state, rules, threshold), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_state(path, rules):
    """``(state, threshold)`` from a saved document; ``rules`` must match its digest."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(exc.msg, source=str(path), line=exc.lineno) from None
    if data.get("format") != STATE_FORMAT or data.get("version") != STATE_VERSION:
        raise ValidationError(f"not a version {STATE_VERSION} state document",
                              path="version", source=str(path))
    if data.get("rules_hash") != rules_hash(rules):
        raise ValidationError("saved state was fitted on different rules",
                              path="rules_hash", source=str(path))
    state = VariationalState.from_dict(data["state"])
    if tuple(state.rule_ids) != tuple(r.id for r in rules):
        raise ValidationError("rule ids differ from the saved state", path="state.rule_ids",
                              source=str(path))
    return state, float(data.get("threshold", DEFAULT_THRESHOLD))


class RuleStateInference(BaseEstimator):
    """Joint posterior over rule activation, compliance level and drift.

    Parameters
    ----------
    rules : list of RuleSpec, or a rule document (TOML text or path)
    threshold : float
        Global flagging threshold on the per-entity maximum score.
    tol, max_iter, rho0, fix_rho, clamp_activation, inner_solver
        Passed to :class:`~rulestate.cavi.CaviConfig`.
    threads : int
        Workers for building the sufficient statistics.
    """

    def __init__(self, rules=None, threshold=DEFAULT_THRESHOLD, tol=1e-10, max_iter=2000,
                 rho0=0.1, fix_rho=False, clamp_activation=None, inner_solver="direct",
                 threads=1):
        self.rules = rules
        self.threshold = threshold
        self.tol = tol
        self.max_iter = max_iter
        self.rho0 = rho0
        self.fix_rho = fix_rho
        self.clamp_activation = clamp_activation
        self.inner_solver = inner_solver
        self.threads = threads

    def _config(self):
        params = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        return CaviConfig(**params)

    def _rules(self):
        if self.rules is None:
            raise ConfigError("no rules given")
        if isinstance(self.rules, (str, bytes)) or hasattr(self.rules, "read_text"):
            return load_rules(self.rules)
        return list(self.rules)

    @staticmethod
    def _check_signals(X):
        if not isinstance(X, SignalTable):
            raise TypeError(f"expected a SignalTable, got {type(X).__name__}")
        return X

    def fit(self, X, y=None, entities=None):
        """Fit on the primary signals in ``X``. ``y`` is ignored.

        With ``entities`` the applicability flags of ``X`` are recomputed first.
        """
        X = self._check_signals(X)
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        rules = self._rules()
        if entities is not None:
            X.assign_applicability(entities, rules)
        config = self._config()
        summary = summarize(X, rules, threads=self.threads)
        state = fit(summary, rules, config)
        self._store(state, rules, summary, X)
        return self

    def _store(self, state, rules, summary, signals):
        self.state_ = state
        self.rules_ = rules
        self.summary_ = summary
        self.signals_ = signals
        self.posterior_ = posterior_summary(state, rules, summary)
        self.n_iter_ = state.iteration
        self.converged_ = state.converged
        self.elbo_ = state.elbo_trace[-1]
        self.rho_ = state.rho
        self.rule_ids_ = tuple(r.id for r in rules)

    def transform(self, X=None):
        """Audit scores as a :class:`~rulestate.scoring.ScoreReport`."""
        check_is_fitted(self, "state_")
        X = self.signals_ if X is None else self._check_signals(X)
        return score_entities(X, self.rules_, self.state_, self.threshold)

    def score_samples(self, X=None):
        """``(entity_ids, global scores)``."""
        ids, nc, _ = self.transform(X).global_table()
        return ids, nc

    def decision_function(self, X=None):
        ids, nc = self.score_samples(X)
        return ids, nc - self.threshold

    def predict(self, X=None):
        """``(entity_ids, flags)``; an entity is flagged when its score exceeds the threshold."""
        ids, nc, flags = self.transform(X).global_table()
        return ids, flags

    def score(self, X=None, y=None):
        """The objective value at the fitted state (``X``, ``y`` ignored)."""
        check_is_fitted(self, "state_")
        return elbo(self.state_, self.rules_, self.summary_,
                    self.clamp_activation is not None)

    def update(self, regulatory_update, entities=None, reconverge=True):
        """Absorb an amendment incrementally; returns the update result with its cost ledger."""
        check_is_fitted(self, "state_")
        result = apply_update(self.state_, regulatory_update, self.signals_, self.rules_,
                              summary=self.summary_, entities=entities,
                              config=self._config(), reconverge=reconverge)
        self._store(result.state, result.rules, result.summary, result.signals)
        self.last_update_ = result
        return result

    # persistence

    def state_dict(self):
        check_is_fitted(self, "state_")
        return state_document(self.state_, self.rules_, self.threshold)

    def save(self, path):
        check_is_fitted(self, "state_")
        save_state(path, self.state_, self.rules_, self.threshold)

    def load_state(self, path, signals):
        """Restore a saved state; the current rules must match the saved digest."""
        rules = self._rules()
        state, _ = read_state(path, rules)
        self._store(state, rules, summarize(signals, rules, threads=self.threads), signals)
        return self

    def posterior_table(self):
        """Per-rule posterior rows as dictionaries."""
        check_is_fitted(self, "posterior_")
        return [dict(vars(r)) for r in self.posterior_.rules]

    @property
    def activation_(self):
        check_is_fitted(self, "state_")
        return np.asarray(self.state_.rho_a).copy()
