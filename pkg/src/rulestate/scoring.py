"""Entity-level audit scores.

Observed signals are scored against the rule's own legal standard, never
against posterior quantities. Missing signals get the posterior-predictive
probability that a generic entity under the rule falls below that standard.
An entity's global score is the worst of its applicable rules.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import NoApplicableRules, UnsupportedLink
from .links import LinkKind, clamp_ratio, transform
from .rules import PRIMARY_SLOT

OBSERVED = "Observed"
MISSING_PREDICTIVE = "MissingPredictive"
DEFAULT_THRESHOLD = 0.5


def score_observed(rule, t):
    """``g^{-1}(standard - t)`` for a transformed signal ``t`` (scalar or array).

    Only the logit inverse is a probability. Log and identity rules go through
    the logistic too so every score lives in [0, 1]; the raw gap is available
    from :func:`score_gap`.
    """
    if rule.link is LinkKind.BERNOULLI_BETA:
        raise UnsupportedLink(f"rule {rule.id!r}: binary signals have no audit score")
    out = expit(rule.legal_standard - np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def score_gap(rule, t):
    """Signed distance below the legal standard on the link scale."""
    return rule.legal_standard - t


def score_missing(rule, m_phi, v_phi, m_delta, v_delta):
    """Posterior-predictive probability of falling below the standard."""
    scale = math.sqrt(rule.obs_noise + v_phi + v_delta)
    return float(norm.cdf((rule.legal_standard - m_phi - m_delta) / scale))


def global_score(scores, threshold=DEFAULT_THRESHOLD):
    """``(max score, flagged)``; flagged only when the max strictly exceeds ``threshold``."""
    scores = list(scores)
    if not scores:
        raise NoApplicableRules("entity has no applicable rule to score")
    worst = max(scores)
    return worst, bool(worst > threshold)


def rbs_baseline(rule, raw):
    """Rule-based baseline: 0.5 for a missing signal, else 1 on a violation, 0 otherwise."""
    if raw is None or (isinstance(raw, float) and math.isnan(raw)):
        return 0.5
    return 1.0 if raw < rule.rbs_threshold else 0.0


def _transformed(rule, raw):
    if rule.link is LinkKind.LOGIT:
        raw, _ = clamp_ratio(raw)
    return transform(rule.link, raw)


@dataclass
class ScoreReport:
    """Per (entity, rule) scores plus the per-entity maximum and flag."""

    entity_id: list
    rule_id: list
    score: np.ndarray
    provenance: list
    threshold: float = DEFAULT_THRESHOLD
    gap: list = field(default_factory=list)
    method: str = "rsi"

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=float)
        if not self.gap:
            self.gap = [None] * len(self.score)
        order = sorted(range(len(self.score)),
                       key=lambda i: (str(self.entity_id[i]), str(self.rule_id[i])))
        self.entity_id = [self.entity_id[i] for i in order]
        self.rule_id = [self.rule_id[i] for i in order]
        self.provenance = [self.provenance[i] for i in order]
        self.gap = [self.gap[i] for i in order]
        self.score = self.score[order] if len(order) else self.score
        self._global = {}
        for e, s in zip(self.entity_id, self.score):
            self._global[e] = max(self._global.get(e, -1.0), float(s))

    def __len__(self):
        return len(self.score)

    @property
    def entities(self):
        return sorted(self._global, key=str)

    def global_nc(self, entity_id):
        return self._global[entity_id]

    def flagged(self, entity_id):
        return self._global[entity_id] > self.threshold

    def global_table(self):
        """``(entity_ids, global scores, flags)`` as aligned arrays."""
        ids = self.entities
        nc = np.array([self._global[e] for e in ids], dtype=float)
        return ids, nc, nc > self.threshold

    def rule_scores(self, rule_id):
        """``{entity_id: score}`` for one rule."""
        return {e: float(s) for e, r, s in zip(self.entity_id, self.rule_id, self.score)
                if r == rule_id}

    def rows(self):
        for e, r, s, p, g in zip(self.entity_id, self.rule_id, self.score, self.provenance,
                                 self.gap):
            yield e, r, float(s), p, g, self._global[e], self._global[e] > self.threshold

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "rule_id", "score", "provenance", "global_nc", "flagged"])
            for e, r, s, p, _, nc, flag in self.rows():
                w.writerow([e, r, repr(s), p, repr(nc), str(flag).lower()])

    def to_dict(self):
        ids, nc, flags = self.global_table()
        return {
            "method": self.method,
            "threshold": self.threshold,
            "scores": [{"entity_id": e, "rule_id": r, "score": s, "provenance": p, "gap": g}
                       for e, r, s, p, g, _, _ in self.rows()],
            "entities": [{"entity_id": e, "global_nc": float(v), "flagged": bool(f)}
                         for e, v, f in zip(ids, nc, flags)],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _scoring_rows(signals, rules):
    for rule in rules:
        rows = signals.rows_for(rule.id, PRIMARY_SLOT)
        yield rule, rows[signals.applicable[rows]]


def score_entities(signals, rules, state, threshold=DEFAULT_THRESHOLD):
    """Score every applicable primary signal against a fitted state.

    ``state`` is a :class:`~rulestate.cavi.VariationalState` whose rule order
    matches ``rules``.
    """
    pos = {rid: i for i, rid in enumerate(state.rule_ids)}
    ents, rids, scores, prov, gaps = [], [], [], [], []
    for rule, rows in _scoring_rows(signals, rules):
        i = pos[rule.id]
        miss = signals.missing[rows]
        obs = rows[~miss]
        if len(obs):
            t = _transformed(rule, signals.value[obs])
            s = np.atleast_1d(score_observed(rule, t))
            ents.extend(signals.entity_id[obs])
            rids.extend([rule.id] * len(obs))
            scores.extend(s.tolist())
            prov.extend([OBSERVED] * len(obs))
            gaps.extend(np.atleast_1d(score_gap(rule, t)).tolist())
        if miss.any():
            fill = score_missing(rule, state.m_phi[i], state.v_phi[i], state.m_delta[i],
                                 state.v_delta[i])
            k = int(miss.sum())
            ents.extend(signals.entity_id[rows[miss]])
            rids.extend([rule.id] * k)
            scores.extend([fill] * k)
            prov.extend([MISSING_PREDICTIVE] * k)
            gaps.extend([None] * k)
    return ScoreReport(ents, rids, scores, prov, threshold, gaps)


def rbs_scores(signals, rules, threshold=DEFAULT_THRESHOLD):
    """The rule-based baseline over the same rows :func:`score_entities` scores."""
    ents, rids, scores, prov = [], [], [], []
    for rule, rows in _scoring_rows(signals, rules):
        for j in rows:
            raw = None if signals.missing[j] else float(signals.value[j])
            ents.append(signals.entity_id[j])
            rids.append(rule.id)
            scores.append(rbs_baseline(rule, raw))
            prov.append(MISSING_PREDICTIVE if raw is None else OBSERVED)
    return ScoreReport(ents, rids, scores, prov, threshold, method="rbs")
