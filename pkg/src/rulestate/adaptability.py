"""Absorbing a regulatory amendment to one rule without refitting the rest.

An amendment touches one rule ``k``: either its hyperparameters, or the
threshold that decides which entities it applies to. The local step
recomputes rule ``k``'s statistics from its own rows, reruns that rule's
factor updates and refreshes the ``eta`` sum over ``K`` rules. Every other
rule keeps the factors it already had. Outer iterations then run to
re-convergence, and their cost is reported apart from the local step.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cavi import CaviConfig, RuleParams, Stats, fit, sweep_rules, update_eta
from .errors import ParseError, UnknownRule, ValidationError
from .rules import SignalTable, parse_amount, summarize, summarize_rule

log = logging.getLogger(__name__)

_PARAMETERS = ("prior_activation", "prior_mean", "prior_var", "drift_var", "obs_noise",
               "background_var", "legal_standard", "rbs_threshold")


@dataclass(frozen=True)
class ParameterUpdate:
    """New hyperparameter values, keyed by field name."""

    changes: dict

    kind = "parameter"

    def __post_init__(self):
        unknown = set(self.changes) - set(_PARAMETERS)
        if unknown:
            raise ValidationError(f"unknown hyperparameter(s) {sorted(unknown)}",
                                  path=f"fields.{sorted(unknown)[0]}")

    def apply(self, rule):
        changes = dict(self.changes)
        # a default legal standard follows the prior mean it was derived from
        if "prior_mean" in changes and "legal_standard" not in changes \
                and rule.legal_standard == rule.prior_mean:
            changes["legal_standard"] = changes["prior_mean"]
        if "legal_standard" in changes and "rbs_threshold" not in changes:
            changes["rbs_threshold"] = None
        return rule.with_params(**changes)

    def fields(self):
        return dict(self.changes)


@dataclass(frozen=True)
class ApplicabilityUpdate:
    """A new applicability threshold, in the rule's own unit."""

    threshold: float
    unit: str = None

    kind = "applicability"

    def apply(self, rule):
        pred = rule.applicability
        if self.unit is not None and self.unit != pred.unit:
            raise ValidationError(f"threshold unit {self.unit!r} does not match the rule's "
                                  f"{pred.unit!r}", path="fields.threshold")
        return replace(rule, applicability=pred.with_threshold(self.threshold))

    def fields(self):
        return {"threshold": self.threshold, "unit": self.unit}


@dataclass(frozen=True)
class RegulatoryUpdate:
    rule_id: str
    change: object
    period: str = ""

    @property
    def kind(self):
        return self.change.kind

    def index_in(self, rules):
        for i, r in enumerate(rules):
            if r.id == self.rule_id:
                return i
        raise UnknownRule(f"update references unknown rule {self.rule_id!r}")

    def apply_to(self, rules):
        """The rule list with this amendment applied."""
        rules = list(rules)
        k = self.index_in(rules)
        rules[k] = self.change.apply(rules[k])
        return rules

    def to_dict(self):
        return {"rule_id": self.rule_id, "kind": self.kind, "period": self.period,
                "fields": self.change.fields()}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        fields = dict(d.get("fields", {}))
        if kind == "parameter":
            change = ParameterUpdate(fields)
        elif kind == "applicability":
            change = ApplicabilityUpdate(fields["threshold"], fields.get("unit"))
        else:
            raise ParseError(f"unknown update kind {kind!r}", path="kind")
        return cls(str(d["rule_id"]), change, str(d.get("period", "")))


@dataclass
class CostLedger:
    """Work done by the local step of an update."""

    signals_scanned: int = 0
    entities_scanned: int = 0
    applicability_flips: int = 0
    per_rule_updates_touched: int = 0
    eta_sum_terms: int = 0
    rules_written: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class UpdateResult:
    state: object
    rules: list
    signals: SignalTable
    summary: object
    local: CostLedger
    local_state: object
    reconverge_iterations: int = 0
    reconverge_time: float = 0.0
    flipped: list = field(default_factory=list)

    def report(self):
        return {"local": self.local.to_dict(),
                "reconverge": {"iterations": self.reconverge_iterations,
                               "wall_time": self.reconverge_time,
                               "converged": bool(self.state.converged)}}


def _rescan(signals, entities, rule):
    """Fresh ``A_jk`` flags for rule ``k`` on a copy of the applicability column."""
    out = SignalTable(signals.entity_id, signals.rule_id, signals.slot, signals.value,
                      signals.missing, signals.applicable.copy())
    out._index = signals._index
    before = {}
    for slot in signals.slots_for(rule.id):
        rows = signals.rows_for(rule.id, slot)
        before.update(zip(signals.entity_id[rows], signals.applicable[rows]))
    scanned = out.assign_applicability(entities, [rule], [rule.id])
    after = {}
    for slot in out.slots_for(rule.id):
        rows = out.rows_for(rule.id, slot)
        after.update(zip(out.entity_id[rows], out.applicable[rows]))
    flipped = sorted((e for e in after if bool(after[e]) != bool(before.get(e))), key=str)
    return out, scanned, flipped


def apply_update(state, update, signals, rules, summary=None, entities=None, config=None,
                 reconverge=True):
    """Absorb ``update`` into a fitted ``state``; returns an :class:`UpdateResult`.

    ``entities`` is required for an applicability change. ``summary`` is the
    summary ``state`` was fitted on; it is rebuilt when not given, outside the
    timed local step. The input state and signal table are never modified.
    """
    config = config or CaviConfig()
    rules = list(rules)
    k = update.index_in(rules)
    if not state.converged:
        log.warning("applying an update to a state that has not converged")
    if summary is None:
        summary = summarize(signals, rules)
    new_rules = update.apply_to(rules)
    ledger = CostLedger()
    flipped = []

    start = time.perf_counter()
    if update.kind == "applicability":
        if entities is None:
            raise ValidationError("an applicability update needs the entity table",
                                  path="entities")
        signals, ledger.entities_scanned, flipped = _rescan(signals, entities, new_rules[k])
        ledger.applicability_flips = len(flipped)
    rule_summary = summarize_rule(signals, new_rules[k])
    ledger.signals_scanned = len(signals.rows_for(new_rules[k].id))
    new_summary = summary.replace(k, rule_summary)
    unchanged = new_rules[k] == rules[k] and rule_summary == summary[k]
    local = state.copy()
    if not unchanged:
        p = RuleParams.from_rules(new_rules)
        s = Stats.from_summary(new_summary)
        sweep_rules(local, p, s, config, index=k)
        local.v_eta, local.m_eta = update_eta(local, p)
    ledger.per_rule_updates_touched = 1
    ledger.eta_sum_terms = len(rules)
    ledger.wall_time = time.perf_counter() - start

    ledger.rules_written = _written(state, local)
    result = UpdateResult(local, new_rules, signals, new_summary, ledger, local.copy(),
                          flipped=flipped)
    if reconverge and not unchanged:
        t0 = time.perf_counter()
        before = local.iteration
        result.state = fit(new_summary, new_rules, config, local)
        result.reconverge_iterations = result.state.iteration - before
        result.reconverge_time = time.perf_counter() - t0
    return result


def _written(old, new):
    cols = ("rho_a", "m_phi", "v_phi", "m_delta", "v_delta")
    changed = np.zeros(len(old.rule_ids), dtype=bool)
    for c in cols:
        changed |= getattr(old, c) != getattr(new, c)
    return [old.rule_ids[i] for i in np.flatnonzero(changed)]


# ---------------------------------------------------------------------------
# update documents and history


def load_updates(document, source=None):
    """Parse ``[[update]]`` blocks (TOML text or a path).

    Each block has ``rule_id``, ``kind`` (``parameter`` or
    ``applicability``) and an optional ``period``. Parameter updates list
    the new values inline; applicability updates give ``threshold`` with a
    unit, e.g. ``"100M FCFA"``.
    """
    if isinstance(document, Path) or (isinstance(document, str) and "\n" not in document
                                      and document.endswith(".toml")):
        source = source or str(document)
        document = Path(document).read_text()
    try:
        data = tomllib.loads(document)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc), source=source) from None
    blocks = data.get("update")
    if not isinstance(blocks, list) or not blocks:
        raise ParseError("document has no [[update]] blocks", path="update", source=source)
    out = []
    for idx, block in enumerate(blocks):
        where = f"update[{idx}]"
        for key in ("rule_id", "kind"):
            if key not in block:
                raise ParseError(f"missing required field {key!r}", path=f"{where}.{key}",
                                 source=source)
        kind = block["kind"]
        period = str(block.get("period", ""))
        rest = {k: v for k, v in block.items() if k not in ("rule_id", "kind", "period")}
        if kind == "applicability":
            if set(rest) != {"threshold"}:
                raise ParseError("applicability updates take exactly one field, 'threshold'",
                                 path=f"{where}.threshold", source=source)
            try:
                value, unit = parse_amount(rest["threshold"])
            except ValueError as exc:
                raise ValidationError(str(exc), path=f"{where}.threshold",
                                      source=source) from None
            change = ApplicabilityUpdate(value, unit)
        elif kind == "parameter":
            if not rest:
                raise ParseError("parameter update lists no fields", path=where, source=source)
            try:
                change = ParameterUpdate(rest)
            except ValidationError as exc:
                raise ValidationError(str(exc).split(": ", 1)[-1],
                                      path=f"{where}.{exc.path}", source=source) from None
        else:
            raise ParseError(f"kind must be 'parameter' or 'applicability', got {kind!r}",
                             path=f"{where}.kind", source=source)
        out.append(RegulatoryUpdate(str(block["rule_id"]), change, period))
    return out


class UpdateLog:
    """Append-only JSON-lines history of applied updates, replayable in order."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, update):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(update.to_dict(), sort_keys=True) + "\n")

    def entries(self):
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [RegulatoryUpdate.from_dict(json.loads(line)) for line in fh if line.strip()]

    def by_period(self):
        out = {}
        for u in self.entries():
            out.setdefault(u.period, []).append(u)
        return out

    def replay(self, rules):
        """``rules`` with every logged update applied in order."""
        for u in self.entries():
            rules = u.apply_to(rules)
        return rules
