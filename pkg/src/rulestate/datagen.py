"""Synthetic fiscal-compliance benchmark with ground truth.

Enterprises come from four segments and carry a turnover (integer FCFA),
an employee count and a formality flag; the rules' thresholds decide which
of them each rule applies to. For every applicable (entity, rule) the
primary signal is a declared-to-theoretical ratio drawn from a two-part
mixture: compliant declarations sit near 1 and non-compliant ones are
centred so that the population mean ratio hits the configured target.
Compliance labels share an entity-level culture variable, which gives the
rules a common factor. Supplementary log-delay and bank-account signals
follow the label.

Every distributional choice beyond the mean ratio, the missing rate and the
VAT threshold event is a generator convention; :func:`metadata` lists them.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logit as _logit
from scipy.stats import norm

from .adaptability import ApplicabilityUpdate, RegulatoryUpdate
from .errors import ConfigError, UnknownRule
from .links import clamp_ratio
from .rules import (PRIMARY_SLOT, Applicability, Entity, RuleSpec, SignalTable, dump_rules,
                    format_amount, write_entities)

SEGMENTS = ("formal-large", "formal-sme", "informal", "micro")

# (median turnover in FCFA, log-sd, mean employees, formal)
_SEGMENT_PROFILE = {
    "formal-large": (600e6, 0.8, 60.0, 1),
    "formal-sme": (80e6, 0.5, 8.0, 1),
    "informal": (25e6, 0.8, 1.0, 0),
    "micro": (4e6, 0.9, 0.3, 0),
}


def benchmark_rules(vat_threshold=60_000_000):
    """The five benchmark rules with their prior hyperparameters.

    The VAT threshold defaults to its pre-reform value; the reform to 100M
    is the benchmark's change event.
    """
    turnover = lambda cmp, v: Applicability("turnover", cmp, v, "FCFA")  # noqa: E731
    formal = Applicability("formal", ">=", 1, "flag")
    rows = [
        ("R1", "VAT 18%", 0.92, 1.39, 0.25, 0.04, 0.10, turnover(">=", vat_threshold)),
        ("R2", "Corporate income tax 29%", 0.88, 0.41, 0.50, 0.03, 0.15, formal),
        ("R3", "Minimum flat tax 1%", 0.85, 1.82, 0.10, 0.02, 0.08, formal),
        ("R4", "Informal sector tax", 0.70, -0.85, 1.00, 0.20, 0.25,
         turnover("<", 60_000_000)),
        ("R5", "Employee income tax", 0.80, 0.20, 0.40, 0.05, 0.12,
         Applicability("employees", ">=", 1, "persons")),
    ]
    return [RuleSpec(rid, "logit", pi, mu, tau2, om2, s2, 1.0, app, name=name)
            for rid, name, pi, mu, tau2, om2, s2, app in rows]


@dataclass(frozen=True)
class ChangeEvent:
    rule_id: str
    old_threshold: float
    new_threshold: float
    period: str

    def as_update(self, unit="FCFA"):
        return RegulatoryUpdate(self.rule_id, ApplicabilityUpdate(self.new_threshold, unit),
                                self.period)


@dataclass
class GenConfig:
    J: int = 2000
    segment_mix: dict = field(default_factory=lambda: {
        "formal-large": 0.10, "formal-sme": 0.30, "informal": 0.40, "micro": 0.20})
    periods: tuple = ("2022", "2023", "2024", "2025")
    compliant_weight: float = 0.5
    mean_ratio: float = 0.70
    compliant_ratio: float = 0.95
    compliant_concentration: float = 40.0
    noncompliant_concentration: float = 6.0
    zero_declaration: float = 0.05  # share of non-compliant ratios that are exactly 0
    culture_corr: float = 0.5
    missing_mode: str = "MCAR"
    p_miss: float = 0.19
    p_miss_nc: float = 0.4
    p_miss_c: float = 0.05
    seed: int = 20240101
    change_event: ChangeEvent = field(default_factory=lambda: ChangeEvent(
        "R1", 60_000_000, 100_000_000, "2025"))
    drift: dict = field(default_factory=dict)  # true drift per rule, default 0

    def __post_init__(self):
        if self.J < 1:
            raise ConfigError("J must be positive")
        if set(self.segment_mix) - set(SEGMENTS):
            raise ConfigError(f"unknown segment(s); expected {SEGMENTS}")
        if any(p < 0 for p in self.segment_mix.values()) or \
                not math.isclose(sum(self.segment_mix.values()), 1.0, abs_tol=1e-9):
            raise ConfigError("segment proportions must be non-negative and sum to 1")
        for name in ("compliant_weight", "mean_ratio", "compliant_ratio", "zero_declaration",
                     "culture_corr", "p_miss", "p_miss_nc", "p_miss_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.missing_mode not in ("MCAR", "MNAR"):
            raise ConfigError("missing_mode must be MCAR or MNAR")
        if not self.periods:
            raise ConfigError("at least one period is required")
        if self.change_event is not None and self.change_event.period not in self.periods:
            raise ConfigError(f"change event period {self.change_event.period!r} is not "
                              "one of the generated periods")
        if not 0 < self.noncompliant_mean() < 1:
            raise ConfigError("mean_ratio cannot be reached with these mixture settings")

    def noncompliant_mean(self):
        """Mean ratio of the non-compliant part that yields ``mean_ratio`` overall."""
        w = self.compliant_weight
        if w >= 1.0:
            return 0.5
        nc = (self.mean_ratio - w * self.compliant_ratio) / (1.0 - w)
        return nc / (1.0 - self.zero_declaration)

    def to_dict(self):
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("change_event") is not None and isinstance(d["change_event"], dict):
            d["change_event"] = ChangeEvent(**d["change_event"])
        if "periods" in d:
            d["periods"] = tuple(str(p) for p in d["periods"])
        return cls(**d)


@dataclass
class GroundTruth:
    """Latent truth and pre-missingness signals.

    ``labels[(entity, rule)]`` is 1 for non-compliance. ``psi`` is the mean
    transformed signal of each rule's applicable population in the first
    period; ``phi = psi - delta``.
    """

    labels: dict
    entity_labels: dict
    psi: dict
    phi: dict
    delta: dict
    activation: dict
    eta: float
    rows: list  # (entity, rule, period, a_true, psi_true, label, pre_missing_value)

    def entity_label(self, entity_id):
        return self.entity_labels[entity_id]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "rule_id", "period", "a_true", "psi_true",
                        "compliance_label", "pre_missingness_value"])
            for e, r, p, a, psi, lab, v in self.rows:
                w.writerow([e, r, p, a, repr(psi), lab, repr(v)])


@dataclass
class Benchmark:
    config: GenConfig
    rules: list
    entities: list
    tables: list  # [(period, SignalTable)]
    truth: GroundTruth
    updates: dict  # period -> [RegulatoryUpdate]

    def table(self, period):
        for p, t in self.tables:
            if p == period:
                return t
        raise KeyError(period)

    def rules_for(self, period):
        """Rules in force during ``period`` (updates applied in order)."""
        rules = list(self.rules)
        for p in self.config.periods:
            for u in self.updates.get(p, []):
                rules = u.apply_to(rules)
            if p == period:
                return rules
        raise KeyError(period)

    def changed_entities(self):
        ev = self.config.change_event
        return set() if ev is None else apply_change_event(self.entities, self.rules, ev)


def _beta(rng, mean, concentration, size):
    mean = min(max(mean, 1e-6), 1 - 1e-6)
    return rng.beta(mean * concentration, (1.0 - mean) * concentration, size)


def _entities(config, rng):
    names = [s for s in SEGMENTS if config.segment_mix.get(s, 0.0) > 0]
    probs = np.array([config.segment_mix[s] for s in names])
    seg = rng.choice(len(names), size=config.J, p=probs / probs.sum())
    width = len(str(config.J))
    out = []
    for j in range(config.J):
        name = names[seg[j]]
        median, sd, emp, formal = _SEGMENT_PROFILE[name]
        turnover = int(round(median * math.exp(sd * rng.standard_normal()) / 1000.0)) * 1000
        employees = int(rng.poisson(emp))
        out.append(Entity(f"E{j:0{width}d}", name,
                          {"turnover": turnover, "employees": employees, "formal": formal},
                          {"turnover": "FCFA", "employees": "persons", "formal": "flag"}))
    return out


def _broad_applicability(entity, rule, event):
    """Does the rule apply under any threshold the benchmark uses?"""
    pred = rule.applicability
    value = entity.attributes[pred.attribute]
    if pred.holds(value):
        return True
    if event is not None and event.rule_id == rule.id:
        return pred.with_threshold(event.new_threshold).holds(value) or \
            pred.with_threshold(event.old_threshold).holds(value)
    return False


def generate(config=None, rules=None):
    """Draw a benchmark; fully determined by ``config.seed``."""
    config = config or GenConfig()
    rules = list(rules) if rules is not None else benchmark_rules(
        config.change_event.old_threshold if config.change_event
        and config.change_event.rule_id == "R1" else 60_000_000)
    if config.change_event is not None and config.change_event.rule_id not in \
            {r.id for r in rules}:
        raise UnknownRule(config.change_event.rule_id)
    rng = np.random.default_rng(config.seed)
    entities = _entities(config, rng)
    event = config.change_event
    updates = {event.period: [event.as_update(rules[[r.id for r in rules].index(
        event.rule_id)].applicability.unit)]} if event else {}

    # labels: Gaussian copula on an entity culture variable
    K = len(rules)
    culture = rng.standard_normal(config.J)
    noise = rng.standard_normal((config.J, K))
    latent = math.sqrt(config.culture_corr) * culture[:, None] + \
        math.sqrt(1.0 - config.culture_corr) * noise
    w = config.compliant_weight
    cut = norm.ppf(w) if 0.0 < w < 1.0 else (np.inf if w >= 1.0 else -np.inf)
    noncompliant = latent >= cut

    pairs = [(j, i) for j, e in enumerate(entities) for i, r in enumerate(rules)
             if _broad_applicability(e, r, event)]
    labels = {(entities[j].id, rules[i].id): int(noncompliant[j, i]) for j, i in pairs}
    entity_labels = {e.id: 0 for e in entities}
    for (eid, _), lab in labels.items():
        entity_labels[eid] = max(entity_labels[eid], lab)

    nc_mean = config.noncompliant_mean()
    tables, truth_rows = [], []
    in_force = list(rules)
    psi, first = {}, None
    for period in config.periods:
        for u in updates.get(period, []):
            in_force = u.apply_to(in_force)
        ents, rids, slots, vals = [], [], [], []
        for j, i in pairs:
            e, r = entities[j], rules[i]
            bad = noncompliant[j, i]
            if bad:
                ratio = 0.0 if rng.random() < config.zero_declaration else \
                    float(_beta(rng, nc_mean, config.noncompliant_concentration, None))
            else:
                ratio = float(_beta(rng, config.compliant_ratio,
                                    config.compliant_concentration, None))
            delay = float(math.exp(rng.normal(math.log(45.0 if bad else 10.0),
                                              0.7 if bad else 0.5)))
            bank = float(rng.random() < (0.4 if bad else 0.85))
            for slot, v in ((PRIMARY_SLOT, ratio), ("delay", delay), ("bank", bank)):
                ents.append(e.id)
                rids.append(r.id)
                slots.append(slot)
                vals.append(v)
        table = SignalTable(ents, rids, slots, vals, np.zeros(len(ents), dtype=bool))
        table.assign_applicability(entities, in_force)
        tables.append([period, table])
        if first is None:
            first = table
    for rule in rules:
        rows = first.rows_for(rule.id)
        rows = rows[first.applicable[rows]]
        t = _logit(clamp_ratio(first.value[rows])[0]) if len(rows) else np.array([])
        psi[rule.id] = math.fsum(t) / len(t) if len(t) else float("nan")
    delta = {r.id: float(config.drift.get(r.id, 0.0)) for r in rules}
    phi = {r.id: psi[r.id] - delta[r.id] for r in rules}
    dev = [(psi[r.id] - r.prior_mean) / r.prior_sd for r in rules if math.isfinite(psi[r.id])]
    eta = float(np.mean(dev)) if dev else 0.0
    activation = {r.id: 1 for r in rules}

    # missingness, per rule and period, primary slot only
    for k, (period, table) in enumerate(tables):
        mrng = np.random.default_rng([config.seed, k])
        if config.missing_mode == "MCAR":
            table = apply_mcar(table, config.p_miss, mrng)
        else:
            table = apply_mnar(table, labels, config.p_miss_nc, config.p_miss_c, mrng)
        tables[k][1] = table
    for period, table in tables:
        prim = table.slot == PRIMARY_SLOT
        for idx in np.flatnonzero(prim):
            e, r = table.entity_id[idx], table.rule_id[idx]
            truth_rows.append((e, r, period, int(table.applicable[idx]), psi[r],
                               labels[(e, r)], float(table.value[idx])))
    truth = GroundTruth(labels, entity_labels, psi, phi, delta, activation, eta, truth_rows)
    return Benchmark(config, rules, entities, [tuple(t) for t in tables], truth, updates)


def _primary_groups(table):
    for rule_id in sorted(set(table.rule_id[table.slot == PRIMARY_SLOT])):
        rows = table.rows_for(rule_id, PRIMARY_SLOT)
        yield rule_id, rows[table.applicable[rows]]


def apply_mcar(table, p_miss, rng):
    """Hide exactly ``round(p_miss * N)`` uniformly chosen primary signals per rule.

    A fixed-size uniform subset is still missing completely at random and
    keeps each rule's missing fraction within ``1/N`` of the target.
    """
    out = table.copy()
    for _, rows in _primary_groups(out):
        k = int(round(p_miss * len(rows)))
        if k:
            out.missing[rng.choice(rows, size=k, replace=False)] = True
    return out


def apply_mnar(table, labels, p_miss_nc, p_miss_c, seed):
    """Hide each non-compliant entity's primary signal with ``p_miss_nc``,
    each compliant one's with ``p_miss_c``."""
    for p in (p_miss_nc, p_miss_c):
        if not 0.0 <= p <= 1.0:
            raise ConfigError("missingness probabilities must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = table.copy()
    prim = np.flatnonzero(out.slot == PRIMARY_SLOT)
    bad = np.array([labels[(out.entity_id[i], out.rule_id[i])] for i in prim], dtype=bool)
    u = rng.random(len(prim))
    drop = np.where(bad, u < p_miss_nc, u < p_miss_c)
    out.missing[prim[drop]] = True
    return out


def apply_change_event(entities, rules, event):
    """Entities whose applicability to ``event.rule_id`` flips under the new threshold."""
    rule = next((r for r in rules if r.id == event.rule_id), None)
    if rule is None:
        raise UnknownRule(f"change event references unknown rule {event.rule_id!r}")
    old = rule.applicability.with_threshold(event.old_threshold)
    new = rule.applicability.with_threshold(event.new_threshold)
    attr = rule.applicability.attribute
    return {e.id for e in entities
            if attr in e.attributes and old.holds(e.attributes[attr]) !=
            new.holds(e.attributes[attr])}


def metadata(config):
    return {
        "generator": "rulestate synthetic fiscal benchmark",
        "config": config.to_dict(),
        "conventions": [
            "segments, turnover and employee distributions are generator conventions",
            "ratio mixture: compliant Beta near compliant_ratio, non-compliant Beta centred "
            "to hit mean_ratio, with a share of exact-zero declarations",
            "labels correlate across rules through an entity culture variable (culture_corr)",
            "MCAR hides an exact-size uniform subset per rule and period",
            "psi truth is the first period's mean transformed signal; delta truth is "
            "configured (default 0)",
            "eta truth is the mean standardised deviation of psi from the prior means",
            "background variance is 1.0 on the link scale",
        ],
    }


def write_benchmark(bench, out_dir):
    """Write rules, entities, one signal table per period, updates, a period
    manifest, the ground truth and metadata. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rules.toml").write_text(dump_rules(bench.rules))
    write_entities(bench.entities, out / "entities.csv")
    lines = []
    for period, table in bench.tables:
        name = f"signals_{period}.csv"
        table.write_csv(out / name)
        lines += ["[[period]]", f'label = "{period}"', f'signals = "{name}"']
        ups = bench.updates.get(period, [])
        if ups:
            doc = f"updates_{period}.toml"
            (out / doc).write_text(dump_updates(ups, bench.rules))
            lines.append(f'updates = "{doc}"')
        lines.append("")
    manifest = out / "manifest.toml"
    manifest.write_text("\n".join(lines))
    bench.truth.write_csv(out / "truth.csv")
    with open(out / "metadata.json", "w") as fh:
        json.dump(metadata(bench.config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def dump_updates(updates, rules):
    units = {r.id: r.applicability.unit for r in rules}
    out = []
    for u in updates:
        out += ["[[update]]", f'rule_id = "{u.rule_id}"', f'kind = "{u.kind}"']
        if u.period:
            out.append(f'period = "{u.period}"')
        if u.kind == "applicability":
            unit = u.change.unit or units[u.rule_id]
            out.append(f'threshold = "{format_amount(u.change.threshold, unit)}"')
        else:
            for k, v in u.change.changes.items():
                out.append(f"{k} = {json.dumps(v)}")
        out.append("")
    return "\n".join(out)
