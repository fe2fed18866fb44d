"""Rule specifications, applicability and per-rule sufficient statistics."""

import csv
import hashlib
import json
import math
import operator
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (DomainError, MissingAttribute, ParseError, UnknownRule,
                     ValidationError)
from .links import LinkKind, binary_posterior, clamp_ratio, in_domain, inverse, transform

PRIMARY_SLOT = "primary"

COMPARATORS = {
    ">=": operator.ge,
    ">": operator.gt,
    "<=": operator.le,
    "<": operator.lt,
}

# default link for the supplementary slots the benchmark emits
SUPPLEMENTARY_LINKS = {"delay": LinkKind.LOG, "bank": LinkKind.BERNOULLI_BETA}

_MAGNITUDE = {"": 1, "k": 10**3, "K": 10**3, "M": 10**6, "B": 10**9, "G": 10**9}
_AMOUNT = re.compile(r"^\s*([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*([kKMBG]?)\s+(\S.*?)\s*$")


def parse_amount(text):
    """Parse ``"100M FCFA"`` or ``"100000000 FCFA"`` into ``(value, unit)``."""
    if not isinstance(text, str):
        raise ValueError("threshold must be a string carrying a unit, e.g. '100M FCFA'")
    m = _AMOUNT.match(text)
    if m is None:
        raise ValueError(f"cannot parse amount {text!r}; expected '<number>[k|M|B] <unit>'")
    number, mag, unit = m.groups()
    scale = _MAGNITUDE[mag]
    if re.fullmatch(r"[-+]?\d+", number):
        value = int(number) * scale
    else:
        value = float(number) * scale
        if value.is_integer():
            value = int(value)
    return value, unit


def format_amount(value, unit):
    return f"{value} {unit}"


@dataclass(frozen=True)
class Applicability:
    """Threshold predicate ``entity[attribute] <comparator> threshold``."""

    attribute: str
    comparator: str
    threshold: float
    unit: str

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValidationError(f"comparator must be one of {sorted(COMPARATORS)}",
                                  path="applicability.comparator")
        if not self.unit:
            raise ValidationError("threshold needs a unit", path="applicability.threshold")

    def holds(self, value):
        return COMPARATORS[self.comparator](value, self.threshold)

    def with_threshold(self, threshold):
        return replace(self, threshold=threshold)


@dataclass(frozen=True)
class RuleSpec:
    id: str
    link: LinkKind
    prior_activation: float
    prior_mean: float
    prior_var: float
    drift_var: float
    obs_noise: float
    background_var: float
    applicability: Applicability
    name: str = ""
    # reference point for audit scores; the rule's prior mean unless overridden
    legal_standard: float = None
    # raw-signal threshold for the rule-based baseline
    rbs_threshold: float = None

    def __post_init__(self):
        object.__setattr__(self, "link", LinkKind.parse(self.link))
        for name in ("prior_var", "drift_var", "obs_noise", "background_var"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be a finite positive number, got {v!r}",
                                      path=f"{self.id}.{name}")
        p = self.prior_activation
        if not (isinstance(p, (int, float)) and 0.0 < p < 1.0):
            raise ValidationError(f"prior_activation must lie strictly inside (0, 1), got {p!r}",
                                  path=f"{self.id}.prior_activation")
        if not math.isfinite(self.prior_mean):
            raise ValidationError("prior_mean must be finite", path=f"{self.id}.prior_mean")
        if self.legal_standard is None:
            object.__setattr__(self, "legal_standard", float(self.prior_mean))
        if self.rbs_threshold is None and self.link is not LinkKind.BERNOULLI_BETA:
            object.__setattr__(self, "rbs_threshold",
                               float(inverse(self.link, self.legal_standard)))

    @property
    def prior_sd(self):
        return math.sqrt(self.prior_var)

    def with_params(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["link"] = self.link.value
        d["applicability"] = asdict(self.applicability)
        return d


def rules_hash(rules):
    """Stable digest of a rule list; saved states carry it to detect drift."""
    payload = json.dumps([r.to_dict() for r in rules], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class Entity:
    id: str
    segment: str = ""
    attributes: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)


def applicability(entity, rule):
    """``A_ji``: does ``rule`` structurally apply to ``entity``?"""
    pred = rule.applicability
    if pred.attribute not in entity.attributes:
        raise MissingAttribute(
            f"entity {entity.id!r} lacks attribute {pred.attribute!r} needed by rule {rule.id!r}")
    unit = entity.units.get(pred.attribute)
    if unit is not None and unit != pred.unit:
        raise ValidationError(f"unit mismatch: entity gives {unit!r}, rule threshold is "
                              f"in {pred.unit!r}", path=f"{rule.id}.applicability")
    return bool(pred.holds(entity.attributes[pred.attribute]))


# ---------------------------------------------------------------------------
# rule documents


_REQUIRED = ("id", "link", "prior_activation", "prior_mean", "prior_var",
             "drift_var", "obs_noise", "background_var", "applicability")
_OPTIONAL = ("name", "legal_standard", "rbs_threshold")


def _field_line(lines, block_start, key):
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i in range(block_start, len(lines)):
        if i > block_start and lines[i].strip().startswith("[[rule]]"):
            break
        if pat.match(lines[i]):
            return i + 1
    return block_start + 1


def load_rules(document, source=None):
    """Parse and validate a rule document (TOML text, or a path to one).

    One ``[[rule]]`` table per rule with the six prior hyperparameters and an
    ``[rule.applicability]`` sub-table whose threshold carries a unit.
    """
    if isinstance(document, Path) or (isinstance(document, str) and "\n" not in document
                                      and document.endswith(".toml")):
        source = source or str(document)
        document = Path(document).read_text()
    try:
        data = tomllib.loads(document)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), source=source,
                         line=int(m.group(1)) if m else None) from None
    blocks = data.get("rule")
    if not isinstance(blocks, list) or not blocks:
        raise ParseError("document has no [[rule]] blocks", path="rule", source=source)
    lines = document.splitlines()
    starts = [i for i, ln in enumerate(lines) if ln.strip() == "[[rule]]"]
    rules, seen = [], set()
    for idx, block in enumerate(blocks):
        start = starts[idx] if idx < len(starts) else 0
        rid = block.get("id", f"#{idx}")

        def fail(msg, key, exc=ValidationError):
            raise exc(msg, path=f"rule[{idx}].{key}", source=source,
                      line=_field_line(lines, start, key.split(".")[-1]))

        for key in _REQUIRED:
            if key not in block:
                fail(f"missing required field {key!r}", key, ParseError)
        unknown = set(block) - set(_REQUIRED) - set(_OPTIONAL)
        if unknown:
            fail(f"unknown field(s) {sorted(unknown)}", sorted(unknown)[0], ParseError)
        if rid in seen:
            fail(f"duplicate rule id {rid!r}", "id")
        seen.add(rid)
        app = block["applicability"]
        if not isinstance(app, dict):
            fail("applicability must be a table", "applicability", ParseError)
        for key in ("attribute", "comparator", "threshold"):
            if key not in app:
                fail(f"missing required field {key!r}", f"applicability.{key}", ParseError)
        try:
            threshold, unit = parse_amount(app["threshold"])
        except ValueError as exc:
            fail(str(exc), "applicability.threshold")
        for key in ("prior_activation", "prior_mean", "prior_var", "drift_var",
                    "obs_noise", "background_var"):
            if not isinstance(block[key], (int, float)) or isinstance(block[key], bool):
                fail(f"{key} must be a number", key, ParseError)
        try:
            link = LinkKind.parse(block["link"])
            pred = Applicability(str(app["attribute"]), str(app["comparator"]), threshold, unit)
            rule = RuleSpec(id=str(rid), link=link,
                            prior_activation=float(block["prior_activation"]),
                            prior_mean=float(block["prior_mean"]),
                            prior_var=float(block["prior_var"]),
                            drift_var=float(block["drift_var"]),
                            obs_noise=float(block["obs_noise"]),
                            background_var=float(block["background_var"]),
                            applicability=pred,
                            name=str(block.get("name", "")),
                            legal_standard=block.get("legal_standard"),
                            rbs_threshold=block.get("rbs_threshold"))
        except ValidationError as exc:
            key = (exc.path or "").split(".", 1)[-1] or "id"
            fail(str(exc).split(": ", 1)[-1], key)
        except ValueError as exc:
            fail(str(exc), "link")
        rules.append(rule)
    return rules


def dump_rules(rules):
    """Serialise rules back into the document format accepted by :func:`load_rules`."""
    out = []
    for r in rules:
        out.append("[[rule]]")
        out.append(f"id = {json.dumps(r.id)}")
        if r.name:
            out.append(f"name = {json.dumps(r.name)}")
        out.append(f'link = "{r.link.value}"')
        for key in ("prior_activation", "prior_mean", "prior_var", "drift_var",
                    "obs_noise", "background_var"):
            out.append(f"{key} = {getattr(r, key)!r}")
        if r.legal_standard != r.prior_mean:
            out.append(f"legal_standard = {r.legal_standard!r}")
        out.append("")
        out.append("[rule.applicability]")
        a = r.applicability
        out.append(f"attribute = {json.dumps(a.attribute)}")
        out.append(f'comparator = "{a.comparator}"')
        out.append(f"threshold = {json.dumps(format_amount(a.threshold, a.unit))}")
        out.append("")
    return "\n".join(out)


def find_rule(rules, rule_id):
    for i, r in enumerate(rules):
        if r.id == rule_id:
            return i
    raise UnknownRule(rule_id)


# ---------------------------------------------------------------------------
# entities and signals


def read_entities(path):
    """Entity attribute table: ``entity_id, segment, <attr>[unit]...``."""
    entities = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty entity table; header row is mandatory", source=path) from None
        if not header or header[0] != "entity_id":
            raise ParseError("first column must be entity_id", source=path, line=1)
        cols, units = [], {}
        for h in header[1:]:
            m = re.fullmatch(r"\s*([^\[]+?)\s*(?:\[(.+)\])?\s*", h)
            name = m.group(1)
            cols.append(name)
            if m.group(2):
                units[name] = m.group(2)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}",
                                 source=path, line=lineno)
            attrs, segment = {}, ""
            for name, raw in zip(cols, row[1:]):
                if name == "segment":
                    segment = raw
                    continue
                attrs[name] = _parse_number(raw)
            entities.append(Entity(row[0], segment, attrs, dict(units)))
    return entities


def _parse_number(raw):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def write_entities(entities, path, units=None):
    attr_names = []
    for e in entities:
        for k in e.attributes:
            if k not in attr_names:
                attr_names.append(k)
    units = units or (entities[0].units if entities else {})
    header = ["entity_id", "segment"] + [f"{a}[{units[a]}]" if a in units else a
                                         for a in attr_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e in entities:
            w.writerow([e.id, e.segment] + [e.attributes.get(a, "") for a in attr_names])


class SignalTable:
    """Long-format signal store keyed by (entity, rule, slot).

    ``missing`` is the authoritative missingness mask; ``value`` is never read
    where it is set. ``applicable`` holds the ``A_ji`` flags.
    """

    def __init__(self, entity_id, rule_id, slot, value, missing, applicable=None):
        self.entity_id = np.asarray(entity_id, dtype=object)
        self.rule_id = np.asarray(rule_id, dtype=object)
        self.slot = np.asarray(slot, dtype=object)
        self.value = np.asarray(value, dtype=float)
        self.missing = np.asarray(missing, dtype=bool)
        n = len(self.entity_id)
        self.applicable = (np.ones(n, dtype=bool) if applicable is None
                           else np.asarray(applicable, dtype=bool))
        for arr in (self.rule_id, self.slot, self.value, self.missing, self.applicable):
            if len(arr) != n:
                raise ValueError("SignalTable columns must have equal length")
        self._index = None

    def __len__(self):
        return len(self.entity_id)

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [])

    @classmethod
    def from_records(cls, records):
        """``records``: iterable of ``(entity_id, rule_id, slot, value_or_None)``."""
        ents, rules, slots, vals, miss = [], [], [], [], []
        for e, r, s, v in records:
            ents.append(e)
            rules.append(r)
            slots.append(s)
            miss.append(v is None)
            vals.append(np.nan if v is None else float(v))
        return cls(ents, rules, slots, vals, miss)

    def rows_for(self, rule_id, slot=PRIMARY_SLOT):
        """Row indices for one (rule, slot), cached after the first call."""
        if self._index is None:
            index = {}
            for i, key in enumerate(zip(self.rule_id, self.slot)):
                index.setdefault(key, []).append(i)
            self._index = {k: np.asarray(v, dtype=np.intp) for k, v in index.items()}
        return self._index.get((rule_id, slot), np.empty(0, dtype=np.intp))

    def copy(self):
        return SignalTable(self.entity_id.copy(), self.rule_id.copy(), self.slot.copy(),
                           self.value.copy(), self.missing.copy(), self.applicable.copy())

    def subset(self, mask):
        mask = np.asarray(mask)
        return SignalTable(self.entity_id[mask], self.rule_id[mask], self.slot[mask],
                           self.value[mask], self.missing[mask], self.applicable[mask])

    def drop_missing(self):
        return self.subset(~self.missing)

    def assign_applicability(self, entities, rules, rule_ids=None):
        """Recompute ``A_ji`` from entity attributes. Returns the number of
        entities scanned."""
        by_id = {e.id: e for e in entities}
        targets = rules if rule_ids is None else [r for r in rules if r.id in set(rule_ids)]
        for rule in targets:
            flags = {eid: applicability(e, rule) for eid, e in by_id.items()}
            for slot in self.slots_for(rule.id):
                rows = self.rows_for(rule.id, slot)
                self.applicable[rows] = [flags.get(e, False) for e in self.entity_id[rows]]
        return len(by_id)

    def slots_for(self, rule_id):
        self.rows_for(rule_id)  # build index
        return sorted({s for (r, s) in self._index if r == rule_id})

    def to_rows(self):
        for e, r, s, v, m in zip(self.entity_id, self.rule_id, self.slot, self.value,
                                 self.missing):
            yield e, r, s, None if m else float(v)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "rule_id", "slot", "value"])
            for e, r, s, v in self.to_rows():
                w.writerow([e, r, s, "" if v is None else repr(v)])

    @classmethod
    def read_csv(cls, path):
        records = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError("empty signal table; header row is mandatory",
                                 source=path) from None
            expected = ["entity_id", "rule_id", "slot", "value"]
            if [h.strip() for h in header] != expected:
                raise ParseError(f"header must be {','.join(expected)}", source=path, line=1)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise ParseError(f"expected 4 columns, got {len(row)}", source=path,
                                     line=lineno)
                raw = row[3].strip()
                if raw == "":
                    v = None
                else:
                    try:
                        v = float(raw)
                    except ValueError:
                        raise ParseError(f"value {raw!r} is not a number", path="value",
                                         source=path, line=lineno) from None
                records.append((row[0], row[1], row[2] or PRIMARY_SLOT, v))
        return cls.from_records(records)


@dataclass
class RuleSummary:
    rule_id: str
    n: int
    t_bar: float  # None when n == 0
    sum_sq: float
    missing_count: int
    clamped_count: int = 0

    @property
    def t_sum(self):
        return 0.0 if self.n == 0 else self.t_bar * self.n

    @property
    def applicable_count(self):
        return self.n + self.missing_count


@dataclass
class ObservationSummary:
    rules: list
    supplementary: dict = field(default_factory=dict)

    def __getitem__(self, i):
        return self.rules[i]

    def __len__(self):
        return len(self.rules)

    def by_id(self, rule_id):
        for s in self.rules:
            if s.rule_id == rule_id:
                return s
        raise UnknownRule(rule_id)

    def replace(self, index, rule_summary):
        rules = list(self.rules)
        rules[index] = rule_summary
        return ObservationSummary(rules, dict(self.supplementary))

    @property
    def n(self):
        return np.array([s.n for s in self.rules], dtype=float)


def _transform_rows(link, values, entity_ids, rule_id):
    clamped = np.zeros(len(values), dtype=bool)
    if link is LinkKind.LOGIT:
        values, clamped = clamp_ratio(values)
    ok = in_domain(link, values)
    if not np.all(ok):
        j = int(np.flatnonzero(~ok)[0])
        raise DomainError(f"value {values[j]!r} outside the {link.value} domain",
                          entity_id=entity_ids[j], rule_id=rule_id)
    return transform(link, values), clamped


def transform_signals(rule, values, entity_ids=None):
    """Raw signals on the rule's link scale (ratios are clamped first)."""
    values = np.asarray(values, dtype=float)
    ids = entity_ids if entity_ids is not None else [None] * len(values)
    return _transform_rows(rule.link, values, ids, rule.id)[0]


def summarize_rule(signals, rule, slot=PRIMARY_SLOT, threads=1):
    """Sufficient statistics for one rule; touches only that rule's rows."""
    rows = signals.rows_for(rule.id, slot)
    rows = rows[signals.applicable[rows]]
    miss = signals.missing[rows]
    obs = rows[~miss]
    vals = signals.value[obs]
    if threads > 1 and len(obs) > 1:
        chunks = np.array_split(np.arange(len(obs)), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(
                lambda c: _transform_rows(rule.link, vals[c], signals.entity_id[obs][c], rule.id),
                chunks))
        t = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
        clamped = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, bool)
    else:
        t, clamped = _transform_rows(rule.link, vals, signals.entity_id[obs], rule.id)
    n = len(t)
    # fsum is exactly rounded, so the result does not depend on row order or chunking
    t_bar = math.fsum(t) / n if n else None
    sum_sq = math.fsum(t * t) if n else 0.0
    return RuleSummary(rule.id, n, t_bar, sum_sq, int(miss.sum()), int(clamped.sum()))


def summarize(signals, rules, threads=1):
    """Per-rule ``(n_i, t_bar_i, sum_sq_i, missing_i)`` from the primary slot.

    Supplementary slots go into ``summary.supplementary`` for diagnostics;
    they never enter inference.
    """
    per_rule = [summarize_rule(signals, r, threads=threads) for r in rules]
    supplementary = {}
    for r in rules:
        for slot in signals.slots_for(r.id):
            if slot == PRIMARY_SLOT:
                continue
            supplementary[(r.id, slot)] = supplementary_diagnostics(signals, r.id, slot)
    return ObservationSummary(per_rule, supplementary)


def supplementary_diagnostics(signals, rule_id, slot):
    rows = signals.rows_for(rule_id, slot)
    rows = rows[signals.applicable[rows]]
    obs = rows[~signals.missing[rows]]
    vals = signals.value[obs]
    link = SUPPLEMENTARY_LINKS.get(slot, LinkKind.IDENTITY)
    out = {"slot": slot, "link": link.value, "n": int(len(obs)),
           "missing": int(len(rows) - len(obs))}
    if link is LinkKind.BERNOULLI_BETA:
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DomainError(f"binary slot {slot!r} holds non 0/1 values", rule_id=rule_id)
        a, b = binary_posterior(int(vals.sum()), len(vals))
        out.update(beta_alpha=a, beta_beta=b, posterior_mean=a / (a + b))
    elif len(vals):
        t, _ = _transform_rows(link, vals, signals.entity_id[obs], rule_id)
        out.update(mean=math.fsum(t) / len(t))
    return out


def estimate_obs_noise(summary, floor=1e-8):
    """Sample variance of the transformed signals per rule (``None`` if n < 2)."""
    out = []
    for s in summary.rules:
        if s.n < 2:
            out.append(None)
        else:
            out.append(max((s.sum_sq - s.n * s.t_bar ** 2) / (s.n - 1), floor))
    return out
