import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rulestate.datagen import benchmark_rules
from rulestate.errors import (DomainError, MissingAttribute, ParseError, UnknownRule,
                              ValidationError)
from rulestate.rules import (Applicability, Entity, ObservationSummary, SignalTable,
                             applicability, dump_rules, estimate_obs_noise, find_rule,
                             load_rules, parse_amount, read_entities, rules_hash, summarize,
                             summarize_rule, write_entities)

R1_BLOCK = """
[[rule]]
id = "R1"
name = "VAT"
link = "logit"
prior_activation = 0.92
prior_mean = 1.39
prior_var = 0.25
drift_var = 0.04
obs_noise = 0.10
background_var = 1.0

[rule.applicability]
attribute = "turnover"
comparator = ">="
threshold = "100M FCFA"
"""


def test_table_block_parses_into_rule():
    (r,) = load_rules(R1_BLOCK)
    assert (r.id, r.link.value) == ("R1", "logit")
    assert (r.prior_activation, r.prior_mean, r.prior_var, r.drift_var, r.obs_noise) == \
        (0.92, 1.39, 0.25, 0.04, 0.10)
    assert r.applicability.threshold == 100_000_000
    assert r.applicability.unit == "FCFA"
    assert r.legal_standard == 1.39


@pytest.mark.parametrize("field, value", [("prior_var", "0.0"), ("prior_activation", "1.0"),
                                          ("prior_activation", "0.0"), ("obs_noise", "-1.0")])
def test_invalid_hyperparameters_are_rejected(field, value):
    doc = R1_BLOCK.replace(f"{field} = ", f"{field} = {value} #", 1)
    with pytest.raises(ValidationError) as err:
        load_rules(doc, source="rules.toml")
    assert field in str(err.value)
    assert "rules.toml:" in str(err.value)


def test_missing_field_names_field_and_line():
    doc = R1_BLOCK.replace("prior_mean = 1.39\n", "")
    with pytest.raises(ParseError) as err:
        load_rules(doc, source="r.toml")
    assert "prior_mean" in str(err.value)
    assert err.value.line is not None


def test_unknown_field_and_duplicate_id():
    with pytest.raises(ParseError, match="colour"):
        load_rules(R1_BLOCK.replace('name = "VAT"', 'colour = "red"'))
    with pytest.raises(ValidationError, match="duplicate"):
        load_rules(R1_BLOCK + R1_BLOCK)


def test_threshold_needs_unit():
    with pytest.raises(ValidationError):
        load_rules(R1_BLOCK.replace('"100M FCFA"', '"100000000"'))


def test_toml_syntax_error_carries_line():
    with pytest.raises(ParseError) as err:
        load_rules(R1_BLOCK.replace("prior_mean = 1.39", "prior_mean = = 1.39"), source="x")
    assert err.value.line == 7


def test_dump_round_trip():
    rules = benchmark_rules()
    again = load_rules(dump_rules(rules))
    assert again == rules
    assert rules_hash(again) == rules_hash(rules)


@pytest.mark.parametrize("text, expected", [("100M FCFA", (100_000_000, "FCFA")),
                                            ("60000000 FCFA", (60_000_000, "FCFA")),
                                            ("1.5k units", (1500, "units"))])
def test_parse_amount(text, expected):
    assert parse_amount(text) == expected


def _vat(threshold=100_000_000):
    (r,) = load_rules(R1_BLOCK)
    return r.with_params(applicability=r.applicability.with_threshold(threshold))


@pytest.mark.parametrize("turnover, applies", [(120_000_000, True), (72_000_000, False),
                                               (100_000_000, True)])
def test_applicability_examples(turnover, applies):
    e = Entity("E1", "", {"turnover": turnover}, {"turnover": "FCFA"})
    assert applicability(e, _vat()) is applies


def test_applicability_errors():
    with pytest.raises(MissingAttribute):
        applicability(Entity("E1", "", {"employees": 3}), _vat())
    with pytest.raises(ValidationError, match="unit"):
        applicability(Entity("E1", "", {"turnover": 5}, {"turnover": "USD"}), _vat())


def test_comparator_must_be_known():
    with pytest.raises(ValidationError):
        Applicability("turnover", "!=", 1, "FCFA")


def test_summary_of_two_values():
    (r,) = load_rules(R1_BLOCK.replace('"logit"', '"identity"'))
    table = SignalTable.from_records([("A", "R1", "primary", 1.0), ("B", "R1", "primary", 3.0)])
    s = summarize_rule(table, r)
    assert (s.n, s.t_bar, s.sum_sq) == (2, 2.0, 10.0)


def test_all_missing_rule_has_no_mean():
    (r,) = load_rules(R1_BLOCK)
    table = SignalTable.from_records([("A", "R1", "primary", None), ("B", "R1", "primary", None)])
    s = summarize_rule(table, r)
    assert s.n == 0 and s.t_bar is None and s.missing_count == 2


def test_inapplicable_and_supplementary_rows_are_ignored():
    (r,) = load_rules(R1_BLOCK.replace('"logit"', '"identity"'))
    table = SignalTable.from_records([("A", "R1", "primary", 1.0), ("B", "R1", "primary", 5.0),
                                      ("A", "R1", "delay", 30.0)])
    table.applicable[1] = False
    summary = summarize(table, [r])
    assert summary[0].n == 1 and summary[0].t_bar == 1.0
    assert summary.supplementary[("R1", "delay")]["n"] == 1


def test_out_of_domain_signal_names_entity():
    (r,) = load_rules(R1_BLOCK.replace('"logit"', '"log"'))
    table = SignalTable.from_records([("A", "R1", "primary", 2.0), ("Z", "R1", "primary", -1.0)])
    with pytest.raises(DomainError) as err:
        summarize_rule(table, r)
    assert err.value.entity_id == "Z"


def test_boundary_ratios_are_clamped_and_counted():
    (r,) = load_rules(R1_BLOCK)
    table = SignalTable.from_records([("A", "R1", "primary", 0.0), ("B", "R1", "primary", 1.0)])
    s = summarize_rule(table, r)
    assert s.clamped_count == 2 and math.isfinite(s.t_bar)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=60), st.integers(1, 4))
def test_summary_does_not_depend_on_threads_or_order(values, threads):
    (r,) = load_rules(R1_BLOCK)
    recs = [(f"E{i}", "R1", "primary", v) for i, v in enumerate(values)]
    a = summarize_rule(SignalTable.from_records(recs), r)
    b = summarize_rule(SignalTable.from_records(recs[::-1]), r, threads=threads)
    assert a == b


def test_signal_csv_round_trip(tmp_path):
    table = SignalTable.from_records([("A", "R1", "primary", 0.25), ("B", "R1", "primary", None)])
    table.write_csv(tmp_path / "s.csv")
    back = SignalTable.read_csv(tmp_path / "s.csv")
    assert list(back.to_rows()) == list(table.to_rows())


def test_signal_csv_errors_name_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("entity_id,rule_id,slot,value\nA,R1,primary,0.5\nB,R1,primary,abc\n")
    with pytest.raises(ParseError) as err:
        SignalTable.read_csv(p)
    assert err.value.line == 3
    p.write_text("")
    with pytest.raises(ParseError, match="header"):
        SignalTable.read_csv(p)


def test_entities_round_trip(tmp_path):
    ents = [Entity("E1", "micro", {"turnover": 72_000_000, "employees": 2},
                   {"turnover": "FCFA", "employees": "persons"})]
    write_entities(ents, tmp_path / "e.csv")
    assert read_entities(tmp_path / "e.csv") == ents


def test_find_rule_and_summary_lookup():
    rules = benchmark_rules()
    assert find_rule(rules, "R3") == 2
    with pytest.raises(UnknownRule):
        find_rule(rules, "R9")
    summary = ObservationSummary([])
    with pytest.raises(UnknownRule):
        summary.by_id("R1")


def test_obs_noise_estimate():
    (r,) = load_rules(R1_BLOCK.replace('"logit"', '"identity"'))
    vals = np.random.default_rng(0).normal(0.0, 0.5, 5000)
    table = SignalTable.from_records([(f"E{i}", "R1", "primary", v) for i, v in enumerate(vals)])
    (est,) = estimate_obs_noise(summarize(table, [r]))
    assert est == pytest.approx(0.25, rel=0.05)
