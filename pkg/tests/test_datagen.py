import filecmp
import math

import numpy as np
import pytest

from rulestate.datagen import (ChangeEvent, GenConfig, apply_change_event, apply_mcar,
                               apply_mnar, benchmark_rules, generate, write_benchmark)
from rulestate.errors import ConfigError, UnknownRule
from rulestate.rules import PRIMARY_SLOT, Entity, load_rules


def primary_missing(table):
    rows = np.flatnonzero((table.slot == PRIMARY_SLOT) & table.applicable)
    return table.missing[rows].mean(), rows


@pytest.fixture(scope="module")
def default_bench():
    return generate(GenConfig(seed=3))


def test_defaults(default_bench):
    b = default_bench
    assert len(b.entities) == 2000 and len(b.rules) == 5
    for _, table in b.tables:
        frac, _ = primary_missing(table)
        assert 0.18 <= frac <= 0.20


def test_mean_ratio_target(default_bench):
    table = default_bench.table("2024")
    rows = np.flatnonzero(table.slot == PRIMARY_SLOT)
    assert abs(table.value[rows].mean() - 0.70) < 0.02


def test_no_missingness_gives_complete_table():
    b = generate(GenConfig(J=300, p_miss=0.0, seed=1))
    assert all(not t.missing.any() for _, t in b.tables)


def test_same_seed_same_bytes(tmp_path):
    cfg = GenConfig(J=200, seed=9)
    a, b = tmp_path / "a", tmp_path / "b"
    write_benchmark(generate(cfg), a)
    write_benchmark(generate(cfg), b)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_written_rules_reload(tmp_path):
    bench = generate(GenConfig(J=100, seed=2))
    write_benchmark(bench, tmp_path)
    assert load_rules(tmp_path / "rules.toml") == bench.rules


def test_change_band():
    def firm(eid, turnover):
        return Entity(eid, "formal-sme", {"turnover": turnover}, {"turnover": "FCFA"})

    ents = [firm("a", 72_000_000), firm("b", 120_000_000), firm("c", 59_000_000)]
    flipped = apply_change_event(ents, benchmark_rules(),
                                 ChangeEvent("R1", 60_000_000, 100_000_000, "2025"))
    assert flipped == {"a"}


def test_change_event_in_generated_periods(default_bench):
    b = default_bench
    assert b.rules_for("2024")[0].applicability.threshold == 60_000_000
    assert b.rules_for("2025")[0].applicability.threshold == 100_000_000
    band = b.changed_entities()
    assert band
    t24, t25 = b.table("2024"), b.table("2025")
    for t, expect in ((t24, True), (t25, False)):
        rows = t.rows_for("R1", PRIMARY_SLOT)
        in_band = np.isin(t.entity_id[rows], list(band))
        assert np.all(t.applicable[rows][in_band] == expect)


def test_mcar_edge_rates(default_bench):
    table = default_bench.table("2024").copy()
    table.missing[:] = False
    rng = np.random.default_rng(0)
    assert primary_missing(apply_mcar(table, 0.0, rng))[0] == 0.0
    assert primary_missing(apply_mcar(table, 1.0, rng))[0] == 1.0


def test_mnar_rates_follow_labels(default_bench):
    b = default_bench
    table = b.table("2024").copy()
    table.missing[:] = False
    out = apply_mnar(table, b.truth.labels, 0.4, 0.0, seed=4)
    rows = np.flatnonzero(out.slot == PRIMARY_SLOT)
    bad = np.array([b.truth.labels[(out.entity_id[i], out.rule_id[i])] for i in rows], bool)
    assert not out.missing[rows[~bad]].any()
    n_nc = bad.sum()
    assert abs(out.missing[rows[bad]].mean() - 0.4) <= 3 * math.sqrt(0.24 / n_nc)
    for p in (1.0, 0.0):
        full = apply_mnar(table, b.truth.labels, p, p, seed=1)
        assert full.missing[rows].mean() == p


def test_config_errors():
    with pytest.raises(ConfigError):
        GenConfig(J=0)
    with pytest.raises(ConfigError):
        GenConfig(p_miss=1.5)
    with pytest.raises(ConfigError):
        GenConfig(missing_mode="MAR")
    with pytest.raises(ConfigError):
        GenConfig(change_event=ChangeEvent("R1", 1, 2, "1999"))
    with pytest.raises(UnknownRule):
        generate(GenConfig(J=10, change_event=ChangeEvent("R9", 1, 2, "2025")))


def test_config_round_trip():
    cfg = GenConfig(J=50, missing_mode="MNAR", periods=("a", "b"),
                    change_event=ChangeEvent("R1", 1, 2, "b"))
    assert GenConfig.from_dict(cfg.to_dict()) == cfg


def test_truth_records(default_bench):
    t = default_bench.truth
    assert set(t.psi) == {r.id for r in default_bench.rules}
    assert all(t.phi[k] == t.psi[k] - t.delta[k] for k in t.psi)
    assert set(t.entity_labels.values()) <= {0, 1}
