import csv
import json
import math

import pytest

from rulestate.cli import main
from rulestate.experiments import monotonicity_violations
from rulestate.rules import load_rules

SUBCOMMANDS = ("infer", "score", "update", "experiment", "sequential", "generate")


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["--seed", "5", "--out-dir", str(out), "generate", "-J", "300"]) == 0
    return out


@pytest.fixture(scope="module")
def inferred(bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("infer")
    code = main(["--out-dir", str(out), "infer", "--rules", str(bench_dir / "rules.toml"),
                 "--signals", str(bench_dir / "signals_2024.csv"),
                 "--entities", str(bench_dir / "entities.csv")])
    assert code == 0
    return out


def read_trace(path):
    with open(path) as fh:
        return [float(r["elbo"]) for r in csv.DictReader(fh)]


def test_generate_writes_benchmark(bench_dir):
    for name in ("rules.toml", "entities.csv", "manifest.toml", "truth.csv", "metadata.json",
                 "signals_2025.csv", "updates_2025.toml", "generate.timing.json"):
        assert (bench_dir / name).exists()


def test_infer_outputs(inferred):
    for name in ("posterior.json", "elbo_trace.csv", "state.json", "scores.csv",
                 "scores.json", "infer.timing.json"):
        assert (inferred / name).exists()
    post = json.loads((inferred / "posterior.json").read_text())
    assert post["converged"] and len(post["rules"]) == 5
    assert monotonicity_violations(read_trace(inferred / "elbo_trace.csv")) == []


def test_score_from_saved_state(bench_dir, inferred, tmp_path):
    code = main(["--out-dir", str(tmp_path), "score", "--state", str(inferred / "state.json"),
                 "--rules", str(bench_dir / "rules.toml"),
                 "--signals", str(bench_dir / "signals_2024.csv"),
                 "--entities", str(bench_dir / "entities.csv")])
    assert code == 0
    assert (tmp_path / "scores.csv").read_bytes() == (inferred / "scores.csv").read_bytes()


def test_malformed_rule_names_the_field(bench_dir, tmp_path, capsys):
    bad = tmp_path / "rules.toml"
    text = (bench_dir / "rules.toml").read_text()
    bad.write_text(text.replace("prior_activation = 0.92", "prior_activation = 2", 1))
    code = main(["--out-dir", str(tmp_path), "infer", "--rules", str(bad),
                 "--signals", str(bench_dir / "signals_2024.csv")])
    assert code == 1
    err = capsys.readouterr().err
    assert "prior_activation" in err and "rules.toml:5" in err


def test_empty_signals_give_the_prior(bench_dir, tmp_path):
    signals = tmp_path / "signals.csv"
    signals.write_text("entity_id,rule_id,slot,value\n")
    code = main(["--out-dir", str(tmp_path), "infer", "--rules", str(bench_dir / "rules.toml"),
                 "--signals", str(signals)])
    assert code == 0
    post = json.loads((tmp_path / "posterior.json").read_text())
    for row, rule in zip(post["rules"], load_rules(bench_dir / "rules.toml")):
        assert row["m_phi"] == pytest.approx(rule.prior_mean, abs=1e-12)
        assert row["sd_phi"] == pytest.approx(math.sqrt(rule.prior_var), abs=1e-12)
        assert row["activation"] == pytest.approx(rule.prior_activation, abs=1e-12)


def run_update(bench_dir, inferred, out, updates, *extra):
    return main(["--out-dir", str(out), *extra, "update",
                 "--state", str(inferred / "state.json"),
                 "--rules", str(bench_dir / "rules.toml"), "--updates", str(updates),
                 "--signals", str(bench_dir / "signals_2024.csv"),
                 "--entities", str(bench_dir / "entities.csv")])


def test_update_with_refit_comparison(bench_dir, inferred, tmp_path):
    code = run_update(bench_dir, inferred, tmp_path, bench_dir / "updates_2025.toml",
                      "--compare-refit")
    assert code == 0
    report = json.loads((tmp_path / "update_report.json").read_text())
    ledger = report["updates"][0]["ledger"]
    assert ledger["rules_written"] == ["R1"] and ledger["eta_sum_terms"] == 5
    assert "wall_time" not in ledger
    assert report["refit"]["max_abs_diff"] < 1e-6
    assert load_rules(tmp_path / "rules.toml")[0].applicability.threshold == 100_000_000


def test_noop_update(bench_dir, inferred, tmp_path):
    upd = tmp_path / "noop.toml"
    upd.write_text('[[update]]\nrule_id = "R1"\nkind = "applicability"\n'
                   'threshold = "60000000 FCFA"\n')
    assert run_update(bench_dir, inferred, tmp_path, upd) == 0
    before = json.loads((inferred / "posterior.json").read_text())
    after = json.loads((tmp_path / "posterior.json").read_text())
    for a, b in zip(before["rules"], after["rules"]):
        for k in ("m_phi", "sd_phi", "m_delta", "activation"):
            assert abs(a[k] - b[k]) <= 1e-12


def test_sequential_logs_change_event(bench_dir, tmp_path, capsys):
    code = main(["-v", "--out-dir", str(tmp_path), "sequential",
                 "--manifest", str(bench_dir / "manifest.toml"),
                 "--rules", str(bench_dir / "rules.toml"),
                 "--entities", str(bench_dir / "entities.csv"), "--entity-trajectories"])
    assert code == 0
    traj = json.loads((tmp_path / "trajectories.json").read_text())
    assert traj["events"][0]["period"] == "2025"
    assert "before the predict step" in capsys.readouterr().err
    with open(tmp_path / "trajectories.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * 4
    assert (tmp_path / "entity_trajectories.csv").exists()


def test_sequential_single_period(bench_dir, tmp_path):
    manifest = tmp_path / "one.toml"
    manifest.write_text(f'[[period]]\nlabel = "2024"\nsignals = '
                        f'"{bench_dir / "signals_2024.csv"}"\n')
    code = main(["--out-dir", str(tmp_path), "sequential", "--manifest", str(manifest),
                 "--rules", str(bench_dir / "rules.toml")])
    assert code == 0
    traj = json.loads((tmp_path / "trajectories.json").read_text())
    assert all(len(r["m_filt"]) == 1 for r in traj["rules"].values())


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help(name, capsys):
    assert main([name, "--help"]) == 0
    assert "Usage" in capsys.readouterr().out


def test_unknown_flag_and_bad_config(tmp_path, bench_dir):
    assert main(["infer", "--bogus"]) == 1
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[cavi]\nfoo = 1\n")
    assert main(["--config", str(cfg), "generate", "-J", "10"]) == 1
    assert main(["experiment", "42"]) == 1


def test_non_convergence_exit_code(bench_dir, tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[cavi]\nmax_iter = 1\n")
    code = main(["--config", str(cfg), "--out-dir", str(tmp_path), "infer",
                 "--rules", str(bench_dir / "rules.toml"),
                 "--signals", str(bench_dir / "signals_2024.csv")])
    assert code == 2


def test_experiment_writes_report(tmp_path):
    assert main(["--seed", "3", "--out-dir", str(tmp_path), "experiment", "6", "-J", "300"]) == 0
    report = json.loads((tmp_path / "experiment_6.json").read_text())
    assert report["experiment"] == "6" and report["elbo_trace"]
    assert (tmp_path / "experiment_6.timing.json").exists()
