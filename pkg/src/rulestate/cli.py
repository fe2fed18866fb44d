"""Command-line interface.

Every command writes its result files into ``--out-dir``. Output bodies
depend only on the inputs and the seed; wall times and timestamps go to a
``*.timing.json`` sidecar next to them.

Exit codes: 0 success, 1 input error, 2 non-convergence.
"""

import inspect
import json
import logging
import re
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adaptability import apply_update, load_updates
from .cavi import CaviConfig, fit, posterior_summary
from .datagen import GenConfig, generate, write_benchmark
from .errors import ConfigError, InsufficientData, ParseError, RuleStateError
from .estimator import read_state, save_state
from .experiments import EXPERIMENTS, RUNNERS, max_factor_diff, run_experiment
from .rules import (PRIMARY_SLOT, SignalTable, dump_rules, load_rules, read_entities,
                    summarize, transform_signals)
from .scoring import DEFAULT_THRESHOLD, score_entities
from .sequential import (DEFAULT_PROCESS_VAR, entity_filter, estimate_gamma_sq,
                         run_periods)

log = logging.getLogger("rulestate")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

_SECTIONS = {
    "cavi": {f.name for f in fields(CaviConfig)},
    "generate": {f.name for f in fields(GenConfig)},
    "scoring": {"threshold"},
    "sequential": {"q_sq", "gamma_sq", "drift"},
    "experiment": None,  # keyword arguments of the experiment runner
}


class NotConverged(Exception):
    """Raised after outputs are written when coordinate ascent hit ``max_iter``."""


# ---------------------------------------------------------------------------
# configuration


def _line_of(text, key):
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=|^\s*\[{re.escape(key)}\]")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return i
    return None


def load_config(path):
    """Read a TOML config with optional ``[cavi]``, ``[generate]``,
    ``[scoring]``, ``[sequential]`` and ``[experiment]`` tables."""
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), source=path, line=int(m.group(1)) if m else None) from None
    for section, body in data.items():
        if section not in _SECTIONS:
            raise ParseError(f"unknown section {section!r}", path=section, source=path,
                             line=_line_of(text, section))
        if not isinstance(body, dict):
            raise ParseError("expected a table", path=section, source=path,
                             line=_line_of(text, section))
        allowed = _SECTIONS[section]
        for key in body:
            if allowed is not None and key not in allowed:
                raise ParseError(f"unknown field {key!r}", path=f"{section}.{key}",
                                 source=path, line=_line_of(text, key))
    data["_source"] = str(path)
    data["_text"] = text
    return data


def _build(cls, settings, section, overrides=None):
    values = dict(settings.get(section, {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
    except (ConfigError, TypeError, ValueError) as exc:
        source = settings.get("_source")
        key = next(iter(values), section)
        line = _line_of(settings.get("_text", ""), key) if source else None
        raise ConfigError(f"{source}:{line}: [{section}] {exc}" if source else str(exc)) \
            from None


def cavi_config(settings, **overrides):
    return _build(CaviConfig, settings, "cavi", overrides)


def gen_config(settings, **overrides):
    return _build(GenConfig, settings, "generate", overrides)


# ---------------------------------------------------------------------------
# output helpers


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, body):
    with open(path, "w") as fh:
        json.dump(_plain(body), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_timing(out_dir, command, timings):
    body = {"command": command,
            "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_times": timings}
    write_json(Path(out_dir) / f"{command}.timing.json", body)


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,elbo\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v!r}\n")


class _EchoHandler(logging.Handler):
    """Writes to whatever stderr is current, not the one seen at setup."""

    def emit(self, record):
        click.echo(self.format(record), err=True)


def _configure_logging(verbose):
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    if not any(isinstance(h, _EchoHandler) for h in log.handlers):
        handler = _EchoHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    log.propagate = False


def _signals(path, rules, entities_path):
    table = SignalTable.read_csv(path)
    entities = None
    if entities_path is not None:
        entities = read_entities(entities_path)
        table.assign_applicability(entities, rules)
    return table, entities


def _threshold(value, settings):
    if value is not None:
        return value
    return settings.get("scoring", {}).get("threshold", DEFAULT_THRESHOLD)


# ---------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=None,
              help="Random seed for generation and experiments.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML file with [cavi], [generate], [scoring], "
                                 "[sequential] and [experiment] tables.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True,
              help="Directory for all output files.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads for building sufficient statistics.")
@click.option("--compare-refit", is_flag=True,
              help="With 'update': also refit from scratch and report the difference.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def cli(ctx, seed, config_path, out_dir, threads, compare_refit, verbose):
    """Population-level compliance monitoring from rule-governed signals."""
    _configure_logging(verbose)
    ctx.obj = {"seed": seed, "settings": load_config(config_path), "out_dir": Path(out_dir),
               "threads": threads, "compare_refit": compare_refit}
    Path(out_dir).mkdir(parents=True, exist_ok=True)


@cli.command()
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True),
              help="Rule document (TOML, one [[rule]] block per rule).")
@click.option("--signals", "signals_path", required=True, type=click.Path(exists=True),
              help="Signal table CSV: entity_id,rule_id,slot,value.")
@click.option("--entities", "entities_path", type=click.Path(exists=True), default=None,
              help="Entity attribute CSV; recomputes applicability when given.")
@click.option("--threshold", type=click.FloatRange(0.0, 1.0), default=None,
              help="Flagging threshold on the global score (default 0.5).")
@click.pass_obj
def infer(obj, rules_path, signals_path, entities_path, threshold):
    """Fit the posterior and write the posterior summary, trace, scores and state."""
    settings, out = obj["settings"], obj["out_dir"]
    threshold = _threshold(threshold, settings)
    config = cavi_config(settings)
    rules = load_rules(rules_path)
    signals, _ = _signals(signals_path, rules, entities_path)
    t0 = time.perf_counter()
    summary = summarize(signals, rules, threads=obj["threads"])
    state = fit(summary, rules, config)
    fit_time = time.perf_counter() - t0
    write_json(out / "posterior.json", posterior_summary(state, rules, summary).to_dict())
    write_trace(out / "elbo_trace.csv", state.elbo_trace)
    save_state(out / "state.json", state, rules, threshold)
    report = score_entities(signals, rules, state, threshold)
    report.write_csv(out / "scores.csv")
    report.write_json(out / "scores.json")
    write_timing(out, "infer", {"fit": fit_time})
    if not state.converged:
        raise NotConverged(f"no convergence after {state.iteration} iterations")


@cli.command()
@click.option("--state", "state_path", required=True, type=click.Path(exists=True),
              help="State document written by 'infer' or 'update'.")
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True),
              help="Rule document the state was fitted on.")
@click.option("--signals", "signals_path", required=True, type=click.Path(exists=True),
              help="Signal table to score.")
@click.option("--entities", "entities_path", type=click.Path(exists=True), default=None,
              help="Entity attribute CSV; recomputes applicability when given.")
@click.option("--threshold", type=click.FloatRange(0.0, 1.0), default=None,
              help="Flagging threshold (default: the one saved with the state).")
@click.pass_obj
def score(obj, state_path, rules_path, signals_path, entities_path, threshold):
    """Score entities against a saved state."""
    rules = load_rules(rules_path)
    state, saved = read_state(state_path, rules)
    threshold = saved if threshold is None else threshold
    signals, _ = _signals(signals_path, rules, entities_path)
    report = score_entities(signals, rules, state, threshold)
    report.write_csv(obj["out_dir"] / "scores.csv")
    report.write_json(obj["out_dir"] / "scores.json")


@cli.command()
@click.option("--state", "state_path", required=True, type=click.Path(exists=True),
              help="State document to update.")
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True),
              help="Rule document the state was fitted on.")
@click.option("--updates", "updates_path", required=True, type=click.Path(exists=True),
              help="Update document with one or more [[update]] blocks, applied in order.")
@click.option("--signals", "signals_path", required=True, type=click.Path(exists=True),
              help="Signal table the state was fitted on.")
@click.option("--entities", "entities_path", type=click.Path(exists=True), default=None,
              help="Entity attribute CSV; required for applicability updates.")
@click.option("--no-reconverge", is_flag=True,
              help="Stop after the local step instead of iterating to convergence.")
@click.pass_obj
def update(obj, state_path, rules_path, updates_path, signals_path, entities_path,
           no_reconverge):
    """Absorb regulatory amendments incrementally and report the cost ledger."""
    out, settings = obj["out_dir"], obj["settings"]
    config = cavi_config(settings)
    rules = load_rules(rules_path)
    state, threshold = read_state(state_path, rules)
    signals, entities = _signals(signals_path, rules, entities_path)
    summary = summarize(signals, rules, threads=obj["threads"])
    steps, timings = [], []
    for u in load_updates(updates_path):
        log.info("applying %s update to rule %s", u.kind, u.rule_id)
        res = apply_update(state, u, signals, rules, summary=summary, entities=entities,
                           config=config, reconverge=not no_reconverge)
        ledger = res.local.to_dict()
        timings.append({"local_step": ledger.pop("wall_time"),
                        "reconverge": res.reconverge_time})
        steps.append({"update": u.to_dict(), "ledger": ledger,
                      "reconverge_iterations": res.reconverge_iterations,
                      "converged": bool(res.state.converged),
                      "flipped_entities": len(res.flipped)})
        state, rules, signals, summary = res.state, res.rules, res.signals, res.summary
    report = {"updates": steps}
    sidecar = {"updates": timings}
    if obj["compare_refit"]:
        t0 = time.perf_counter()
        refit = fit(summarize(signals, rules, threads=obj["threads"]), rules, config)
        sidecar["refit"] = time.perf_counter() - t0
        report["refit"] = {"max_abs_diff": max_factor_diff(state, refit),
                           "iterations": refit.iteration, "converged": bool(refit.converged)}
    save_state(out / "state.json", state, rules, threshold)
    (out / "rules.toml").write_text(dump_rules(rules))
    write_json(out / "posterior.json", posterior_summary(state, rules, summary).to_dict())
    write_json(out / "update_report.json", report)
    write_timing(out, "update", sidecar)
    if not no_reconverge and not state.converged:
        raise NotConverged("re-convergence did not finish within max_iter")


@cli.command()
@click.argument("experiment_id", type=click.Choice(EXPERIMENTS))
@click.option("-J", "--population", type=click.IntRange(min=1), default=None,
              help="Number of generated entities (where the experiment uses the benchmark).")
@click.pass_obj
def experiment(obj, experiment_id, population):
    """Run one experiment (1-7 or 'sensitivity') and write its report."""
    settings = obj["settings"]
    kwargs = dict(settings.get("experiment", {}))
    params = inspect.signature(RUNNERS[experiment_id]).parameters
    if population is not None:
        kwargs["J"] = population
    if obj["seed"] is not None:
        kwargs["seed"] = obj["seed"]
    if "cavi" in settings:
        kwargs["config"] = cavi_config(settings)
    unknown = sorted(set(kwargs) - set(params))
    if unknown:
        raise ConfigError(f"experiment {experiment_id} does not take {', '.join(unknown)}")
    for k, v in kwargs.items():
        if isinstance(v, list) and k not in ("seeds",):
            kwargs[k] = tuple(v)
    if "seeds" in kwargs and isinstance(kwargs["seeds"], int):
        kwargs["seeds"] = range(kwargs["seeds"])
    report = run_experiment(experiment_id, **kwargs)
    report.write(obj["out_dir"])


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True),
              help="Period manifest: [[period]] blocks with label, signals and optional updates.")
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True),
              help="Rule document in force at the first period.")
@click.option("--entities", "entities_path", type=click.Path(exists=True), default=None,
              help="Entity attribute CSV; recomputes applicability per period.")
@click.option("--q-sq", type=click.FloatRange(min=0.0), default=None,
              help=f"Process variance of the random walk (default {DEFAULT_PROCESS_VAR}).")
@click.option("--entity-trajectories", is_flag=True,
              help="Also write per-entity trajectories with mean and SD per period.")
@click.option("--gamma-sq", type=click.FloatRange(min=0.0, min_open=True), default=None,
              help="Between-entity variance; estimated from the data when omitted.")
@click.pass_obj
def sequential(obj, manifest_path, rules_path, entities_path, q_sq, entity_trajectories,
               gamma_sq):
    """Filter compliance trajectories across the periods of a manifest."""
    out, settings = obj["out_dir"], obj["settings"].get("sequential", {})
    q_sq = settings.get("q_sq", DEFAULT_PROCESS_VAR) if q_sq is None else q_sq
    gamma_sq = settings.get("gamma_sq") if gamma_sq is None else gamma_sq
    rules = load_rules(rules_path)
    entities = read_entities(entities_path) if entities_path else None
    periods, updates = read_manifest(manifest_path)
    events = []
    for label, ups in updates.items():
        for u in ups:
            log.info("period %s: %s update to rule %s before the predict step",
                     label, u.kind, u.rule_id)
            events.append({"period": label, **u.to_dict()})
    states, in_force = run_periods(periods, rules, entities, q_sq, updates,
                                   drift=settings.get("drift", True))
    write_json(out / "trajectories.json",
               {"q_sq": q_sq, "events": events,
                "rules": {rid: st.to_dict() for rid, st in states.items()}})
    with open(out / "trajectories.csv", "w") as fh:
        fh.write("rule_id,period,n,t_bar,m_pred,sd_pred,m_filt,sd_filt,m_drift\n")
        for rid, st in states.items():
            for t, label in enumerate(st.periods):
                cells = [st.t_bar[t], st.m_pred[t], np.sqrt(st.v_pred[t]), st.m_filt[t],
                         np.sqrt(st.v_filt[t]), st.m_drift[t]]
                fh.write(",".join([rid, label, str(int(st.n[t]))] + [_num(c) for c in cells])
                         + "\n")
    if entity_trajectories:
        _entity_trajectories(out, periods, in_force, states, gamma_sq)


def _num(v):
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


def read_manifest(path):
    """``([(label, SignalTable)], {label: [RegulatoryUpdate]})``; paths are
    relative to the manifest."""
    path = Path(path)
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), source=path, line=int(m.group(1)) if m else None) from None
    blocks = data.get("period")
    if not isinstance(blocks, list) or not blocks:
        raise ParseError("manifest has no [[period]] blocks", path="period", source=path)
    periods, updates = [], {}
    for idx, block in enumerate(blocks):
        for key in ("label", "signals"):
            if key not in block:
                raise ParseError(f"missing required field {key!r}", path=f"period[{idx}].{key}",
                                 source=path)
        label = str(block["label"])
        periods.append((label, SignalTable.read_csv(path.parent / block["signals"])))
        if "updates" in block:
            updates[label] = load_updates(path.parent / block["updates"])
    return periods, updates


def _entity_trajectories(out, periods, in_force, states, gamma_sq):
    rule_ids = list(states)
    labels = [label for label, _ in periods]
    obs = {}  # (rule, entity) -> per-period transformed values
    for t, (_, table) in enumerate(periods):
        for i, rid in enumerate(rule_ids):
            rule = in_force[t][i]
            rows = table.rows_for(rid, PRIMARY_SLOT)
            rows = rows[table.applicable[rows] & ~table.missing[rows]]
            if not len(rows):
                continue
            vals = transform_signals(rule, table.value[rows], table.entity_id[rows])
            for e, v in zip(table.entity_id[rows], np.atleast_1d(vals)):
                obs.setdefault((rid, e), [np.nan] * len(labels))[t] = float(v)
    with open(out / "entity_trajectories.csv", "w") as fh:
        fh.write("rule_id,entity_id,period,mean,sd,lower,upper,observed\n")
        for rid in rule_ids:
            pop = states[rid]
            level = pop.m_filt + pop.m_drift
            mine = {e: v for (r, e), v in obs.items() if r == rid}
            g = gamma_sq
            if g is None:
                resid = {e: np.asarray(v) - level for e, v in mine.items()}
                try:
                    g = estimate_gamma_sq(resid)
                except InsufficientData:
                    log.warning("rule %s: too few repeated entities to estimate gamma^2; "
                                "skipped", rid)
                    continue
            for e in sorted(mine, key=str):
                tr = entity_filter(mine[e], pop, g, entity_id=e)
                for t, label in enumerate(labels):
                    m, sd = tr.mean[t], np.sqrt(tr.var[t])
                    cells = [_num(x) for x in (m, sd, m - 2 * sd, m + 2 * sd)]
                    fh.write(",".join([rid, e, label, *cells, str(int(tr.observed[t]))]) + "\n")


@cli.command("generate")
@click.option("-J", "--population", type=click.IntRange(min=1), default=None,
              help="Number of entities (default 2000).")
@click.option("--missing-mode", type=click.Choice(["MCAR", "MNAR"]), default=None,
              help="Missingness mechanism (default MCAR).")
@click.pass_obj
def generate_cmd(obj, population, missing_mode):
    """Write the synthetic benchmark: rules, entities, signals per period, updates, truth."""
    config = gen_config(obj["settings"], J=population, seed=obj["seed"],
                        missing_mode=missing_mode)
    t0 = time.perf_counter()
    bench = generate(config)
    write_benchmark(bench, obj["out_dir"])
    write_timing(obj["out_dir"], "generate", {"generate": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# entry point


def main(argv=None):
    """Console entry point; maps failures onto the documented exit codes."""
    try:
        cli.main(args=argv, prog_name="rulestate", standalone_mode=False)
    except NotConverged as exc:
        click.echo(f"warning: {exc}", err=True)
        return EXIT_NOT_CONVERGED
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except (RuleStateError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
