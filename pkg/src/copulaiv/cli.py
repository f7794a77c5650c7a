"""Command-line front end: estimation runs, simulation with truth files,
Monte Carlo coverage studies, and assumption checks.

Configuration is a single JSON document; command-line flags override the
matching entries and the effective configuration is echoed into a manifest
(with its SHA-256 hash, the seed, and the package version) so any run can
be replayed exactly.  Exit codes: 0 success, 2 configuration error,
3 assumption failure, 4 numerical failure.
"""

import csv
import hashlib
import json
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from .dgp import (Dataset, outcome_from_config, selection_from_config,
                  simulate)
from .dr import BasisSpec
from .functionals import asf_bias_bound, marginalize, summary_table
from .ident import AssumptionError, WeakInstrumentError, check_assumptions
from .infer import (DEFAULT_B, EMPIRICAL, MULTIPLIER, bootstrap_bands,
                    coverage_study, make_qte_pipeline)

EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_NUMERICAL = 4

KINDS = ("binary", "ordered", "continuous", "exogenous")
REQUESTS = ("qsf", "qte", "asf", "ate")
_NA_TOKENS = {"", "na", "nan", "null", "none"}
# minimum probit-index contrast between instrument arms before the
# instrument is reported as irrelevant
WEAK_GAP = 1e-4


class ConfigError(Exception):
    """Invalid configuration, data layout, or column contents."""


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(body):
    try:
        body()
    except ConfigError as err:
        _fail(EXIT_CONFIG, str(err))
    except (WeakInstrumentError, AssumptionError) as err:
        _fail(EXIT_ASSUMPTION, str(err))
    except (ValueError, RuntimeError, ArithmeticError,
            np.linalg.LinAlgError) as err:
        _fail(EXIT_NUMERICAL, str(err))


# -------------------------------------------------------------- plumbing

def _version():
    try:
        return metadata.version("copulaiv")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _write_manifest(outdir, command, config, seed):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"),
                       default=_plain)
    _write_json(outdir / "manifest.json", {
        "command": command,
        "version": _version(),
        "seed": None if seed is None else int(seed),
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "config": json.loads(canon),
    })


def _load_config(path):
    if path is None:
        raise ConfigError("--config is required")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _outdir(settings):
    out = Path(settings.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------- data loading

def _load_dataset(path, columns):
    """Strict CSV reader: header required, every requested cell numeric,
    NA cells rejected, parse failures reported with their line number."""
    if path is None:
        raise ConfigError("no input file given (config `input` or --input)")
    roles = [("y", columns.get("y", "y")), ("d", columns.get("d", "d")),
             ("z", columns.get("z", "z"))]
    covariates = list(columns.get("covariates", []))
    wanted = roles + [("x", name) for name in covariates]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path} is empty; a header row is required")
        header = [h.strip() for h in header]
        missing = [name for _, name in wanted if name not in header]
        if missing:
            raise ConfigError(
                f"missing columns in {path}: {', '.join(missing)}")
        pos = {name: header.index(name) for _, name in wanted}
        parsed = {name: [] for _, name in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path} line {lineno}: expected {len(header)} fields, "
                    f"got {len(row)}")
            for _, name in wanted:
                cell = row[pos[name]].strip()
                if cell.lower() in _NA_TOKENS:
                    raise ConfigError(
                        f"{path} line {lineno}: missing value in column "
                        f"'{name}'")
                try:
                    parsed[name].append(float(cell))
                except ValueError:
                    raise ConfigError(
                        f"{path} line {lineno}: could not parse '{cell}' "
                        f"in column '{name}'") from None
    if not parsed[roles[0][1]]:
        raise ConfigError(f"{path} contains a header but no data rows")
    zname = roles[2][1]
    zvals = np.asarray(parsed[zname])
    if not np.isin(zvals, (0.0, 1.0)).all():
        found = sorted(set(zvals.tolist()))
        raise ConfigError(
            f"instrument column '{zname}' must be binary 0/1; found "
            f"values {found}")
    x = None
    if covariates:
        x = np.column_stack([parsed[name] for name in covariates])
    return Dataset(y=np.asarray(parsed[roles[0][1]]),
                   d=np.asarray(parsed[roles[1][1]]),
                   z=zvals.astype(int), x=x)


def _check_kind(kind, d):
    if kind not in KINDS:
        raise ConfigError(f"treatment kind must be one of {KINDS}")
    levels = np.unique(d)
    if kind == "binary":
        if not np.isin(levels, (0.0, 1.0)).all():
            raise ConfigError(
                "binary treatment must take values 0/1; found "
                f"{levels.size} distinct values")
    elif kind == "ordered":
        if levels.size > 20:
            click.echo(
                f"warning: ordered treatment with {levels.size} distinct "
                "values; consider kind=continuous", err=True)
    elif levels.size < 20:
        click.echo(
            f"warning: treatment kind '{kind}' with only {levels.size} "
            "distinct values; consider a discrete kind", err=True)


# ---------------------------------------------------------- config pieces

def _merge_flags(cfg, input_path, output_dir, seed, threads, bootstrap_b,
                 alpha):
    merged = dict(cfg)
    if input_path is not None:
        merged["input"] = input_path
    if output_dir is not None:
        merged["output_dir"] = output_dir
    boot = dict(merged.get("bootstrap", {}))
    if seed is not None:
        boot["seed"] = seed
    if bootstrap_b is not None:
        boot["B"] = bootstrap_b
    if alpha is not None:
        boot["alpha"] = alpha
    if threads is not None:
        boot["threads"] = threads
    boot.setdefault("scheme", MULTIPLIER)
    boot.setdefault("B", DEFAULT_B)
    boot.setdefault("alpha", 0.1)
    boot.setdefault("seed", 0)
    boot.setdefault("threads", 1)
    merged["bootstrap"] = boot
    if boot["scheme"] not in (EMPIRICAL, MULTIPLIER):
        raise ConfigError(
            f"bootstrap scheme must be {EMPIRICAL} or {MULTIPLIER}")
    if not 0.0 < float(boot["alpha"]) < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if int(boot["B"]) < 100:
        raise ConfigError("bootstrap B must be at least 100")
    return merged


def _functional_settings(cfg):
    fun = dict(cfg.get("functionals", {}))
    taus = [float(t) for t in fun.get("taus", (0.25, 0.5, 0.75))]
    if not taus or any(not 0.0 < t < 1.0 for t in taus):
        raise ConfigError("every tau must lie strictly inside (0, 1)")
    requests = list(fun.get("requests", REQUESTS))
    unknown = [r for r in requests if r not in REQUESTS]
    if unknown:
        raise ConfigError(f"unknown functional requests: {unknown}")
    pairs = fun.get("pairs")
    if pairs is not None:
        pairs = [(float(hi), float(lo)) for hi, lo in pairs]
    return taus, requests, pairs


def _build_grid(gcfg, ds):
    if not gcfg:
        return None
    count = int(gcfg.get("count", 21))
    lo, hi = (float(v) for v in gcfg.get("trim", (0.05, 0.95)))
    if count < 3:
        raise ConfigError("grid count must be at least 3")
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError("grid trim quantiles must satisfy 0 < lo < hi < 1")
    return np.unique(np.quantile(ds.y, np.linspace(lo, hi, count)))


def _basis(cfg):
    spec = cfg.get("basis")
    if spec is None:
        return None
    try:
        return BasisSpec.from_config(spec)
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"invalid basis spec: {err}") from None


def _law_pair(cfg):
    try:
        outcome = outcome_from_config(cfg["outcome"])
        selection = selection_from_config(cfg["selection"])
    except KeyError as err:
        raise ConfigError(f"simulation config needs key {err}") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid simulation law: {err}") from None
    return outcome, selection


# ----------------------------------------------------------- diagnostics

def _relevance_levels(kind, d):
    levels = np.unique(d)
    if kind in ("binary", "ordered") or levels.size <= 10:
        return levels[:-1] if levels.size > 1 else levels
    return np.unique(np.quantile(d, np.linspace(0.1, 0.9, 9)))


def _relevance_report(kind, ds):
    levels = _relevance_levels(kind, ds.d)
    f0 = np.array([np.mean(ds.d[ds.z == 0] <= lev) for lev in levels])
    f1 = np.array([np.mean(ds.d[ds.z == 1] <= lev) for lev in levels])
    rep = check_assumptions(f0, f1)
    gap = rep["rel_min_gap"]
    return {
        "levels": levels,
        "contrasts": rep["rel_contrasts"],
        "min_index_gap": float(gap) if np.isfinite(gap) else None,
        "dominance_direction": rep["dominance_direction"],
        "dominance_violations": rep["dominance_violations"],
    }


def _diagnostics(fit, marg, band, relevance):
    return {
        "instrument": relevance,
        "flagged_grid_points": {str(lev): list(fit.flagged_points(lev))
                                for lev in fit.d_levels},
        "marginal": dict(marg.diagnostics),
        "asf_bias_bound": {str(lev): asf_bias_bound(marg, lev)
                           for lev in marg.d_levels},
        "bootstrap": dict(band.meta),
        "zero_se_points": list(band.excluded),
    }


# ---------------------------------------------------------- truth payload

def _truth_levels(outcome, pair):
    if outcome.levels is not None:
        return [float(lev) for lev in sorted(outcome.levels)]
    return sorted({float(pair[0]), float(pair[1])})


def _truth_payload(outcome, tcfg):
    pair = tcfg.get("pair")
    if pair is None:
        if outcome.levels is not None:
            levs = sorted(outcome.levels)
            pair = [float(levs[-1]), float(levs[0])]
        else:
            pair = [1.0, 0.0]
    d_hi, d_lo = float(pair[0]), float(pair[1])
    if abs(d_hi - d_lo) <= 1e-12:
        raise ConfigError("truth pair levels must differ")
    taus = [float(t) for t in tcfg.get("taus", (0.25, 0.5, 0.75))]
    if any(not 0.0 < t < 1.0 for t in taus):
        raise ConfigError("every truth tau must lie strictly inside (0, 1)")
    points = int(tcfg.get("y_points", 41))
    levels = _truth_levels(outcome, pair)
    margs = {lev: outcome.marginal(lev) for lev in levels}
    lo = min(float(m.ppf(0.005)) for m in margs.values())
    hi = max(float(m.ppf(0.995)) for m in margs.values())
    y_grid = np.linspace(lo, hi, points)
    qsf_hi = np.array([float(margs[d_hi].ppf(t)) for t in taus])
    qsf_lo = np.array([float(margs[d_lo].ppf(t)) for t in taus])
    return {
        "y_grid": y_grid,
        "levels": levels,
        "f": {str(lev): np.asarray(margs[lev].cdf(y_grid), dtype=float)
              for lev in levels},
        "rho": {str(lev): np.array([outcome.rho(lev, y) for y in y_grid])
                for lev in levels},
        "taus": taus,
        "qsf": {str(lev): np.array([float(margs[lev].ppf(t))
                                    for t in taus]) for lev in levels},
        "pair": [d_hi, d_lo],
        "qte": (qsf_hi - qsf_lo) / (d_hi - d_lo),
    }


# ------------------------------------------------------------- commands

def _cmd_estimate(config_path, input_path, output_dir, seed, threads,
                  bootstrap_b, alpha):
    cfg = _merge_flags(_load_config(config_path), input_path, output_dir,
                       seed, threads, bootstrap_b, alpha)
    kind = cfg.get("kind")
    if kind is None:
        raise ConfigError("config must set the treatment `kind`")
    ds = _load_dataset(cfg.get("input"), cfg.get("columns", {}))
    _check_kind(kind, ds.d)
    taus, requests, pairs = _functional_settings(cfg)
    basis = _basis(cfg)
    grid = _build_grid(cfg.get("grid"), ds)
    boot = cfg["bootstrap"]
    pair = pairs[0] if pairs else None

    pipeline, u = make_qte_pipeline(ds, kind, taus=taus, pair=pair,
                                    basis=basis, grid=grid)
    band = bootstrap_bands(ds, pipeline, B=int(boot["B"]),
                           scheme=boot["scheme"],
                           seed=int(boot["seed"]),
                           alpha=float(boot["alpha"]), u=u,
                           threads=int(boot["threads"]))
    fit = pipeline.full_fit
    marg = marginalize(fit)
    table = summary_table(marg, taus=taus, pairs=pairs)
    table = table[table["parameter"].isin(requests)]

    outdir = _outdir(cfg)
    _write_json(outdir / "fit.json", fit.to_json())
    table.to_csv(outdir / "functionals.csv", index=False)
    band.to_frame().to_csv(outdir / "bands.csv", index=False)
    _write_json(outdir / "diagnostics.json",
                _diagnostics(fit, marg, band, _relevance_report(kind, ds)))
    _write_manifest(outdir, "estimate", cfg, boot["seed"])
    click.echo(f"estimate: wrote fit.json, functionals.csv, bands.csv, "
               f"diagnostics.json, manifest.json to {outdir}")


def _cmd_simulate(config_path, output_dir, seed):
    cfg = dict(_load_config(config_path))
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    if seed is not None:
        cfg["seed"] = seed
    outcome, selection = _law_pair(cfg)
    n = int(cfg.get("n", 1000))
    if n <= 0:
        raise ConfigError("n must be positive")
    run_seed = int(cfg.get("seed", 0))
    p_z = float(cfg.get("p_z", 0.5))
    ds = simulate(outcome, selection, n=n, seed=run_seed, p_z=p_z)
    outdir = _outdir(cfg)
    ds.to_csv(outdir / "data.csv")
    _write_json(outdir / "truth.json",
                _truth_payload(outcome, cfg.get("truth", {})))
    _write_manifest(outdir, "simulate", cfg, run_seed)
    click.echo(f"simulate: wrote data.csv ({n} rows), truth.json, "
               f"manifest.json to {outdir}")


def _cmd_coverage(config_path, output_dir, seed, threads, bootstrap_b,
                  alpha):
    cfg = _merge_flags(_load_config(config_path), None, output_dir, seed,
                       threads, bootstrap_b, alpha)
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"treatment kind must be one of {KINDS}")
    outcome, selection = _law_pair(cfg)
    taus, _, pairs = _functional_settings(cfg)
    truth_cfg = {"taus": taus}
    if pairs:
        truth_cfg["pair"] = list(pairs[0])
    truth = _truth_payload(outcome, truth_cfg)
    boot = cfg["bootstrap"]
    n = int(cfg.get("n", 1000))
    reps = int(cfg.get("reps", 100))
    p_z = float(cfg.get("p_z", 0.5))
    budget = float(cfg.get("budget", 1e8))
    if float(reps) * float(boot["B"]) * float(n) > budget:
        raise ConfigError(
            f"coverage study needs about {reps * int(boot['B']) * n:.3g} "
            f"pipeline-row evaluations, beyond the budget of {budget:.3g}; "
            "lower reps, B, or n, or raise the budget")
    basis = _basis(cfg)
    pair = tuple(truth["pair"])

    def make_data(nn, data_seed):
        return simulate(outcome, selection, n=nn, seed=data_seed, p_z=p_z)

    def make_pipeline(ds):
        return make_qte_pipeline(ds, kind, taus=taus, pair=pair,
                                 basis=basis)

    report = coverage_study(make_data, make_pipeline, truth["qte"], n=n,
                            reps=reps, B=int(boot["B"]),
                            alpha=float(boot["alpha"]),
                            scheme=boot["scheme"],
                            seed=int(boot["seed"]),
                            threads=int(boot["threads"]), budget=budget)
    outdir = _outdir(cfg)
    payload = report.to_json()
    payload["truth"] = truth["qte"]
    payload["taus"] = taus
    _write_json(outdir / "coverage.json", payload)
    _write_manifest(outdir, "coverage", cfg, boot["seed"])
    click.echo(
        f"coverage: {report.completed} of {reps} replications completed; "
        f"pointwise {np.round(report.pointwise, 3).tolist()}, uniform "
        f"{report.uniform:.3f}; wrote coverage.json, manifest.json to "
        f"{outdir}")


def _cmd_check(config_path, input_path, output_dir):
    cfg = dict(_load_config(config_path))
    if input_path is not None:
        cfg["input"] = input_path
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    kind = cfg.get("kind")
    if kind is None:
        raise ConfigError("config must set the treatment `kind`")
    ds = _load_dataset(cfg.get("input"), cfg.get("columns", {}))
    _check_kind(kind, ds.d)
    relevance = _relevance_report(kind, ds)
    outdir = _outdir(cfg)
    _write_json(outdir / "check.json", {
        "kind": kind,
        "n": ds.n,
        "instrument": relevance,
        "treatment_levels": int(np.unique(ds.d).size),
    })
    _write_manifest(outdir, "check", cfg, None)
    gap = relevance["min_index_gap"]
    if gap is None or gap < WEAK_GAP:
        raise WeakInstrumentError(
            "instrument is irrelevant: no treatment level shows a usable "
            "index contrast between arms")
    if kind == "ordered" and relevance["dominance_direction"] == "violated":
        raise AssumptionError(
            "treatment CDF contrasts change sign across levels; the "
            "instrument does not shift the treatment in one direction")
    click.echo(f"check: assumption diagnostics passed; wrote check.json, "
               f"manifest.json to {outdir}")


# ------------------------------------------------------------ click glue

@click.group()
def main():
    """Instrumented potential-outcome estimation toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON run configuration")
@click.option("--input", "input_path", type=click.Path(), default=None,
              help="input CSV (overrides config)")
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None,
              help="bootstrap seed (overrides config)")
@click.option("--threads", type=int, default=None)
@click.option("--bootstrap", "bootstrap_b", type=int, default=None,
              help="bootstrap replicate count B")
@click.option("--alpha", type=float, default=None)
def estimate(config_path, input_path, output_dir, seed, threads,
             bootstrap_b, alpha):
    """Fit the model and write functional and band artifacts."""
    _guarded(lambda: _cmd_estimate(config_path, input_path, output_dir,
                                   seed, threads, bootstrap_b, alpha))


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
def simulate_cmd(config_path, output_dir, seed):
    """Draw a synthetic dataset and its population truth file."""
    _guarded(lambda: _cmd_simulate(config_path, output_dir, seed))


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--bootstrap", "bootstrap_b", type=int, default=None)
@click.option("--alpha", type=float, default=None)
def coverage(config_path, output_dir, seed, threads, bootstrap_b, alpha):
    """Monte Carlo band coverage against a known law."""
    _guarded(lambda: _cmd_coverage(config_path, output_dir, seed, threads,
                                   bootstrap_b, alpha))


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--input", "input_path", type=click.Path(), default=None)
@click.option("--output-dir", type=click.Path(), default=None)
def check(config_path, input_path, output_dir):
    """Assumption diagnostics only; no estimation."""
    _guarded(lambda: _cmd_check(config_path, input_path, output_dir))


if __name__ == "__main__":  # pragma: no cover
    main()
