"""Command-line interface: ``sitar-mcmc {fit,simulate,diagnose,compare,curves}``.

Exit codes: 0 success, 2 success with convergence warnings (some R-hat >= 1.1),
1 any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from functools import partial
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import diagnostics as diag
from . import growth
from .config import ConfigError, McmcConfig, ModelConfig, PriorConfig, RunConfig, from_dict
from .data import apply_time_transform, load_dataset, summarize_dataset, write_dataset, write_summary
from .distributions import rng_stream
from .io import chain_paths, read_chains, write_json, write_posterior
from .sampler import SamplerAbort, run_chains
from .selection import argmin_bic, bic_knot_scan, dic
from .spline import FAMILIES
from .synthetic import Scenario, make_truth, pubertal_curve, recovery_study

log = logging.getLogger("sitar_mcmc")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
# stream key for simulated data, disjoint from the per-chain keys
STREAM_SIMULATE = 2**32
CONVERGENCE_HEADER = ["parameter", "mean", "sd", "rhat", "ess"]
ACCEPTANCE_HEADER = ["subject", "acceptance_rate", "flagged"]
ACF_MAX_LAG = 50
COMPARE_HEADER = ["kappa", "family", "n_parameters", "dic", "p_d", "mean_deviance", "deviance_at_mean", "bic", "error"]


class CliError(Exception):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("sitar_mcmc").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(obj, name: str) -> None:
    jsonschema.validate(obj, load_schema(name))


# ---------------------------------------------------------------------------
# configuration


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise CliError(f"cannot parse config {path}: {exc}") from exc
    return raw or {}


def apply_overrides(raw: dict, pairs: list[str]) -> dict:
    """``section.field=value`` overrides; values parsed as YAML scalars."""
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        parts = key.split(".")
        if not sep or len(parts) != 2:
            raise ConfigError(key or pair, "override must look like section.field=value")
        raw.setdefault(parts[0], {})[parts[1]] = yaml.safe_load(value)
    return raw


def check_config(raw: dict) -> RunConfig:
    try:
        validate(raw, "config")
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(where, exc.message) from None
    return RunConfig(
        model=from_dict(ModelConfig, raw.get("model"), "model"),
        prior=from_dict(PriorConfig, raw.get("prior"), "prior"),
        mcmc=from_dict(McmcConfig, raw.get("mcmc"), "mcmc"),
    )


def resolve_config(args) -> tuple[dict, RunConfig]:
    raw = read_config(args.config) if args.config else {}
    raw = apply_overrides(raw, args.set)
    mcmc = raw.setdefault("mcmc", {})
    if args.seed is not None:
        mcmc["seed"] = args.seed
    if args.chains is not None:
        mcmc["n_chains"] = args.chains
    return raw, check_config(raw)


def dataset_path(raw: dict, config_path) -> Path:
    if "data" not in raw:
        raise CliError("config has no data section")
    p = Path(raw["data"]["path"])
    if not p.is_absolute() and config_path is not None:
        p = Path(config_path).parent / p
    return p


def load_model_data(raw: dict, run: RunConfig, config_path):
    path = dataset_path(raw, config_path)
    ds = load_dataset(path, raw["data"].get("schema"), raw["data"].get("units"))
    return ds, apply_time_transform(ds, run.model.time_transform)


# ---------------------------------------------------------------------------
# output


class Writer:
    """Single writer for one command's output directory; records every artifact."""

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def csv(self, name: str, header: list[str], rows) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])

    def json(self, name: str, obj, schema: str | None = None) -> None:
        if schema is not None:
            validate(obj, schema)
        write_json(obj, self.path(name))


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(writer: Writer, command: str, args, run: RunConfig, started: str, code: int) -> None:
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "output_dir": str(writer.out),
        "started": started,
        "finished": _now(),
        "config_fingerprint": run.fingerprint,
        "artifacts": sorted(set(writer.artifacts)),
        "exit_code": code,
    }
    missing = [a for a in manifest["artifacts"] if not (writer.out / a).exists()]
    if missing:
        raise CliError(f"artifacts missing after run: {missing}")
    validate(manifest, "manifest")
    write_json(manifest, writer.out / "manifest.json")


def _acf_rows(chains):
    """Chain-averaged autocorrelation of every non-constant global parameter."""
    rows = []
    for name, x in diag.global_parameter_traces(chains).items():
        max_lag = min(ACF_MAX_LAG, x.shape[1] - 1)
        if max_lag < 1:
            continue
        try:
            acf = np.mean([diag.autocorrelation(c, max_lag) for c in x], axis=0)
        except diag.DegenerateSeriesError:
            continue
        rows.extend([name, lag, float(v)] for lag, v in enumerate(acf))
    return rows


def write_diagnostics(writer: Writer, chains, extra: dict | None = None) -> int:
    """Convergence table, acceptance table and JSON summary; returns the exit code."""
    rows = diag.convergence_table(diag.global_parameter_traces(chains))
    writer.csv("convergence.csv", CONVERGENCE_HEADER, [[r[h] for h in CONVERGENCE_HEADER] for r in rows])
    acc = diag.acceptance_report(chains)
    writer.csv(
        "acceptance.csv",
        ACCEPTANCE_HEADER,
        [[sid, rate, flag] for sid, rate, flag in zip(acc.subject_ids, acc.rates, acc.flagged)],
    )
    writer.csv("autocorrelation.csv", ["parameter", "lag", "acf"], _acf_rows(chains))
    for k, name in enumerate(("tempo", "size", "velocity")):
        post = np.concatenate([c.gamma[:, :, k] for c in chains]).mean(axis=0)
        if post.size >= 3:
            writer.csv(f"qq_{name}.csv", ["theoretical", "sample"], diag.qq_export(post))
    warnings = diag.rhat_warnings(rows)
    summary = {
        "n_chains": len(chains),
        "n_draws_per_chain": int(chains[0].n_draws),
        "rhat_threshold": diag.RHAT_THRESHOLD,
        "rhat_warnings": [{"parameter": r["parameter"], "rhat": r["rhat"]} for r in warnings],
        "acceptance": acc.summary,
    }
    if extra:
        summary["fit"] = extra
    writer.json("diagnostics.json", summary, "diagnostics")
    if warnings:
        listing = ", ".join(f"{r['parameter']}={r['rhat']:.3f}" for r in warnings)
        print(f"convergence warning: R-hat >= {diag.RHAT_THRESHOLD} for {listing}", file=sys.stderr)
        return EXIT_WARN
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, raw, run, writer) -> int:
    original, ds = load_model_data(raw, run, args.config)
    write_summary(summarize_dataset(original), writer.path("data_summary.csv"))
    try:
        chains = run_chains(ds, run.model, run.prior, run.mcmc, threads=args.threads)
    except SamplerAbort as exc:
        dump = writer.out / "state_dump.json"
        write_json({"iteration": exc.iteration, "message": str(exc), "state": exc.state_dump}, dump)
        raise CliError(f"sampler aborted at iteration {exc.iteration}: {exc}; state dump written to {dump}") from exc
    for c in chains:
        csv_path, meta_path = chain_paths(writer.out, c.chain_id)
        write_posterior(c, writer.path(csv_path.name), writer.path(meta_path.name))
    validate(json.loads((writer.out / chain_paths(writer.out, 0)[1].name).read_text()), "posterior_meta")
    return write_diagnostics(writer, chains)


def _fit_dir(args) -> Path:
    return Path(args.fit) if args.fit else Path(args.out)


def cmd_diagnose(args, raw, run, writer) -> int:
    chains = read_chains(_fit_dir(args))
    extra = None
    if "data" in raw:
        _, ds = load_model_data(raw, run, args.config)
        extra = dic(chains, ds).to_dict()
    return write_diagnostics(writer, chains, extra)


def cmd_simulate(args, raw, run, writer) -> int:
    sim = dict(raw.get("simulate") or {})
    curve = partial(pubertal_curve, **sim.pop("curve", {}))
    if "sigma_gamma" in sim:
        sim["sigma_gamma"] = np.array(sim["sigma_gamma"], dtype=float)
    if "time_range" in sim:
        sim["time_range"] = tuple(sim["time_range"])
    scenario = Scenario(curve=curve, **sim)
    ds, truth = make_truth(scenario, rng_stream(run.mcmc.seed, STREAM_SIMULATE))
    write_dataset(ds, writer.path("data.csv"))
    writer.json("truth.json", truth.to_dict(), "truth")
    if args.replicates:
        report = recovery_study(scenario, run.mcmc, args.replicates, run.prior, seed=run.mcmc.seed)
        writer.csv(
            "recovery.csv",
            ["parameter", "coverage", "bias"],
            [[n, report.coverage[n], report.bias[n]] for n in report.coverage],
        )
        writer.json("recovery.json", {
            "n_replicates": report.n_replicates,
            "coverage": report.coverage,
            "bias": report.bias,
            "failures": [list(f) for f in report.failures],
        })
    return EXIT_OK


def cmd_compare(args, raw, run, writer) -> int:
    _, ds = load_model_data(raw, run, args.config)
    kappas = (raw.get("compare") or {}).get("kappa_range", list(range(0, 7)))
    scores = bic_knot_scan(ds, run.model, run.prior, run.mcmc, kappas, threads=args.threads)
    writer.csv("compare.csv", COMPARE_HEADER, [
        [s.kappa, s.family, s.n_parameters, s.dic, s.p_d, s.mean_deviance, s.deviance_at_mean, s.bic, s.error]
        for s in scores
    ])
    if (raw.get("compare") or {}).get("dic_table"):
        writer.csv("dic_table.csv", ["model", *FAMILIES], _dic_table(ds, run, args.threads))
    ok = [s for s in scores if s.error is None]
    if not ok:
        raise CliError("every knot count in the scan failed")
    best_dic = min(ok, key=lambda s: s.dic).kappa
    writer.json("compare.json", {"argmin_bic": argmin_bic(scores), "argmin_dic": best_dic,
                                 "deviance_focus": scores[0].focus})
    return EXIT_OK


def _dic_table(ds, run, threads):
    """DIC for each spline family, without and (when covariates are named) with covariates."""
    variants = [("without covariates", False)]
    if run.model.covariate_selection:
        variants.append(("with covariates", True))
    rows = []
    for label, use_cov in variants:
        row = [label]
        for family in FAMILIES:
            model = replace(run.model, use_covariates=use_cov, spline_family=family)
            row.append(dic(run_chains(ds, model, run.prior, run.mcmc, threads=threads), ds).dic)
        rows.append(row)
    return rows


def cmd_curves(args, raw, run, writer) -> int:
    chains = read_chains(_fit_dir(args))
    opts = raw.get("curves") or {}
    grid = opts.get("grid_size", growth.DEFAULT_GRID)
    profiles = opts.get("profiles")
    if profiles is None:
        n_cov = len(chains[0].covariate_names) - 1
        profiles = {"population": [0.0] * n_cov}
    apv = {}
    for label, profile in profiles.items():
        growth.write_curve(growth.mean_curve(chains, grid, profile), writer.path(f"mean_curve_{label}.csv"))
        growth.write_curve(growth.velocity_curve(chains, grid, profile), writer.path(f"velocity_curve_{label}.csv"))
        apv[label] = growth.age_at_peak_velocity(chains, grid, profile).to_dict()
    writer.json("peak_velocity.json", apv, "peak_velocity")
    growth.write_population_effects(growth.population_effects(chains, profiles), writer.path("population_effects.csv"))
    summary = growth.effects_summary(chains, percent=opts.get("percent", False))
    growth.write_effects(
        summary,
        writer.path("effects_sd.csv"),
        writer.path("correlations.csv"),
        writer.path("covariate_effects.csv") if summary.covariate_table else None,
    )
    for i in opts.get("subjects", []):
        growth.write_curve(growth.subject_curve(chains, i, grid), writer.path(f"subject_curve_{i}.csv"))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
    "curves": cmd_curves,
}


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with every other failure; 2 means convergence warnings
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sitar-mcmc", description="Bayesian shape-invariant growth curve models by MCMC.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "fit": "run the sampler and write posterior draws and diagnostics",
        "simulate": "generate a synthetic cohort from the model",
        "diagnose": "convergence and mixing diagnostics of an existing fit",
        "compare": "DIC and BIC over a range of interior knot counts",
        "curves": "mean, velocity and subject curves, peak velocity and effect tables",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, required=name in ("fit", "compare"), help="YAML or JSON run config")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override mcmc.seed")
        p.add_argument("--chains", type=int, help="override mcmc.n_chains")
        p.add_argument("--threads", type=int, default=1, help="worker processes for chains or scan entries")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                       help="override one scalar config field (repeatable)")
        if name in ("diagnose", "curves"):
            p.add_argument("--fit", type=Path, help="directory of a previous fit (default: --out)")
        if name == "simulate":
            p.add_argument("--replicates", type=int, default=0, help="also run a recovery study with this many fits")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        raw, run = resolve_config(args)
        writer = Writer(Path(args.out))
        code = COMMANDS[args.command](args, raw, run, writer)
        write_manifest(writer, args.command, args, run, started, code)
        return code
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
    except (CliError, ValueError, OSError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
