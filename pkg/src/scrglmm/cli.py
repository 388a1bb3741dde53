"""Command-line entry point: ``scrglmm {simulate,fit,diagnose,study,report}``.

Exit codes
----------
0  success
1  unexpected internal error
2  usage error (bad or missing flags)
3  configuration or validation error
4  input/output or file-format error
5  fit finished but ``--require-convergence`` gate failed
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from scrglmm import __version__
from scrglmm.config import ConfigError, StudyConfig, load_config, parse_config, with_overrides
from scrglmm.diagnostics import assess
from scrglmm.geometry import aggregate_detectors, detectors_csv
from scrglmm.io import FormatError, atomic_write_text, read_chain, read_dataset, write_chain, write_dataset, write_json
from scrglmm.likelihood import ModelSpec, Priors
from scrglmm.mcmc import InitializationError, McmcConfig, default_mcmc, run_chain
from scrglmm.metrics import posterior_summary, sse_from_moments, waic
from scrglmm.simulate import get_scenario, simulate_scenario
from scrglmm.study import StudyError, run_study, summarize
from scrglmm.surfaces import BaselineSurface, surface_csv

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NOT_CONVERGED = 5


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _provenance(command: str, seed: int, config: dict) -> dict:
    return {"tool": "scrglmm", "version": __version__, "command": command, "seed": seed, "config_hash": _hash(config), "config": config}


def _design_overrides(args) -> dict:
    out = {}
    for key in ("nx", "ny", "n_true", "m_aug", "buffer", "spacing"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


# ---------------------------------------------------------------- commands
def cmd_simulate(args) -> int:
    try:
        scenario = get_scenario(args.scenario).with_design(**_design_overrides(args))
        grid = scenario.grid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = simulate_scenario(scenario, args.seed)
    out = Path(args.out)
    write_dataset(out, data)
    stem = out.with_suffix("")
    surf = BaselineSurface(p0=data.truth.p0, W=data.truth.W, eta=scenario.eta, kind=scenario.kind)
    atomic_write_text(Path(f"{stem}.surface.csv"), surface_csv(grid, surf))
    atomic_write_text(Path(f"{stem}.detectors.csv"), detectors_csv(grid))
    write_json(Path(f"{stem}.provenance.json"), _provenance("simulate", args.seed, scenario.to_config()))
    s = data.summary()
    print(f"scenario {scenario.id}: {s['n_detected']} detected, {s['n_detections']} detections -> {out}")
    return EXIT_OK


def _model_from_args(args, data) -> ModelSpec:
    try:
        spec = ModelSpec(kind=args.model, aggregation=args.aggregation, radius=args.radius, priors=Priors())
        if spec.kind == "FE":
            if data.truth is None:
                raise ValueError("FE requires covariate: dataset has no truth block")
            spec = spec.with_covariate(data.truth.fe_covariate())
        spec.validate(data.grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def _mcmc_from_args(args, spec: ModelSpec) -> McmcConfig:
    overrides = {"seed": args.seed}
    for flag, key in (("iterations", "n_iterations"), ("burn_in", "burn_in"), ("thin", "thin"), ("chains", "n_chains"), ("loglik_every", "loglik_every")):
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    try:
        return default_mcmc(spec.kind, spec.aggregation, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_fit(args) -> int:
    data = read_dataset(args.data)
    spec = _model_from_args(args, data)
    cfg = _mcmc_from_args(args, spec)
    out = Path(args.out)
    chains = [run_chain(spec, data, cfg, chain_id=k) for k in range(cfg.n_chains)]
    for c in chains:
        write_chain(out, c, spec.digest(), save_loglik=args.save_loglik)
    report = assess(chains, threshold=args.rhat_threshold, ess_floor=args.ess_floor, names=spec.top_level())
    pooled = {n: np.concatenate([c[n] for c in chains]) for n in chains[0].names}
    n_draws = sum(c.n_samples for c in chains)
    p0_sum = np.sum([c.p0_sum for c in chains], axis=0)
    p0_sumsq = np.sum([c.p0_sumsq for c in chains], axis=0)
    p0_mean = p0_sum / n_draws
    summary = {
        "model": spec.label,
        "spec": spec.to_config(),
        "mcmc": cfg.to_config(),
        "posterior": {n: posterior_summary(v).to_dict() for n, v in pooled.items()},
        "rhat": report.rhat,
        "ess": report.ess,
        "converged": report.converged,
    }
    try:
        summary["waic"] = waic(np.vstack([c.loglik for c in chains])).to_dict()
    except (ValueError, TypeError):
        summary["waic"] = None
    if data.truth is not None:
        summary["sse"] = sse_from_moments(p0_sum, p0_sumsq, n_draws, data.truth.p0)
        summary["n_true"] = data.truth.n_true
    write_json(out / "summary.json", summary)
    atomic_write_text(out / "diagnostics.tsv", report.to_table(timing=False))
    atomic_write_text(out / "efficiency.timing.tsv", report.to_table(timing=True))
    clusters = aggregate_detectors(data.grid, spec.aggregation)
    lines = ["detector_id,x,y,cluster_id,p0_mean" + (",p0_true" if data.truth is not None else "")]
    for j, (x, y) in enumerate(data.grid.coords):
        row = f"{j},{float(x)!r},{float(y)!r},{int(clusters.cluster_of[j])},{float(p0_mean[j])!r}"
        if data.truth is not None:
            row += f",{float(data.truth.p0[j])!r}"
        lines.append(row)
    atomic_write_text(out / "surface.csv", "\n".join(lines) + "\n")
    write_json(out / "provenance.json", _provenance("fit", args.seed, {"spec": spec.to_config(), "mcmc": cfg.to_config(), "data": str(args.data)}))
    N = summary["posterior"]["N"]
    print(f"{spec.label}: posterior mean N = {N['mean']:.2f} (95% CI {N['q025']:.1f}-{N['q975']:.1f}); converged = {report.converged}")
    if args.require_convergence and not report.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_diagnose(args) -> int:
    d = Path(args.fit_dir)
    ids = sorted(int(p.name.split("_")[1].split(".")[0]) for p in d.glob("chain_*.meta.json"))
    if not ids:
        raise FormatError(f"no chain files in {d}")
    chains = [read_chain(d, k) for k in ids]
    names = [n for n in chains[0].names if n != "psi"]
    report = assess(chains, threshold=args.rhat_threshold, ess_floor=args.ess_floor, names=names)
    text = report.to_table(timing=True)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out, report.to_table(timing=False))
        atomic_write_text(out.with_name(f"{out.stem}.timing{out.suffix or '.tsv'}"), text)
    print(text, end="")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg: StudyConfig = load_config(args.config) if args.config else parse_config("")
    cfg = with_overrides(cfg, base_seed=args.seed)
    if args.workers is not None:
        cfg = with_overrides(cfg, workers=args.workers)
    out = Path(args.out)

    def progress(record):
        if not args.quiet:
            print(f"{record['key']}: {record['status']}" + ("" if record["status"] == "ok" else f" ({record.get('error')})"), flush=True)

    result = run_study(cfg, out, resume=args.resume, progress=progress)
    config = cfg.to_config()
    config["study"].pop("workers")
    write_json(out / "provenance.json", _provenance("study", args.seed, config))
    summarize(out, result)
    failed = sum(f["status"] != "ok" for f in result.fits)
    print(f"{len(result.fits)} fits recorded ({failed} failed); reports in {out / 'report'}")
    return EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.study)
    if not (d / "manifest.json").exists():
        raise FormatError(f"missing manifest: {d / 'manifest.json'}")
    paths = summarize(d)
    for p in paths.values():
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- parser
def _add_design(p) -> None:
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--n-true", dest="n_true", type=int)
    p.add_argument("--m-aug", dest="m_aug", type=int)
    p.add_argument("--buffer", type=float)
    p.add_argument("--spacing", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scrglmm", description="Spatial capture-recapture GLMM simulation and fitting.")
    parser.add_argument("--version", action="version", version=f"scrglmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dataset from the scenario catalogue")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset file to write")
    _add_design(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model to a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=["SCR", "RE", "SARE", "FM", "FE", "scr", "re", "sare", "fm", "fe"])
    p.add_argument("--aggregation", type=int, default=1)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--loglik-every", dest="loglik_every", type=int)
    p.add_argument("--rhat-threshold", dest="rhat_threshold", type=float, default=1.1)
    p.add_argument("--ess-floor", dest="ess_floor", type=float, default=400.0)
    p.add_argument("--save-loglik", dest="save_loglik", action="store_true")
    p.add_argument("--require-convergence", dest="require_convergence", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="convergence report for a fit directory")
    p.add_argument("--fit-dir", dest="fit_dir", required=True)
    p.add_argument("--rhat-threshold", dest="rhat_threshold", type=float, default=1.1)
    p.add_argument("--ess-floor", dest="ess_floor", type=float, default=400.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("study", help="run or resume a replicated simulation study")
    p.add_argument("--config", help="TOML study configuration (default: full-scale design)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", action="store_true", help="continue a study already present in --out")
    p.add_argument("--workers", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="regenerate report files from a study directory")
    p.add_argument("--study", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StudyError, InitializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
