"""Replicated simulation studies: simulate, fit, diagnose, gate, summarise.

Work is split into (scenario, replicate, model) triples. Each triple writes
one JSON record under ``fits/`` plus a separate timing file; the manifest
lists finished triples so an interrupted study resumes where it stopped.
Every record is a pure function of the configuration and base seed, so
serial and parallel runs produce identical files.
"""

from __future__ import annotations

import csv
import io
import math
import multiprocessing
import os
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scrglmm import __version__
from scrglmm.config import ModelEntry, StudyConfig
from scrglmm.diagnostics import assess
from scrglmm.geometry import aggregate_detectors
from scrglmm.io import atomic_write_text, dumps, read_json, write_json
from scrglmm.metrics import (
    coefficient_of_variation,
    coverage_indicator,
    delta_scores,
    posterior_summary,
    relative_bias,
    sse_from_moments,
    waic,
)
from scrglmm.mcmc import run_chain
from scrglmm.simulate import derive_seed, replicate_seed, simulate_scenario

WORKERS_ENV = "SCRGLMM_WORKERS"
# models compared by delta-WAIC / delta-SSE; FE uses the true surface
COMPARED_KINDS = ("SCR", "RE", "SARE", "FM")


class StudyError(RuntimeError):
    pass


def triple_key(scenario_id: int, replicate: int, label: str) -> str:
    return f"s{scenario_id:02d}_r{replicate:04d}_{label}"


def dataset_key(scenario_id: int, replicate: int) -> str:
    return f"s{scenario_id:02d}_r{replicate:04d}"


def fit_seed(base_seed: int, scenario_id: int, replicate: int, label: str) -> int:
    return derive_seed(int(base_seed), "fit", int(scenario_id), int(replicate), label)


def make_dataset(cfg: StudyConfig, scenario_id: int, replicate: int):
    return simulate_scenario(cfg.scenario(scenario_id), replicate_seed(cfg.base_seed, scenario_id, replicate))


def truth_reference(data, spec, reference: str) -> np.ndarray:
    """Per-detector true surface, optionally averaged within the model's clusters."""
    p0 = np.asarray(data.truth.p0, dtype=float)
    if reference == "cluster" and spec.aggregation > 1:
        clusters = spec.clusters(data.grid)
        return clusters.expand(clusters.cluster_mean(p0))
    return p0


def fit_triple(cfg: StudyConfig, scenario_id: int, replicate: int, entry: ModelEntry) -> tuple[dict, dict]:
    """Fit one model to one replicate; returns (record, timing)."""
    data = make_dataset(cfg, scenario_id, replicate)
    spec = entry.spec
    if spec.kind == "FE":
        spec = spec.with_covariate(data.truth.fe_covariate())
    mcfg = cfg.mcmc_for(entry, seed=fit_seed(cfg.base_seed, scenario_id, replicate, spec.label))
    chains = [run_chain(spec, data, mcfg, chain_id=k) for k in range(mcfg.n_chains)]

    names = spec.top_level()
    report = assess(chains, threshold=cfg.rhat_threshold, ess_floor=cfg.ess_floor, names=names)
    pooled = {n: np.concatenate([c[n] for c in chains]) for n in chains[0].names}
    summaries = {n: posterior_summary(v).to_dict() for n, v in pooled.items()}
    n_true = data.truth.n_true
    sN = summaries["N"]
    n_draws = sum(c.n_samples for c in chains)
    p0_sum = np.sum([c.p0_sum for c in chains], axis=0)
    p0_sumsq = np.sum([c.p0_sumsq for c in chains], axis=0)
    truth = truth_reference(data, spec, cfg.reference)
    metrics = {
        "RB_N": relative_bias(sN["mean"], n_true),
        "CV_N": coefficient_of_variation(pooled["N"]),
        "covered": coverage_indicator((sN["q025"], sN["q975"]), n_true),
        "SSE": sse_from_moments(p0_sum, p0_sumsq, n_draws, truth),
    }
    try:
        w = waic(np.vstack([c.loglik for c in chains]))
        metrics.update({"WAIC": w.waic, "lppd": w.lppd, "p_w": w.p_w})
    except ValueError:
        metrics.update({"WAIC": math.nan, "lppd": math.nan, "p_w": math.nan})
    record = {
        "key": triple_key(scenario_id, replicate, spec.label),
        "scenario": scenario_id,
        "replicate": replicate,
        "model": spec.label,
        "kind": spec.kind,
        "status": "ok",
        "spec": spec.to_config(),
        "spec_digest": spec.digest(),
        "mcmc": mcfg.to_config(),
        "seed": mcfg.seed,
        "converged": report.converged,
        "rhat": report.rhat,
        "ess": report.ess,
        "diagnostic_notes": report.notes,
        "summaries": summaries,
        "metrics": metrics,
        "acceptance": [c.acceptance for c in chains],
        "p0_mean": p0_sum / n_draws,
    }
    timing = {"key": record["key"], "runtime_s": report.runtime, "efficiency": report.efficiency}
    return record, timing


def _run_task(args) -> tuple[dict, dict | None]:
    cfg, sid, rep, entry = args
    try:
        return fit_triple(cfg, sid, rep, entry)
    except Exception as exc:  # isolate failures per triple
        record = {
            "key": triple_key(sid, rep, entry.label),
            "scenario": sid,
            "replicate": rep,
            "model": entry.label,
            "kind": entry.spec.kind,
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(limit=4),
            "converged": False,
        }
        return record, None


@dataclass
class StudyResult:
    config: dict
    datasets: list
    fits: list

    def fits_for(self, scenario_id: int, model: str) -> list:
        return [f for f in self.fits if f["scenario"] == scenario_id and f["model"] == model]


def resolve_workers(cfg: StudyConfig, workers: int | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if workers is None and env:
        try:
            workers = int(env)
        except ValueError as exc:
            raise StudyError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    n = cfg.workers if workers is None else workers
    if n < 1:
        raise StudyError("worker count must be >= 1")
    return n


def _manifest(cfg: StudyConfig, completed: dict) -> dict:
    config = cfg.to_config()
    config["study"].pop("workers")
    return {
        "format": "scrglmm-study-manifest",
        "version": 1,
        "package_version": __version__,
        "config_digest": cfg.digest(),
        "config": config,
        "completed": dict(sorted(completed.items())),
    }


def data_summary(cfg: StudyConfig, scenario_id: int, replicate: int) -> dict:
    data = make_dataset(cfg, scenario_id, replicate)
    out = {"scenario": scenario_id, "replicate": replicate, "seed": data.seed}
    out.update(data.summary())
    return out


def run_study(cfg: StudyConfig, out_dir, resume: bool = True, workers: int | None = None, progress=None) -> StudyResult:
    """Execute (or resume) a study and return its persisted result."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    completed: dict = {}
    if manifest_path.exists():
        old = read_json(manifest_path)
        if not resume:
            raise StudyError(f"{out} already holds a study; pass resume to continue it")
        if old.get("config_digest") != cfg.digest():
            raise StudyError(f"{out} holds a study with a different configuration (digest {old.get('config_digest')})")
        completed = {k: v for k, v in old.get("completed", {}).items() if (out / "fits" / f"{k}.json").exists()}
    write_json(manifest_path, _manifest(cfg, completed))

    for sid in cfg.scenarios:
        for rep in range(cfg.replicates):
            path = out / "data" / f"{dataset_key(sid, rep)}.json"
            if not path.exists():
                write_json(path, data_summary(cfg, sid, rep))

    tasks = [
        (cfg, sid, rep, entry)
        for sid in cfg.scenarios
        for rep in range(cfg.replicates)
        for entry in cfg.models
        if triple_key(sid, rep, entry.label) not in completed
    ]
    n_workers = resolve_workers(cfg, workers)

    def store(record, timing):
        key = record["key"]
        write_json(out / "fits" / f"{key}.json", record)
        if timing is not None:
            write_json(out / "fits" / f"{key}.timing.json", timing)
        completed[key] = record["status"]
        write_json(manifest_path, _manifest(cfg, completed))
        if progress is not None:
            progress(record)

    if n_workers == 1 or len(tasks) <= 1:
        for t in tasks:
            store(*_run_task(t))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(n_workers) as pool:
            for record, timing in pool.imap_unordered(_run_task, tasks):
                store(record, timing)
    return load_result(out)


def load_result(out_dir) -> StudyResult:
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise StudyError(f"no study manifest in {out}")
    manifest = read_json(manifest_path)
    datasets = [read_json(p) for p in sorted((out / "data").glob("*.json"))] if (out / "data").exists() else []
    fits = []
    for key in sorted(manifest["completed"]):
        fits.append(read_json(out / "fits" / f"{key}.json"))
    return StudyResult(config=manifest["config"], datasets=datasets, fits=fits)


# ---------------------------------------------------------------- reports
def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "NA"
    return f"{x:.6g}"


def _table(header, rows, delimiter="\t") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _num(v) -> float:
    return math.nan if isinstance(v, str) else float(v)


def table1(result: StudyResult) -> str:
    by = {}
    for d in result.datasets:
        by.setdefault(d["scenario"], []).append(d)
    rows = []
    for sid in sorted(by):
        ds = by[sid]
        rows.append(
            [
                sid,
                len(ds),
                np.mean([d["n_detected"] for d in ds]),
                np.mean([d["n_detections"] for d in ds]),
                np.mean([d["detections_per_detector"] for d in ds]),
                np.mean([_num(d["detections_per_detected"]) for d in ds]),
                np.mean([d["detections_per_individual"] for d in ds]),
            ]
        )
    header = ["scenario", "replicates", "detected", "detections", "per_detector", "per_detected", "per_individual"]
    return _table(header, rows)


def _models_in(result: StudyResult) -> list:
    seen = []
    for m in result.config.get("models", []):
        kind, agg = m["kind"], m["aggregation"]
        label = f"{kind}-{agg}x{agg}" if kind in ("RE", "SARE", "FM") else kind
        if label not in seen:
            seen.append(label)
    return seen


def convergence_table(result: StudyResult) -> str:
    rows = []
    for sid in result.config["study"]["scenarios"]:
        for model in _models_in(result):
            fits = result.fits_for(sid, model)
            if not fits:
                continue
            n_conv = sum(bool(f["converged"]) for f in fits)
            rows.append([sid, model, len(fits), n_conv, n_conv / len(fits)])
    return _table(["scenario", "model", "attempted", "converged", "rate"], rows)


def delta_rows(result: StudyResult) -> list[dict]:
    """Per-replicate delta-SSE / delta-WAIC among converged compared models."""
    out = []
    groups = {}
    for f in result.fits:
        if f["status"] == "ok" and f["converged"] and f["kind"] in COMPARED_KINDS:
            groups.setdefault((f["scenario"], f["replicate"]), []).append(f)
    order = {k: i for i, k in enumerate(("SCR", "RE", "SARE", "FM", "FE"))}
    for (sid, rep), fits in sorted(groups.items()):
        fits = sorted(fits, key=lambda f: (order[f["kind"]], f["model"]))
        models = [f["model"] for f in fits]
        row = {"scenario": sid, "replicate": rep, "models": models}
        for metric in ("SSE", "WAIC"):
            vals = [_num(f["metrics"][metric]) for f in fits]
            if any(math.isnan(v) for v in vals):
                row[metric] = None
                continue
            deltas, winner = delta_scores(vals, models)
            row[metric] = {"deltas": dict(zip(models, deltas.tolist())), "winner": models[winner]}
        out.append(row)
    return out


def metrics_csv(result: StudyResult) -> str:
    deltas = {(r["scenario"], r["replicate"]): r for r in delta_rows(result)}
    rows = []
    for f in sorted(result.fits, key=lambda f: (f["scenario"], f["replicate"], f["model"])):
        if f["status"] != "ok":
            rows.append([f["scenario"], f["replicate"], f["model"], None, None, None, None, None, False, None, None, f["status"]])
            continue
        m = f["metrics"]
        d = deltas.get((f["scenario"], f["replicate"]))
        dsse = dwaic = None
        if d is not None and f["model"] in d["models"]:
            if d["SSE"] is not None:
                dsse = d["SSE"]["deltas"][f["model"]]
            if d["WAIC"] is not None:
                dwaic = d["WAIC"]["deltas"][f["model"]]
        rows.append(
            [
                f["scenario"],
                f["replicate"],
                f["model"],
                m["RB_N"],
                m["CV_N"],
                m["covered"],
                m["SSE"],
                _num(m["WAIC"]),
                f["converged"],
                dsse,
                dwaic,
                f["status"],
            ]
        )
    header = ["scenario", "replicate", "model", "RB_N", "CV_N", "covered", "SSE", "WAIC", "converged", "dSSE", "dWAIC", "status"]
    return _table(header, rows, delimiter=",")


def aggregate_table(result: StudyResult) -> str:
    wins = {}
    for r in delta_rows(result):
        for metric in ("SSE", "WAIC"):
            if r[metric] is not None:
                key = (r["scenario"], r[metric]["winner"], metric)
                wins[key] = wins.get(key, 0) + 1
    n_compared = {}
    for r in delta_rows(result):
        n_compared[r["scenario"]] = n_compared.get(r["scenario"], 0) + 1
    rows = []
    for sid in result.config["study"]["scenarios"]:
        for model in _models_in(result):
            fits = result.fits_for(sid, model)
            if not fits:
                continue
            conv = [f for f in fits if f["status"] == "ok" and f["converged"]]
            rb = [f["metrics"]["RB_N"] for f in conv]
            cv = [f["metrics"]["CV_N"] for f in conv]
            cov = [f["metrics"]["covered"] for f in conv]
            rows.append(
                [
                    sid,
                    model,
                    len(fits),
                    len(conv),
                    float(np.median(rb)) if rb else None,
                    float(np.median(np.abs(rb))) if rb else None,
                    float(np.median(cv)) if cv else None,
                    float(np.mean(cov)) if cov else None,
                    wins.get((sid, model, "SSE"), 0),
                    wins.get((sid, model, "WAIC"), 0),
                    n_compared.get(sid, 0),
                ]
            )
    header = ["scenario", "model", "attempted", "converged", "median_RB_N", "median_abs_RB_N", "median_CV_N", "coverage", "SSE_wins", "WAIC_wins", "compared_replicates"]
    return _table(header, rows)


def efficiency_table(out_dir, result: StudyResult) -> str:
    """Mean ESS/s over top-level parameters and converged fits (timing-dependent)."""
    out = Path(out_dir)
    rows = []
    for sid in result.config["study"]["scenarios"]:
        for model in _models_in(result):
            effs = []
            for f in result.fits_for(sid, model):
                path = out / "fits" / f"{f['key']}.timing.json"
                if f["status"] != "ok" or not f["converged"] or not path.exists():
                    continue
                vals = [_num(v) for v in read_json(path)["efficiency"].values()]
                effs.append(float(np.mean(vals)))
            if result.fits_for(sid, model):
                rows.append([sid, model, len(effs), float(np.mean(effs)) if effs else None])
    return _table(["scenario", "model", "converged", "mean_efficiency"], rows)


def surfaces_csv(out_dir, result: StudyResult) -> str:
    """Per-detector true and posterior-mean surfaces for every successful fit."""
    rows = []
    cache = {}
    cfg = _config_from_manifest(result)
    for f in sorted(result.fits, key=lambda f: (f["scenario"], f["replicate"], f["model"])):
        if f["status"] != "ok":
            continue
        key = (f["scenario"], f["replicate"])
        if key not in cache:
            cache[key] = make_dataset(cfg, *key)
        data = cache[key]
        agg = f["spec"]["aggregation"]
        clusters = aggregate_detectors(data.grid, agg)
        ref = clusters.expand(clusters.cluster_mean(data.truth.p0))
        for j, (x, y) in enumerate(data.grid.coords):
            rows.append([f["scenario"], f["replicate"], f["model"], j, float(x), float(y), data.truth.p0[j], ref[j], f["p0_mean"][j]])
    header = ["scenario", "replicate", "model", "detector_id", "x", "y", "p0_true", "p0_true_cluster", "p0_mean"]
    return _table(header, rows, delimiter=",")


def _config_from_manifest(result: StudyResult) -> StudyConfig:
    c = result.config
    return StudyConfig(
        scenarios=tuple(c["study"]["scenarios"]),
        replicates=c["study"]["replicates"],
        base_seed=c["study"]["base_seed"],
        reference=c["study"]["reference"],
        design=c["design"],
    )


REPORT_FILES = ("table1_data.tsv", "table2_convergence.tsv", "table3_efficiency.timing.tsv", "metrics.csv", "aggregates.tsv", "surfaces.csv")


def summarize(out_dir, result: StudyResult | None = None) -> dict:
    """Write report files (a)-(e) into ``out_dir/report`` and return their paths."""
    out = Path(out_dir)
    result = result if result is not None else load_result(out)
    report = out / "report"
    texts = {
        "table1_data.tsv": table1(result),
        "table2_convergence.tsv": convergence_table(result),
        "table3_efficiency.timing.tsv": efficiency_table(out, result),
        "metrics.csv": metrics_csv(result),
        "aggregates.tsv": aggregate_table(result),
        "surfaces.csv": surfaces_csv(out, result),
    }
    paths = {}
    for name, text in texts.items():
        atomic_write_text(report / name, text)
        paths[name] = report / name
    atomic_write_text(report / "deltas.json", dumps(delta_rows(result)))
    paths["deltas.json"] = report / "deltas.json"
    return paths
