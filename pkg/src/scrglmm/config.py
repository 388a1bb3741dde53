"""Study configuration: TOML grammar, defaults and validation.

Grammar (all sections and keys optional)::

    [study]
    scenarios = [4, 10]       # catalogue ids 1-10
    replicates = 10
    base_seed = 2024
    workers = 1
    reference = "detector"    # or "cluster" for cluster-averaged SSE truth

    [design]                  # overrides applied to every scenario
    nx = 16
    ny = 16
    n_true = 75
    m_aug = 150
    buffer = 3.0

    [mcmc]                    # defaults for every model; omitted keys use
    n_iterations = 20000      # the per-model default lengths
    burn_in = 5000
    n_chains = 3
    loglik_every = 10

    [diagnostics]
    rhat_threshold = 1.1
    ess_floor = 400

    [priors]
    sigma_upper = 50.0

    [[models]]
    kind = "SARE"
    aggregation = 4
    radius = 10.0
    mcmc = { n_iterations = 40000 }

An empty document yields the full-scale design.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace

from scrglmm.likelihood import ModelSpec, Priors
from scrglmm.mcmc import McmcConfig, default_mcmc
from scrglmm.simulate import Scenario, get_scenario

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DEFAULT_MODELS = (
    ("SCR", 1),
    ("RE", 1),
    ("RE", 4),
    ("SARE", 1),
    ("SARE", 4),
    ("FM", 1),
    ("FM", 4),
    ("FE", 1),
)

_MCMC_KEYS = {"n_iterations", "burn_in", "thin", "n_chains", "target_accept", "adapt", "adapt_decay", "scales", "loglik_every"}
_DESIGN_KEYS = {"nx", "ny", "spacing", "buffer", "n_true", "m_aug", "sigma"}
_STUDY_KEYS = {"scenarios", "replicates", "base_seed", "workers", "reference"}
_DIAG_KEYS = {"rhat_threshold", "ess_floor"}
_MODEL_KEYS = {"kind", "aggregation", "radius", "mcmc"}
_TOP_KEYS = {"study", "design", "mcmc", "diagnostics", "priors", "models"}


@dataclass(frozen=True)
class ModelEntry:
    spec: ModelSpec
    mcmc: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.spec.label


@dataclass(frozen=True)
class StudyConfig:
    scenarios: tuple = tuple(range(1, 11))
    replicates: int = 100
    base_seed: int = 0
    workers: int = 1
    reference: str = "detector"
    design: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    rhat_threshold: float = 1.1
    ess_floor: float = 400.0
    priors: Priors = field(default_factory=Priors)
    models: tuple = ()

    def scenario(self, scenario_id: int) -> Scenario:
        return get_scenario(scenario_id).with_design(**self.design)

    def mcmc_for(self, entry: ModelEntry, seed: int | None = None) -> McmcConfig:
        params = {**self.mcmc, **entry.mcmc}
        return default_mcmc(entry.spec.kind, entry.spec.aggregation, seed=self.base_seed if seed is None else seed, **params)

    def to_config(self) -> dict:
        return {
            "study": {
                "scenarios": list(self.scenarios),
                "replicates": self.replicates,
                "base_seed": self.base_seed,
                "workers": self.workers,
                "reference": self.reference,
            },
            "design": dict(sorted(self.design.items())),
            "mcmc": dict(sorted(self.mcmc.items())),
            "diagnostics": {"rhat_threshold": self.rhat_threshold, "ess_floor": self.ess_floor},
            "priors": self.priors.to_config(),
            "models": [
                {"kind": m.spec.kind, "aggregation": m.spec.aggregation, "radius": m.spec.radius, "mcmc": dict(sorted(m.mcmc.items()))}
                for m in self.models
            ],
        }

    def digest(self) -> str:
        """Hash of everything that affects results (worker count excluded)."""
        cfg = self.to_config()
        cfg["study"].pop("workers")
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]} (allowed: {', '.join(sorted(allowed))})")


def _typed(value, kind, key: str):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{key} must be of type {kind.__name__}, got {value!r}")
    return value


def _design(table: dict) -> dict:
    _check_keys(table, _DESIGN_KEYS, "design")
    types = {"nx": int, "ny": int, "n_true": int, "m_aug": int, "spacing": float, "buffer": float, "sigma": float}
    return {k: _typed(v, types[k], f"design.{k}") for k, v in table.items()}


def _mcmc(table: dict, where: str) -> dict:
    _check_keys(table, _MCMC_KEYS, where)
    types = {
        "n_iterations": int,
        "burn_in": int,
        "thin": int,
        "n_chains": int,
        "target_accept": float,
        "adapt": bool,
        "adapt_decay": float,
        "scales": dict,
        "loglik_every": int,
    }
    out = {k: _typed(v, types[k], f"{where}.{k}") for k, v in table.items()}
    if "loglik_every" in out and out["loglik_every"] < 1:
        raise ConfigError(f"{where}.loglik_every must be >= 1")
    return out


def parse_config(text: str) -> StudyConfig:
    """Parse and validate a study configuration document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
    _check_keys(doc, _TOP_KEYS, "<root>")

    study = doc.get("study", {})
    _check_keys(study, _STUDY_KEYS, "study")
    kw = {}
    if "scenarios" in study:
        ids = study["scenarios"]
        if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
            raise ConfigError("study.scenarios must be a list of integers")
        for i in ids:
            if not 1 <= i <= 10:
                raise ConfigError(f"study.scenarios: unknown scenario {i}; valid ids are 1-10")
        kw["scenarios"] = tuple(ids)
    for key, kind in (("replicates", int), ("base_seed", int), ("workers", int)):
        if key in study:
            kw[key] = _typed(study[key], kind, f"study.{key}")
    if kw.get("replicates", 0) < 0:
        raise ConfigError("study.replicates must be >= 0")
    if kw.get("workers", 1) < 1:
        raise ConfigError("study.workers must be >= 1")
    if "reference" in study:
        if study["reference"] not in ("detector", "cluster"):
            raise ConfigError("study.reference must be 'detector' or 'cluster'")
        kw["reference"] = study["reference"]

    design = _design(doc.get("design", {}))
    mcmc = _mcmc(doc.get("mcmc", {}), "mcmc")

    diag = doc.get("diagnostics", {})
    _check_keys(diag, _DIAG_KEYS, "diagnostics")
    if "rhat_threshold" in diag:
        kw["rhat_threshold"] = _typed(diag["rhat_threshold"], float, "diagnostics.rhat_threshold")
    if "ess_floor" in diag:
        kw["ess_floor"] = _typed(diag["ess_floor"], float, "diagnostics.ess_floor")

    prior_table = doc.get("priors", {})
    _check_keys(prior_table, {f.name for f in fields(Priors)}, "priors")
    priors = Priors(**{k: _typed(v, float, f"priors.{k}") for k, v in prior_table.items()})

    raw_models = doc.get("models")
    if raw_models is None:
        raw_models = [{"kind": k, "aggregation": a} for k, a in DEFAULT_MODELS]
    if not isinstance(raw_models, list):
        raise ConfigError("models must be an array of tables ([[models]])")
    models = []
    for n, m in enumerate(raw_models):
        where = f"models[{n}]"
        _check_keys(m, _MODEL_KEYS, where)
        if "kind" not in m:
            raise ConfigError(f"{where}.kind is required")
        try:
            spec = ModelSpec(
                kind=m["kind"],
                aggregation=m.get("aggregation", 1),
                radius=_typed(m.get("radius", 10.0), float, f"{where}.radius"),
                priors=priors,
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        models.append(ModelEntry(spec=spec, mcmc=_mcmc(m.get("mcmc", {}), f"{where}.mcmc")))

    cfg = StudyConfig(design=design, mcmc=mcmc, priors=priors, models=tuple(models), **kw)
    validate(cfg)
    return cfg


def validate(cfg: StudyConfig) -> None:
    for sid in cfg.scenarios:
        try:
            sc = cfg.scenario(sid)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"design: {exc}") from exc
        grid = sc.grid()
        for n, m in enumerate(cfg.models):
            try:
                m.spec.clusters(grid)
            except ValueError as exc:
                raise ConfigError(f"models[{n}].aggregation: {exc} (scenario {sid})") from exc
    for n, m in enumerate(cfg.models):
        try:
            cfg.mcmc_for(m)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"models[{n}].mcmc: {exc}") from exc


def load_config(path) -> StudyConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def with_overrides(cfg: StudyConfig, **kw) -> StudyConfig:
    return replace(cfg, **kw)
