"""Model definitions and exact log-density evaluation for the five SCR models.

* ``SCR``  homogeneous baseline detection ``p0``.
* ``RE``   ``logit(p0_c) = mu + W_c`` with independent ``W_c ~ N(0, sigma_w^2)``.
* ``SARE`` ``logit(p0_c) = mu + W_c`` with ``W ~ MVN(0, Gamma(phi))``,
  ``Gamma_cc' = exp(-phi * dist(c, c'))``.
* ``FM``   two-group mixture ``p0_c = (1 - u_c) eta1 + u_c eta2``, ``u_c ~ Bern(pi)``.
* ``FE``   ``logit(p0_j) = mu + x_j`` with a known per-detector covariate ``x``.

Random effects and mixture labels live on detector clusters (``c``); with
aggregation factor 1 each detector is its own cluster.

Every parameter density here is on the natural scale of the parameter
(``p0``, ``phi``, ``sigma``...). Samplers that move on transformed scales add
the Jacobian themselves.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit, logit

from scrglmm.geometry import ClusterMap, DetectorGrid, aggregate_detectors
from scrglmm.surfaces import cholesky_lower, exponential_covariance

MODEL_KINDS = ("SCR", "RE", "SARE", "FM", "FE")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Priors:
    sigma_upper: float = 50.0
    logit_p0_sd: float = 2.0
    mu_sd: float = 2.0
    log_phi_sd: float = 5.0
    sigma_w_upper: float = 10.0

    def to_config(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    aggregation: int = 1
    priors: Priors = field(default_factory=Priors)
    radius: float | None = 10.0
    covariate: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        object.__setattr__(self, "kind", kind)
        if int(self.aggregation) != self.aggregation or self.aggregation < 1:
            raise ValueError(f"aggregation must be a positive integer, got {self.aggregation}")
        object.__setattr__(self, "aggregation", int(self.aggregation))
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive or None")
        if kind == "FE" and self.aggregation != 1:
            raise ValueError("FE is defined per detector; aggregation must be 1")
        if self.covariate is not None:
            cov = np.array(self.covariate, dtype=float)
            cov.setflags(write=False)
            object.__setattr__(self, "covariate", cov)

    @property
    def label(self) -> str:
        if self.kind in ("RE", "SARE", "FM"):
            return f"{self.kind}-{self.aggregation}x{self.aggregation}"
        return self.kind

    @property
    def has_random_effects(self) -> bool:
        return self.kind in ("RE", "SARE")

    def clusters(self, grid: DetectorGrid) -> ClusterMap:
        return aggregate_detectors(grid, self.aggregation)

    def validate(self, grid: DetectorGrid) -> None:
        aggregate_detectors(grid, self.aggregation)
        if self.kind == "FE":
            if self.covariate is None:
                raise ValueError("FE requires covariate: supply the per-detector effect (dataset truth block)")
            if self.covariate.shape != (grid.J,):
                raise ValueError(f"FE covariate has length {self.covariate.shape[0]}, grid has {grid.J} detectors")

    def with_covariate(self, covariate: np.ndarray) -> "ModelSpec":
        return replace(self, covariate=covariate)

    def top_level(self) -> tuple[str, ...]:
        """Names of the monitored top-level parameters."""
        extra = {
            "SCR": ("p0",),
            "RE": ("mu", "sigma_w"),
            "SARE": ("mu", "log_phi"),
            "FM": ("eta1", "eta2", "pi"),
            "FE": ("mu",),
        }[self.kind]
        return ("N", "sigma") + extra

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "aggregation": self.aggregation,
            "radius": self.radius,
            "priors": self.priors.to_config(),
            "covariate": None if self.covariate is None else "supplied",
        }

    @classmethod
    def from_config(cls, cfg: dict, covariate: np.ndarray | None = None) -> "ModelSpec":
        return cls(
            kind=cfg["kind"],
            aggregation=int(cfg.get("aggregation", 1)),
            radius=cfg.get("radius", 10.0),
            priors=Priors(**cfg.get("priors", {})),
            covariate=covariate,
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        if self.covariate is not None:
            blob += np.ascontiguousarray(self.covariate).tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ChainState:
    """One point in the joint parameter/latent space.

    Only the fields relevant to the model kind are populated; the rest stay
    ``None``. Random effects ``W`` and labels ``u`` are per cluster.
    """

    psi: float
    sigma: float
    s: np.ndarray
    z: np.ndarray
    p0: float | None = None
    mu: float | None = None
    W: np.ndarray | None = None
    sigma_w: float | None = None
    phi: float | None = None
    eta1: float | None = None
    eta2: float | None = None
    pi: float | None = None
    u: np.ndarray | None = None

    def copy(self) -> "ChainState":
        out = replace(self)
        for name in ("s", "z", "W", "u"):
            v = getattr(out, name)
            if v is not None:
                setattr(out, name, np.array(v, copy=True))
        return out

    @property
    def N(self) -> int:
        return int(np.sum(self.z))


def half_normal_detection(p0, d, sigma):
    """``p0 * exp(-d^2 / (2 sigma^2))``."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    d = np.asarray(d, dtype=float)
    return np.asarray(p0, dtype=float) * np.exp(-(d * d) / (2.0 * np.asarray(sigma, dtype=float) ** 2))


def resolve_baseline(state: ChainState, spec: ModelSpec, clusters: ClusterMap) -> np.ndarray:
    """Per-detector baseline detection probabilities implied by ``state``."""
    J = clusters.cluster_of.shape[0]
    kind = spec.kind
    if kind == "SCR":
        return np.full(J, float(state.p0))
    if kind in ("RE", "SARE"):
        return expit(state.mu + clusters.expand(state.W))
    if kind == "FM":
        u = clusters.expand(state.u).astype(float)
        return (1.0 - u) * state.eta1 + u * state.eta2
    if spec.covariate is None:
        raise ValueError("FE requires covariate")
    return expit(state.mu + spec.covariate)


def _bernoulli_terms(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(y > 0, np.log(p), np.log1p(-p))


def detection_matrix(s: np.ndarray, p0: np.ndarray, sigma: float, coords: np.ndarray, radius: float | None) -> np.ndarray:
    """``p_ij`` for every row of ``s``; zero beyond ``radius`` when it is set."""
    s = np.asarray(s, dtype=float).reshape(-1, 2)
    d2 = (s[:, 0:1] - coords[None, :, 0]) ** 2 + (s[:, 1:2] - coords[None, :, 1]) ** 2
    p = np.asarray(p0, dtype=float)[None, :] * np.exp(-d2 / (2.0 * sigma * sigma))
    if radius is not None:
        p[d2 > radius * radius] = 0.0
    return p


def individual_loglik(
    y_i: np.ndarray,
    s_i: np.ndarray,
    z_i: int,
    p0: np.ndarray,
    sigma: float,
    grid: DetectorGrid,
    radius: float | None = None,
) -> float:
    """Log-probability of one capture history given its activity centre and inclusion flag."""
    y_i = np.asarray(y_i)
    if not z_i:
        return 0.0 if not y_i.any() else -math.inf
    p = detection_matrix(s_i, p0, sigma, grid.coords, radius)[0]
    return float(_bernoulli_terms(y_i, p).sum())


def row_logliks(
    Y: np.ndarray, s: np.ndarray, z: np.ndarray, p0: np.ndarray, sigma: float, coords: np.ndarray, radius: float | None
) -> np.ndarray:
    """Vector of ``individual_loglik`` over all rows."""
    p = detection_matrix(s, p0, sigma, coords, radius)
    ll = _bernoulli_terms(Y, p).sum(axis=1)
    z = np.asarray(z).astype(bool)
    detected = np.asarray(Y).any(axis=1)
    return np.where(z, ll, np.where(detected, -math.inf, 0.0))


def _normal_logpdf(x, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * (x / sd) ** 2


def _uniform_logpdf(x, upper):
    return -math.log(upper) if 0.0 < x < upper else -math.inf


def log_prior(state: ChainState, spec: ModelSpec) -> float:
    """Sum of prior log-densities of the top-level parameters (natural scale)."""
    pr = spec.priors
    lp = _uniform_logpdf(state.psi, 1.0) + _uniform_logpdf(state.sigma, pr.sigma_upper)
    kind = spec.kind
    if kind == "SCR":
        p0 = state.p0
        if not 0.0 < p0 < 1.0:
            return -math.inf
        lp += float(_normal_logpdf(logit(p0), pr.logit_p0_sd)) - math.log(p0 * (1.0 - p0))
    elif kind in ("RE", "SARE", "FE"):
        lp += float(_normal_logpdf(state.mu, pr.mu_sd))
        if kind == "RE":
            lp += _uniform_logpdf(state.sigma_w, pr.sigma_w_upper)
        elif kind == "SARE":
            if not state.phi > 0:
                return -math.inf
            lp += float(_normal_logpdf(math.log(state.phi), pr.log_phi_sd)) - math.log(state.phi)
    elif kind == "FM":
        lp += _uniform_logpdf(state.eta1, 1.0) + _uniform_logpdf(state.eta2, 1.0) + _uniform_logpdf(state.pi, 1.0)
        if state.eta1 > state.eta2:
            return -math.inf
    return float(lp)


def sare_covariance(clusters: ClusterMap, phi: float) -> np.ndarray:
    return exponential_covariance(clusters.centroid_distances(), phi)


def mvn_zero_logpdf(x: np.ndarray, cov: np.ndarray) -> float:
    L = cholesky_lower(cov)
    v = np.linalg.solve(L, x) if L.shape[0] > 0 else x
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (x.shape[0] * _LOG_2PI + logdet + v @ v))


def latent_logprior(state: ChainState, spec: ModelSpec, clusters: ClusterMap) -> float:
    """Prior log-density of the random effects ``W`` or mixture labels ``u``."""
    kind = spec.kind
    if kind == "RE":
        if not 0 < state.sigma_w:
            return -math.inf
        return float(_normal_logpdf(state.W, state.sigma_w).sum())
    if kind == "SARE":
        if not state.phi > 0:
            return -math.inf
        return mvn_zero_logpdf(np.asarray(state.W, dtype=float), sare_covariance(clusters, state.phi))
    if kind == "FM":
        if not 0.0 < state.pi < 1.0:
            return -math.inf
        k = float(np.sum(state.u))
        return k * math.log(state.pi) + (len(state.u) - k) * math.log1p(-state.pi)
    return 0.0


def _data_parts(data):
    return data.Y, data.grid, data.habitat


def full_logposterior(state: ChainState, data, spec: ModelSpec) -> float:
    """Unnormalised joint log-density of all parameters, latents and data."""
    Y, grid, habitat = _data_parts(data)
    clusters = spec.clusters(grid)
    lp = log_prior(state, spec)
    if not np.isfinite(lp):
        return -math.inf
    lp += latent_logprior(state, spec, clusters)
    if not np.isfinite(lp):
        return -math.inf
    s = np.asarray(state.s, dtype=float)
    if not habitat.contains(s).all() or habitat.area <= 0:
        return -math.inf
    M = Y.shape[0]
    lp += -M * math.log(habitat.area)
    k = float(np.sum(state.z))
    lp += k * math.log(state.psi) + (M - k) * math.log1p(-state.psi)
    p0 = resolve_baseline(state, spec, clusters)
    lp += float(row_logliks(Y, s, state.z, p0, state.sigma, grid.coords, spec.radius).sum())
    return float(lp)


def pointwise_loglik(state: ChainState, data, spec: ModelSpec) -> np.ndarray:
    """Per-row likelihood with the inclusion flag integrated out.

    ``f(Y_i) = psi * prod_j Bern(y_ij; p_ij) + (1 - psi) * [Y_i == 0]``.
    """
    Y, grid, _ = _data_parts(data)
    clusters = spec.clusters(grid)
    p0 = resolve_baseline(state, spec, clusters)
    ones = np.ones(Y.shape[0], dtype=np.uint8)
    ll = row_logliks(Y, state.s, ones, p0, state.sigma, grid.coords, spec.radius)
    return marginalize_inclusion(ll, Y.any(axis=1), state.psi)


def marginalize_inclusion(ll_included: np.ndarray, detected: np.ndarray, psi: float) -> np.ndarray:
    with_in = math.log(psi) + ll_included
    return np.where(detected, with_in, np.logaddexp(with_in, math.log1p(-psi)))


def initial_detection_frequency(Y: np.ndarray) -> float:
    """Fraction of detectors with at least one detection, clamped to [0.01, 0.99]."""
    if Y.shape[1] == 0:
        return 0.5
    return float(np.clip(np.mean(Y.any(axis=0)), 0.01, 0.99))


def initial_state(data, spec: ModelSpec, rng: np.random.Generator) -> ChainState:
    """Starting point: psi=0.5, sigma=2, detected ACs at detection centroids."""
    Y, grid, habitat = _data_parts(data)
    M = Y.shape[0]
    detected = Y.any(axis=1)
    s = np.column_stack(
        [rng.uniform(habitat.xmin, habitat.xmax, M), rng.uniform(habitat.ymin, habitat.ymax, M)]
    )
    if detected.any():
        counts = Y[detected].sum(axis=1, keepdims=True).astype(float)
        s[detected] = (Y[detected] @ grid.coords) / counts
    psi = 0.5
    z = np.where(detected, 1, (rng.random(M) < psi).astype(np.uint8)).astype(np.uint8)
    freq = initial_detection_frequency(Y)
    state = ChainState(psi=psi, sigma=2.0, s=s, z=z)
    clusters = spec.clusters(grid)
    kind = spec.kind
    if kind == "SCR":
        state.p0 = freq
    elif kind in ("RE", "SARE", "FE"):
        state.mu = float(logit(freq))
        if kind != "FE":
            state.W = np.zeros(clusters.n_clusters)
        if kind == "RE":
            state.sigma_w = 1.0
        elif kind == "SARE":
            state.phi = 1.0
    elif kind == "FM":
        state.eta2 = freq
        state.eta1 = 0.5 * freq
        state.pi = 0.5
        state.u = np.ones(clusters.n_clusters, dtype=np.uint8)
    return state
