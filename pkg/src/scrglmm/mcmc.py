"""Metropolis-within-Gibbs sampler for the SCR model family.

One sweep updates, in order: inclusion flags and ``psi`` (exact Gibbs),
activity centres (random-walk Metropolis, one independent proposal per
individual), top-level scalars (random walks on log/logit scales with
Jacobian correction), then cluster random effects (RE/SARE) or mixture labels
and ``pi`` (FM, exact Gibbs).

Proposal scales adapt by Robbins-Monro towards ``target_accept`` during
burn-in only and are frozen afterwards.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from scrglmm.likelihood import (
    ChainState,
    ModelSpec,
    full_logposterior,
    initial_state,
    log_prior,
    marginalize_inclusion,
    resolve_baseline,
    sare_covariance,
)
from scrglmm.simulate import derive_seed
from scrglmm.surfaces import cholesky_lower

DEFAULT_SCALES = {
    "s": 1.0,
    "sigma": 0.1,
    "p0": 0.3,
    "mu": 0.2,
    "log_phi": 0.5,
    "sigma_w": 0.3,
    "eta1": 0.3,
    "eta2": 0.3,
    "W": 0.5,
    "shift": 0.2,
    "whiten": 0.3,
}

# (iterations, burn-in) per model kind; FM depends on aggregation
_DEFAULT_LENGTHS = {
    "SCR": (30_000, 12_000),
    "FE": (30_000, 12_000),
    "RE": (100_000, 20_000),
    "SARE": (100_000, 20_000),
}


@dataclass
class McmcConfig:
    n_iterations: int = 30_000
    burn_in: int = 12_000
    thin: int = 1
    n_chains: int = 3
    seed: int = 0
    target_accept: float = 0.44
    adapt: bool = True
    adapt_decay: float = 0.6
    scales: dict = field(default_factory=dict)
    fixed: tuple = ()
    store_loglik: bool = True
    loglik_every: int = 1
    store_latent: bool = False

    def __post_init__(self):
        self.fixed = tuple(self.fixed)
        if self.n_iterations < 1 or not 0 <= self.burn_in < self.n_iterations:
            raise ValueError(f"need 0 <= burn_in < n_iterations, got {self.burn_in} and {self.n_iterations}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.loglik_every < 1:
            raise ValueError("loglik_every must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        unknown = set(self.scales) - set(DEFAULT_SCALES)
        if unknown:
            raise ValueError(f"unknown proposal blocks {sorted(unknown)}")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    def to_config(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "n_chains": self.n_chains,
            "target_accept": self.target_accept,
            "adapt": self.adapt,
            "adapt_decay": self.adapt_decay,
            "scales": dict(sorted(self.scales.items())),
            "fixed": list(self.fixed),
            "store_loglik": self.store_loglik,
            "loglik_every": self.loglik_every,
            "store_latent": self.store_latent,
        }


def default_mcmc(kind: str, aggregation: int = 1, **overrides) -> McmcConfig:
    """Default iteration counts for a model kind."""
    kind = kind.upper()
    if kind == "FM":
        n, b = (60_000, 12_000) if aggregation == 1 else (20_000, 4_000)
    else:
        n, b = _DEFAULT_LENGTHS[kind]
    params = {"n_iterations": n, "burn_in": b}
    params.update(overrides)
    return McmcConfig(**params)


@dataclass
class Chain:
    """Retained post-burn-in output of one chain."""

    names: tuple
    samples: np.ndarray
    chain_id: int
    seed: int
    runtime: float
    loglik: np.ndarray | None = None
    p0_sum: np.ndarray | None = None
    p0_sumsq: np.ndarray | None = None
    W_trace: np.ndarray | None = None
    p0_trace: np.ndarray | None = None
    extra: list | None = None
    acceptance: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def p0_mean(self) -> np.ndarray:
        return self.p0_sum / self.n_samples


def acceptance_probability(log_ratio) -> np.ndarray:
    """``min(1, exp(log_ratio))`` with NaN and -inf mapped to 0."""
    r = np.asarray(log_ratio, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(np.minimum(r, 0.0))
    return np.where(np.isnan(out), 0.0, out)


def _log_jacobian(transform: str, value: float) -> float:
    if transform == "log":
        return math.log(value)
    if transform == "logit":
        return math.log(value) + math.log1p(-value)
    return 0.0


def _forward(transform: str, value: float) -> float:
    if transform == "log":
        return math.log(value)
    if transform == "logit":
        return float(logit(value))
    return value


def _inverse(transform: str, x: float) -> float:
    if transform == "log":
        return math.exp(x)
    if transform == "logit":
        return float(expit(x))
    return x


def _accept_scalar(log_ratio: float) -> float:
    if log_ratio != log_ratio:
        return 0.0
    return 1.0 if log_ratio >= 0.0 else math.exp(log_ratio)


class Sampler:
    """Mutable sweep engine around one :class:`ChainState`.

    Caches ``D2`` (squared AC-detector distances), ``K`` (half-normal kernel,
    zero beyond the local radius) and ``ll`` (per-row log-likelihood given
    inclusion). All three are current for included rows only; rows with
    ``z = 0`` are refreshed from ``s`` when the inclusion step needs them.
    """

    def __init__(self, spec: ModelSpec, data, cfg: McmcConfig, state: ChainState, rng: np.random.Generator):
        spec.validate(data.grid)
        self.spec = spec
        self.cfg = cfg
        self.rng = rng
        self.st = state
        self.Y = np.asarray(data.Y, dtype=np.uint8)
        self.M, self.J = self.Y.shape
        self.coords = np.ascontiguousarray(data.grid.coords, dtype=float)
        self.cx = self.coords[:, 0].copy()
        self.cy = self.coords[:, 1].copy()
        self.habitat = data.habitat
        self.clusters = spec.clusters(data.grid)
        self.cluster_of = np.asarray(self.clusters.cluster_of)
        self.nc = self.clusters.n_clusters
        self.r2 = None if spec.radius is None else float(spec.radius) ** 2
        self.detected = self.Y.any(axis=1)
        self.undetected = np.flatnonzero(~self.detected)
        self.det_i, self.det_j = np.nonzero(self.Y)
        self.fixed = set(cfg.fixed)

        self.log_scale = {k: math.log(v) for k, v in DEFAULT_SCALES.items()}
        for k, v in cfg.scales.items():
            self.log_scale[k] = math.log(v)
        self.log_scale["s"] = np.full(self.M, self.log_scale["s"])
        self.log_scale["W"] = np.full(self.nc, self.log_scale["W"])
        self.accepts: dict[str, float] = {}
        self.proposals: dict[str, float] = {}
        self.adapting = cfg.adapt
        self.t = 0

        self.D2 = self._sqdist(self.st.s)
        self.K = self._kernel(self.D2, self.st.sigma)
        self.p0 = resolve_baseline(self.st, spec, self.clusters)
        self.ll = np.zeros(self.M)
        rows = self._active()
        with np.errstate(divide="ignore"):
            self.ll[rows] = self._rows_ll(rows, self.K[rows], self.p0)
        self._sare_cache = self._sare_factor(self.st.phi) if spec.kind == "SARE" else None

    # ------------------------------------------------------------------ cache helpers
    def _sqdist(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(-1, 2)
        dx = s[:, 0:1] - self.cx
        dx *= dx
        dy = s[:, 1:2] - self.cy
        dy *= dy
        dx += dy
        return dx

    def _kernel(self, D2: np.ndarray, sigma: float) -> np.ndarray:
        K = np.exp(D2 * (-0.5 / (sigma * sigma)))
        if self.r2 is not None:
            K *= D2 <= self.r2
        return K

    def _terms(self, rows: np.ndarray, K_rows: np.ndarray, p0: np.ndarray) -> np.ndarray:
        """Per-entry Bernoulli log-terms for ``rows`` assuming inclusion."""
        p = K_rows * p0
        q = np.log1p(-p)
        if self.det_i.size:
            pos = np.full(self.M, -1)
            pos[rows] = np.arange(rows.size)
            pi = pos[self.det_i]
            keep = pi >= 0
            if keep.any():
                ri, cj = pi[keep], self.det_j[keep]
                q[ri, cj] = np.log(p[ri, cj])
        return q

    def _rows_ll(self, rows: np.ndarray, K_rows: np.ndarray, p0: np.ndarray) -> np.ndarray:
        return self._terms(rows, K_rows, p0).sum(axis=1)

    def _cluster_sums(self, q: np.ndarray) -> np.ndarray:
        return np.bincount(self.cluster_of, weights=q.sum(axis=0), minlength=self.nc)

    def _active(self) -> np.ndarray:
        return np.flatnonzero(self.st.z)

    def _refresh_rows(self, rows: np.ndarray) -> None:
        self.D2[rows] = self._sqdist(self.st.s[rows])
        self.K[rows] = self._kernel(self.D2[rows], self.st.sigma)
        self.ll[rows] = self._rows_ll(rows, self.K[rows], self.p0)

    def _sare_factor(self, phi: float):
        cov = sare_covariance(self.clusters, phi)
        L = cholesky_lower(cov)
        Linv = np.linalg.inv(L)
        Q = Linv.T @ Linv
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return {"phi": phi, "L": L, "Linv": Linv, "Q": Q, "logdet": logdet}

    def _sare_logprior(self, W: np.ndarray, cache) -> float:
        return -0.5 * (W.size * math.log(2 * math.pi) + cache["logdet"] + float(W @ cache["Q"] @ W))

    # ------------------------------------------------------------------ adaptation
    def _gamma(self) -> float:
        return (self.t + 1.0) ** (-self.cfg.adapt_decay)

    def _record(self, block: str, alpha: float, accepted: bool) -> None:
        if self.adapting:
            self.log_scale[block] += self._gamma() * (alpha - self.cfg.target_accept)
        self.accepts[block] = self.accepts.get(block, 0) + int(accepted)
        self.proposals[block] = self.proposals.get(block, 0) + 1

    def _record_vector(self, block: str, alpha: np.ndarray, accepted: np.ndarray) -> None:
        if self.adapting:
            self.log_scale[block] += self._gamma() * (alpha - self.cfg.target_accept)
        self.accepts[block] = self.accepts.get(block, 0) + int(np.count_nonzero(accepted))
        self.proposals[block] = self.proposals.get(block, 0) + accepted.size

    def scale(self, block: str):
        return np.exp(self.log_scale[block])

    # ------------------------------------------------------------------ kernels
    def inclusion_probabilities(self) -> np.ndarray:
        """Full-conditional ``Pr(z_i = 1)`` for the undetected rows."""
        st = self.st
        rows = self.undetected
        stale = rows[st.z[rows] == 0]
        if stale.size:
            self._refresh_rows(stale)
        log_odds = math.log(st.psi) - math.log1p(-st.psi) + self.ll[rows]
        return expit(log_odds)

    def update_inclusion(self) -> None:
        st = self.st
        if "z" not in self.fixed:
            rows = self.undetected
            if rows.size:
                prob = self.inclusion_probabilities()
                st.z[rows] = (self.rng.random(rows.size) < prob).astype(st.z.dtype)
        if "psi" not in self.fixed:
            k = int(st.z.sum())
            st.psi = float(self.rng.beta(1.0 + k, 1.0 + self.M - k))

    def update_activity_centers(self) -> None:
        if "s" in self.fixed:
            return
        st = self.st
        step = self.scale("s")[:, None] * self.rng.standard_normal((self.M, 2))
        prop = st.s + step
        u = self.rng.random(self.M)
        inside = self.habitat.contains(prop)
        active = st.z.astype(bool)
        alpha = np.zeros(self.M)

        rows = np.flatnonzero(active & inside)
        if rows.size:
            D2p = self._sqdist(prop[rows])
            Kp = self._kernel(D2p, st.sigma)
            llp = self._rows_ll(rows, Kp, self.p0)
            a = acceptance_probability(llp - self.ll[rows])
            alpha[rows] = a
            ok = u[rows] < a
            acc_rows = rows[ok]
            st.s[acc_rows] = prop[acc_rows]
            self.D2[acc_rows] = D2p[ok]
            self.K[acc_rows] = Kp[ok]
            self.ll[acc_rows] = llp[ok]

        # excluded rows carry no likelihood: in-habitat moves always succeed
        idle = ~active & inside
        alpha[idle] = 1.0
        st.s[idle] = prop[idle]
        self._record_vector("s", alpha, u < alpha)

    def _scalar_step(self, name: str, block: str, transform: str, evaluate: Callable[[float], tuple]) -> None:
        """Generic random-walk step for one scalar.

        ``evaluate(new_value)`` returns ``(delta_loglik, commit)``; ``commit()``
        updates the caches when the proposal is accepted.
        """
        st = self.st
        cur = getattr(st, name)
        x = _forward(transform, cur)
        xp = x + math.exp(self.log_scale[block]) * self.rng.standard_normal()
        new = _inverse(transform, xp)
        u = self.rng.random()
        valid = (transform != "logit" or 0.0 < new < 1.0) and (transform != "log" or new > 0.0)
        if valid:
            lp_cur = log_prior(st, self.spec)
            setattr(st, name, new)
            lp_new = log_prior(st, self.spec)
            setattr(st, name, cur)
            valid = lp_new > -math.inf
        if not valid:
            self._record(block, 0.0, False)
            return
        dll, commit = evaluate(new)
        log_r = dll + lp_new - lp_cur + _log_jacobian(transform, new) - _log_jacobian(transform, cur)
        a = _accept_scalar(log_r)
        ok = u < a
        if ok:
            setattr(st, name, new)
            commit()
        self._record(block, a, ok)

    def _baseline_step(self, name: str, block: str, transform: str) -> None:
        st = self.st
        rows = self._active()
        K_rows = self.K[rows]

        def evaluate(new):
            cur = getattr(st, name)
            setattr(st, name, new)
            p0p = resolve_baseline(st, self.spec, self.clusters)
            setattr(st, name, cur)
            llp = self._rows_ll(rows, K_rows, p0p)
            dll = float(np.sum(llp - self.ll[rows]))

            def commit():
                self.p0 = p0p
                self.ll[rows] = llp

            return dll, commit

        self._scalar_step(name, block, transform, evaluate)

    def _sigma_step(self) -> None:
        rows = self._active()

        def evaluate(new):
            Kp = self._kernel(self.D2[rows], new)
            llp = self._rows_ll(rows, Kp, self.p0)
            dll = float(np.sum(llp - self.ll[rows]))

            def commit():
                self.K[rows] = Kp
                self.ll[rows] = llp

            return dll, commit

        self._scalar_step("sigma", "sigma", "log", evaluate)

    def _phi_step(self) -> None:
        W = np.asarray(self.st.W, dtype=float)

        def evaluate(new):
            try:
                cache = self._sare_factor(new)
            except np.linalg.LinAlgError:
                return -math.inf, lambda: None
            d = self._sare_logprior(W, cache) - self._sare_logprior(W, self._sare_cache)

            def commit():
                self._sare_cache = cache

            return d, commit

        self._scalar_step("phi", "log_phi", "log", evaluate)

    def _sigma_w_step(self) -> None:
        st = self.st
        W = np.asarray(st.W, dtype=float)
        ss = float(W @ W)

        def evaluate(new):
            cur = st.sigma_w
            d = -W.size * (math.log(new) - math.log(cur)) - 0.5 * ss * (1.0 / new**2 - 1.0 / cur**2)
            return d, lambda: None

        self._scalar_step("sigma_w", "sigma_w", "log", evaluate)

    def update_scalars(self) -> None:
        kind = self.spec.kind
        if "sigma" not in self.fixed:
            self._sigma_step()
        if kind == "SCR":
            if "p0" not in self.fixed:
                self._baseline_step("p0", "p0", "logit")
        elif kind in ("RE", "SARE", "FE"):
            if "mu" not in self.fixed:
                self._baseline_step("mu", "mu", "identity")
            if kind == "SARE" and "log_phi" not in self.fixed and "phi" not in self.fixed:
                self._phi_step()
            if kind == "RE" and "sigma_w" not in self.fixed:
                self._sigma_w_step()
        elif kind == "FM":
            if "eta1" not in self.fixed:
                self._baseline_step("eta1", "eta1", "logit")
            if "eta2" not in self.fixed:
                self._baseline_step("eta2", "eta2", "logit")

    def update_random_effects(self) -> None:
        if self.spec.kind not in ("RE", "SARE") or "W" in self.fixed:
            return
        st = self.st
        rows = self._active()
        K_rows = self.K[rows]
        W = np.array(st.W, dtype=float)
        Wp = W + self.scale("W") * self.rng.standard_normal(self.nc)
        u = self.rng.random(self.nc)
        p0p = expit(st.mu + Wp[self.cluster_of])
        q_cur = self._terms(rows, K_rows, self.p0)
        q_new = self._terms(rows, K_rows, p0p)
        dL = self._cluster_sums(q_new) - self._cluster_sums(q_cur)
        dL[np.isnan(dL)] = -math.inf

        if self.spec.kind == "RE":
            dprior = -0.5 * (Wp * Wp - W * W) / st.sigma_w**2
            alpha = acceptance_probability(dL + dprior)
            ok = u < alpha
            W = np.where(ok, Wp, W)
        else:
            # sequential single-site updates against the MVN full conditional
            Q = self._sare_cache["Q"]
            QW = Q @ W
            alpha = np.zeros(self.nc)
            ok = np.zeros(self.nc, dtype=bool)
            for c in range(self.nc):
                w, wp = W[c], Wp[c]
                qcc = Q[c, c]
                dprior = -0.5 * (qcc * (wp * wp - w * w) + 2.0 * (wp - w) * (QW[c] - qcc * w))
                a = _accept_scalar(float(dL[c]) + dprior)
                alpha[c] = a
                if u[c] < a:
                    ok[c] = True
                    QW += Q[:, c] * (wp - w)
                    W[c] = wp
        st.W = W
        if ok.any():
            take = ok[self.cluster_of]
            self.p0 = np.where(take, p0p, self.p0)
            self.ll[rows] = np.where(take[None, :], q_new, q_cur).sum(axis=1)
        self._record_vector("W", alpha, ok)

    def _membership_terms(self):
        st = self.st
        rows = self._active()
        K_rows = self.K[rows]
        q1 = self._terms(rows, K_rows, np.full(self.J, st.eta1))
        q2 = self._terms(rows, K_rows, np.full(self.J, st.eta2))
        d = self._cluster_sums(q2) - self._cluster_sums(q1)
        log_odds = math.log(st.pi) - math.log1p(-st.pi) + d
        prob = np.where(np.isnan(log_odds), 0.5, expit(log_odds))
        return rows, q1, q2, prob

    def membership_probabilities(self) -> np.ndarray:
        """Full-conditional ``Pr(u_c = 1)`` for every cluster."""
        return self._membership_terms()[3]

    def update_location_shift(self) -> None:
        """Joint move ``mu + d, W - d`` that leaves every ``p0_j`` unchanged.

        Only the priors enter the ratio, so the likelihood caches stay valid.
        It lets the intercept travel along the ridge where ``mu`` and the mean
        of ``W`` trade off, which single-site moves cross very slowly.
        """
        if self.spec.kind not in ("RE", "SARE") or self.fixed & {"mu", "W", "shift"}:
            return
        st = self.st
        d = float(self.scale("shift") * self.rng.standard_normal())
        a = _accept_scalar(self.shift_log_ratio(d))
        accepted = bool(self.rng.random() < a)
        if accepted:
            st.mu = st.mu + d
            st.W = np.asarray(st.W, dtype=float) - d
        self._record("shift", a, accepted)

    def shift_log_ratio(self, d: float) -> float:
        """Log posterior ratio of the shifted state ``(mu + d, W - d)``."""
        st = self.st
        W = np.asarray(st.W, dtype=float)
        log_ratio = -0.5 * ((st.mu + d) ** 2 - st.mu**2) / self.spec.priors.mu_sd**2
        if self.spec.kind == "RE":
            return log_ratio - 0.5 * (d * d * W.size - 2.0 * d * W.sum()) / st.sigma_w**2
        Q = self._sare_cache["Q"]
        return log_ratio - 0.5 * (d * d * Q.sum() - 2.0 * d * (Q @ W).sum())

    def update_effect_scale(self) -> None:
        """Joint move of the random-effect scale with the whitened effects held.

        RE proposes ``sigma_w'`` with ``W' = W sigma_w' / sigma_w``; SARE proposes
        ``phi'`` with ``W' = L(phi') L(phi)^-1 W``. In the whitened coordinates the
        effect prior and the Jacobian cancel, leaving the likelihood, the
        top-level prior and the log-walk Jacobian in the ratio.
        """
        kind = self.spec.kind
        if kind not in ("RE", "SARE") or self.fixed & {"W", "whiten", "sigma_w", "phi", "log_phi"}:
            return
        st = self.st
        name = "sigma_w" if kind == "RE" else "phi"
        new = math.exp(math.log(getattr(st, name)) + float(self.scale("whiten")) * self.rng.standard_normal())
        u = self.rng.random()
        log_r, commit = self.effect_scale_log_ratio(new)
        a = _accept_scalar(log_r)
        ok = u < a
        if ok:
            commit()
        self._record("whiten", a, ok)

    def effect_scale_log_ratio(self, new: float):
        """``(log ratio, commit)`` for the whitened scale move to ``new``."""
        st = self.st
        name = "sigma_w" if self.spec.kind == "RE" else "phi"
        cur = getattr(st, name)
        W = np.asarray(st.W, dtype=float)
        lp_cur = log_prior(st, self.spec)
        setattr(st, name, new)
        lp_new = log_prior(st, self.spec)
        setattr(st, name, cur)
        if not lp_new > -math.inf:
            return -math.inf, lambda: None
        cache = None
        if name == "sigma_w":
            Wp = W * (new / cur)
        else:
            try:
                cache = self._sare_factor(new)
            except np.linalg.LinAlgError:
                return -math.inf, lambda: None
            Wp = cache["L"] @ (self._sare_cache["Linv"] @ W)
        rows = self._active()
        p0p = expit(st.mu + Wp[self.cluster_of])
        with np.errstate(divide="ignore", invalid="ignore"):
            llp = self._rows_ll(rows, self.K[rows], p0p)
            dll = float(np.sum(llp - self.ll[rows]))
        log_r = dll + lp_new - lp_cur + math.log(new) - math.log(cur)

        def commit():
            setattr(st, name, new)
            st.W = Wp
            self.p0 = p0p
            self.ll[rows] = llp
            if cache is not None:
                self._sare_cache = cache

        return (log_r if log_r == log_r else -math.inf), commit

    def update_membership(self) -> None:
        if self.spec.kind != "FM":
            return
        st = self.st
        if "u" not in self.fixed:
            rows, q1, q2, prob = self._membership_terms()
            st.u = (self.rng.random(self.nc) < prob).astype(np.uint8)
            take = st.u.astype(bool)[self.cluster_of]
            self.p0 = np.where(take, st.eta2, st.eta1)
            self.ll[rows] = np.where(take[None, :], q2, q1).sum(axis=1)
        if "pi" not in self.fixed:
            k = int(np.sum(st.u))
            st.pi = float(self.rng.beta(1.0 + k, 1.0 + self.nc - k))

    def sweep(self) -> None:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            self.update_inclusion()
            self.update_activity_centers()
            self.update_scalars()
            if self.spec.kind in ("RE", "SARE"):
                self.update_random_effects()
                self.update_location_shift()
                self.update_effect_scale()
            elif self.spec.kind == "FM":
                self.update_membership()
        self.t += 1

    # ------------------------------------------------------------------ outputs
    def pointwise(self) -> np.ndarray:
        """z-marginalised per-row log-likelihood at the current state."""
        st = self.st
        ll = self.ll.copy()
        idle = np.flatnonzero(st.z == 0)
        if idle.size:
            with np.errstate(divide="ignore"):
                K = self._kernel(self._sqdist(st.s[idle]), st.sigma)
                ll[idle] = self._rows_ll(idle, K, self.p0)
        return marginalize_inclusion(ll, self.detected, st.psi)


    def values(self, names) -> list:
        st = self.st
        out = []
        for n in names:
            if n == "N":
                out.append(float(np.sum(st.z)))
            elif n == "log_phi":
                out.append(math.log(st.phi))
            else:
                out.append(float(getattr(st, n)))
        return out

    def acceptance_rates(self) -> dict:
        return {k: self.accepts[k] / self.proposals[k] for k in sorted(self.accepts) if self.proposals[k]}

    def final_scales(self) -> dict:
        out = {}
        for k, v in sorted(self.log_scale.items()):
            if np.ndim(v) == 0:
                out[k] = float(math.exp(v))
            elif np.size(v):
                out[k] = float(np.exp(np.mean(v)))
        return out

    def reset_counters(self) -> None:
        self.accepts.clear()
        self.proposals.clear()


def _stateless(method_name: str):
    def step(state: ChainState, data, spec: ModelSpec, rng: np.random.Generator, cfg: McmcConfig | None = None) -> ChainState:
        cfg = cfg or McmcConfig(n_iterations=1, burn_in=0, adapt=False)
        sampler = Sampler(spec, data, cfg, state.copy(), rng)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            getattr(sampler, method_name)()
        return sampler.st

    step.__name__ = method_name
    step.__doc__ = f"Apply :meth:`Sampler.{method_name}` once to a copy of ``state``."
    return step


update_inclusion = _stateless("update_inclusion")
update_activity_centers = _stateless("update_activity_centers")
update_scalars = _stateless("update_scalars")
update_random_effects = _stateless("update_random_effects")
update_membership = _stateless("update_membership")
update_location_shift = _stateless("update_location_shift")
update_effect_scale = _stateless("update_effect_scale")


def chain_seed(seed: int, chain_id: int) -> int:
    return derive_seed(int(seed), "chain", int(chain_id))


def parameter_names(spec: ModelSpec) -> tuple:
    top = spec.top_level()
    return top[:1] + ("psi",) + top[1:]


class InitializationError(RuntimeError):
    pass


def run_chain(
    spec: ModelSpec,
    data,
    cfg: McmcConfig,
    chain_id: int = 0,
    init: ChainState | None = None,
    record: Callable[[ChainState], object] | None = None,
) -> Chain:
    """Run one chain; output depends only on ``(cfg.seed, chain_id)`` and inputs.

    ``record`` is an optional callback evaluated on every retained state; its
    return values are collected in ``Chain.extra``.
    """
    spec.validate(data.grid)
    seed = chain_seed(cfg.seed, chain_id)
    rng = np.random.default_rng(seed)
    state = init.copy() if init is not None else initial_state(data, spec, rng)
    lp0 = full_logposterior(state, data, spec)
    if not np.isfinite(lp0):
        raise InitializationError(
            "non-finite log-posterior at initialisation: "
            f"log_prior={log_prior(state, spec)}, psi={state.psi}, sigma={state.sigma}, "
            f"N={int(np.sum(state.z))}, kind={spec.kind}, "
            f"ACs inside habitat={bool(data.habitat.contains(state.s).all())}"
        )
    sampler = Sampler(spec, data, cfg, state, rng)
    names = parameter_names(spec)
    R = cfg.n_retained
    samples = np.empty((R, len(names)))
    every = cfg.loglik_every
    loglik = np.empty((-(-R // every), sampler.M)) if cfg.store_loglik else None
    p0_sum = np.zeros(sampler.J)
    p0_sumsq = np.zeros(sampler.J)
    W_trace = np.empty((R, sampler.nc)) if cfg.store_latent and spec.has_random_effects else None
    p0_trace = np.empty((R, sampler.J)) if cfg.store_latent else None
    extra = [] if record is not None else None

    for _ in range(cfg.burn_in):
        sampler.sweep()
    sampler.adapting = False
    sampler.reset_counters()
    r = 0
    start = time.perf_counter()
    for t in range(cfg.n_iterations - cfg.burn_in):
        sampler.sweep()
        if (t + 1) % cfg.thin or r >= R:
            continue
        samples[r] = sampler.values(names)
        p0 = sampler.p0
        p0_sum += p0
        p0_sumsq += p0 * p0
        if loglik is not None and r % every == 0:
            loglik[r // every] = sampler.pointwise()
        if W_trace is not None:
            W_trace[r] = sampler.st.W
        if p0_trace is not None:
            p0_trace[r] = p0
        if extra is not None:
            extra.append(record(sampler.st))
        r += 1
    runtime = time.perf_counter() - start
    return Chain(
        names=names,
        samples=samples,
        chain_id=chain_id,
        seed=seed,
        runtime=runtime,
        loglik=loglik,
        p0_sum=p0_sum,
        p0_sumsq=p0_sumsq,
        W_trace=W_trace,
        p0_trace=p0_trace,
        extra=extra,
        acceptance=sampler.acceptance_rates(),
        scales=sampler.final_scales(),
    )


def run_chains(spec: ModelSpec, data, cfg: McmcConfig, **kwargs) -> list[Chain]:
    return [run_chain(spec, data, cfg, chain_id=k, **kwargs) for k in range(cfg.n_chains)]
