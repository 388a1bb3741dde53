"""Estimator-quality metrics, surface SSE and WAIC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from scrglmm.likelihood import MODEL_KINDS


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    n_draws: int

    @property
    def interval(self) -> tuple[float, float]:
        return (self.q025, self.q975)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "q025": self.q025, "q50": self.q50, "q975": self.q975, "n_draws": self.n_draws}


def posterior_summary(samples) -> PosteriorSummary:
    """Mean, divisor-R SD and equal-tailed 95% interval (type-7 quantiles)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    q = np.quantile(x, [0.025, 0.5, 0.975], method="linear")
    return PosteriorSummary(
        mean=float(x.mean()),
        sd=float(x.std(ddof=0)),
        q025=float(q[0]),
        q50=float(q[1]),
        q975=float(q[2]),
        n_draws=int(x.size),
    )


def relative_bias(posterior_mean: float, truth: float) -> float:
    if truth == 0:
        raise ValueError("relative bias is undefined for a zero true value")
    return (posterior_mean - truth) / truth


def coefficient_of_variation(samples) -> float:
    """Posterior SD (divisor R) over posterior mean."""
    x = np.asarray(samples, dtype=float).ravel()
    m = x.mean()
    if m == 0:
        raise ValueError("coefficient of variation is undefined for a zero mean")
    return float(x.std(ddof=0) / m)


def coverage_indicator(ci, truth: float) -> bool:
    lo, hi = ci
    if lo > hi:
        raise ValueError(f"interval lower bound {lo} exceeds upper bound {hi}")
    return bool(lo <= truth <= hi)


def coverage_rate(indicators, converged=None) -> float:
    """Share of covered intervals among converged fits (NaN if none)."""
    ind = np.asarray(indicators, dtype=bool)
    if converged is not None:
        ind = ind[np.asarray(converged, dtype=bool)]
    return float(ind.mean()) if ind.size else math.nan


def sse_surface(p0_samples, truth) -> float:
    """Posterior expected squared error summed over detectors."""
    P = np.atleast_2d(np.asarray(p0_samples, dtype=float))
    t = np.asarray(truth, dtype=float).ravel()
    if P.shape[1] != t.size:
        raise ValueError(f"draws have {P.shape[1]} detectors, truth has {t.size}")
    return float(((P - t) ** 2).mean(axis=0).sum())


def sse_from_moments(p0_sum, p0_sumsq, n_draws: int, truth) -> float:
    """``sse_surface`` from running sums of draws and squared draws."""
    t = np.asarray(truth, dtype=float)
    mean = np.asarray(p0_sum, dtype=float) / n_draws
    mean_sq = np.asarray(p0_sumsq, dtype=float) / n_draws
    return float(np.sum(mean_sq - 2.0 * t * mean + t * t))


def delta_scores(values, models=None) -> tuple[np.ndarray, int]:
    """Differences from the minimum and the index of the single winner.

    Ties at the minimum go to the earliest model in the order
    SCR < RE < SARE < FM < FE (input order when ``models`` is omitted).
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one model")
    best = np.nanmin(v)
    tied = np.flatnonzero(v == best)
    if models is not None:
        rank = [MODEL_KINDS.index(str(m).split("-")[0].upper()) for m in models]
        winner = int(min(tied, key=lambda i: (rank[i], i)))
    else:
        winner = int(tied[0])
    return v - best, winner


@dataclass(frozen=True)
class WaicResult:
    waic: float
    lppd: float
    p_w: float
    pointwise: np.ndarray

    def to_dict(self) -> dict:
        return {"waic": self.waic, "lppd": self.lppd, "p_w": self.p_w}


def waic(pointwise_loglik) -> WaicResult:
    """WAIC from an R x M matrix of per-draw, per-row log-likelihoods.

    ``lppd = sum_i log mean_r exp(l_ri)``; ``p_w = sum_i var_r(l_ri)`` with
    divisor ``R - 1``; ``waic = -2 lppd + 2 p_w``.
    """
    L = np.asarray(pointwise_loglik, dtype=float)
    if L.ndim != 2:
        raise ValueError("expected an R x M matrix")
    R = L.shape[0]
    if R < 2:
        raise ValueError("WAIC penalty needs at least two draws (divisor R - 1)")
    if not np.all(np.isfinite(L)):
        raise ValueError("pointwise log-likelihoods must be finite")
    lppd_i = logsumexp(L, axis=0) - math.log(R)
    pw_i = L.var(axis=0, ddof=1)
    elpd_i = lppd_i - pw_i
    lppd = float(lppd_i.sum())
    p_w = float(pw_i.sum())
    return WaicResult(waic=-2.0 * lppd + 2.0 * p_w, lppd=lppd, p_w=p_w, pointwise=-2.0 * elpd_i)
