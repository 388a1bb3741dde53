"""Convergence and efficiency diagnostics for sets of MCMC chains."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

RHAT_THRESHOLD = 1.1
ESS_FLOOR = 400.0


def _as_chains(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2:
        raise ValueError("expected a (chains x iterations) array")
    return arr


def gelman_rubin(chains, split: bool = False) -> float:
    """Potential scale reduction factor.

    Classic between/within variance estimator over ``m >= 2`` chains of equal
    length ``n >= 10``. With ``split=True`` each chain is halved first, which
    also allows a single chain.
    """
    x = _as_chains(chains)
    if split:
        half = x.shape[1] // 2
        x = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n = x.shape
    if m < 2:
        raise ValueError("R-hat needs at least two chains (or split=True)")
    if n < 10:
        raise ValueError(f"chains must have at least 10 draws, got {n}")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        raise ValueError("within-chain variance is zero; R-hat is undefined")
    B = n * means.var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    dev = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(dev, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / n


def effective_sample_size(samples, cap: bool = False) -> float:
    """Effective sample size by Geyer's initial monotone positive sequence.

    A 2-D input (chains x iterations) is pooled by concatenating the chains.
    Strongly antithetic sequences can yield ``ESS > n``; ``cap=True`` clips
    the reported value at ``n``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise ValueError(f"ESS needs at least 100 draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    if np.ptp(x) == 0:
        raise ValueError("ESS is undefined for a constant sequence")
    acov = _autocovariance(x)
    rho = acov / acov[0]
    # Geyer pairs Gamma_k = rho_2k + rho_2k+1, truncated at the first
    # non-positive pair and forced monotone non-increasing
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    k = nonpos[0] if nonpos.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * float(pairs.sum())
    # bound tau away from zero for antithetic chains
    tau = max(tau, 1.0 / math.log10(n))
    ess = n / tau
    return float(min(ess, n)) if cap else float(ess)


@dataclass
class ConvergenceReport:
    rhat: dict
    ess: dict
    runtime: float
    threshold: float = RHAT_THRESHOLD
    ess_floor: float = ESS_FLOOR
    converged: bool = False
    notes: list = field(default_factory=list)

    @property
    def efficiency(self) -> dict:
        if not self.runtime > 0:
            return {k: math.nan for k in self.ess}
        return {k: v / self.runtime for k, v in self.ess.items()}

    def to_table(self, timing: bool = True) -> str:
        """Tab-separated parameter table; ``timing=False`` drops wall-clock columns."""
        buf = io.StringIO()
        buf.write("parameter\trhat\tess" + ("\tefficiency\n" if timing else "\n"))
        eff = self.efficiency
        for name in self.rhat:
            row = f"{name}\t{self.rhat[name]:.6g}\t{self.ess[name]:.6g}"
            buf.write(row + (f"\t{eff[name]:.6g}\n" if timing else "\n"))
        if timing:
            buf.write(f"# runtime_s\t{self.runtime:.6g}\n")
        buf.write(f"# converged\t{str(self.converged).lower()}\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rhat": self.rhat,
            "ess": self.ess,
            "runtime": self.runtime,
            "threshold": self.threshold,
            "ess_floor": self.ess_floor,
            "converged": self.converged,
            "notes": list(self.notes),
        }


def _stack(chains, name: str) -> np.ndarray:
    return np.vstack([c[name] for c in chains])


def assess(chains, threshold: float = RHAT_THRESHOLD, ess_floor: float = ESS_FLOOR, names=None) -> ConvergenceReport:
    """Convergence gate over the top-level parameters of a set of chains.

    ``chains`` is a sequence of :class:`~scrglmm.mcmc.Chain` or a mapping
    ``name -> (chains x iterations)`` array. A parameter whose diagnostics
    cannot be computed (e.g. constant trace) makes the fit non-converged and
    is recorded as NaN.
    """
    if isinstance(chains, dict):
        arrays = {k: _as_chains(v) for k, v in chains.items()}
        runtime = math.nan
    else:
        chains = list(chains)
        names = names or chains[0].names
        arrays = {k: _stack(chains, k) for k in names}
        runtime = float(sum(c.runtime for c in chains))
    rhat, ess, notes = {}, {}, []
    ok = True
    for name, x in arrays.items():
        try:
            rhat[name] = gelman_rubin(x) if x.shape[0] >= 2 else gelman_rubin(x, split=True)
        except ValueError as exc:
            rhat[name] = math.nan
            notes.append(f"{name}: {exc}")
        try:
            ess[name] = effective_sample_size(x)
        except ValueError as exc:
            ess[name] = math.nan
            notes.append(f"{name}: {exc}")
        if not (rhat[name] <= threshold and ess[name] >= ess_floor):
            ok = False
    return ConvergenceReport(rhat=rhat, ess=ess, runtime=runtime, threshold=threshold, ess_floor=ess_floor, converged=ok, notes=notes)
