"""Baseline detection-probability surfaces.

A zero-mean Gaussian field with exponential covariance is drawn over the
detectors and mapped to per-detector baseline detection probabilities,
either continuously through the logit link or as a two-level
active/inactive split at the median.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from scrglmm.geometry import DetectorGrid

CHOLESKY_JITTER = 1e-10


@dataclass(frozen=True)
class BaselineSurface:
    p0: np.ndarray
    W: np.ndarray
    eta: float
    kind: str  # "continuous" | "categorical"

    @property
    def J(self) -> int:
        return len(self.p0)


def exponential_covariance(distances: np.ndarray, phi: float) -> np.ndarray:
    """Entrywise ``exp(-phi * distance)``; unit diagonal."""
    if phi < 0 or not np.isfinite(phi):
        raise ValueError(f"decay rate phi must be finite and non-negative, got {phi}")
    d = np.asarray(distances, dtype=float)
    cov = np.exp(-phi * d)
    np.fill_diagonal(cov, 1.0)
    return cov


def cholesky_lower(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a tiny diagonal jitter."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + CHOLESKY_JITTER * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "covariance is not positive definite even after adding "
            f"{CHOLESKY_JITTER:g} to the diagonal; check for duplicate locations or phi == 0"
        ) from exc


def sample_gaussian_field(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw ``W ~ MVN(0, cov)`` as ``L @ z`` with ``L`` the lower Cholesky factor."""
    L = cholesky_lower(np.asarray(cov, dtype=float))
    z = rng.standard_normal(L.shape[0])
    return L @ z


def continuous_surface(W: np.ndarray, eta: float) -> BaselineSurface:
    """``p0_j = expit(logit(eta) + W_j)``."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie strictly inside (0, 1), got {eta}")
    W = np.asarray(W, dtype=float)
    p0 = expit(logit(eta) + W)
    return BaselineSurface(p0=p0, W=W.copy(), eta=float(eta), kind="continuous")


def categorical_surface(W: np.ndarray, eta: float) -> BaselineSurface:
    """Detectors at or below the median of ``W`` get ``p0 = 0``, the rest ``eta``.

    The split is made on ranks (stable sort), so exactly ``ceil(J/2)`` detectors
    are inactive even when values tie at the median.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie strictly inside (0, 1), got {eta}")
    W = np.asarray(W, dtype=float)
    J = W.shape[0]
    order = np.argsort(W, kind="stable")
    p0 = np.full(J, float(eta))
    p0[order[: math.ceil(J / 2)]] = 0.0
    return BaselineSurface(p0=p0, W=W.copy(), eta=float(eta), kind="categorical")


def rook_adjacency(grid: DetectorGrid) -> np.ndarray:
    """Binary rook (N/S/E/W) adjacency matrix on the lattice."""
    J = grid.J
    rows, cols = grid.rows, grid.cols
    A = np.zeros((J, J))
    idx = np.arange(J)
    east = idx[cols < grid.nx - 1]
    A[east, east + 1] = A[east + 1, east] = 1.0
    north = idx[rows < grid.ny - 1]
    A[north, north + grid.nx] = A[north + grid.nx, north] = 1.0
    return A


def morans_i(values: np.ndarray, grid: DetectorGrid) -> float:
    """Global Moran's I with unstandardised binary rook weights."""
    x = np.asarray(values, dtype=float)
    if x.shape[0] != grid.J:
        raise ValueError(f"got {x.shape[0]} values for {grid.J} detectors")
    dev = x - x.mean()
    ss = float(dev @ dev)
    if ss == 0.0 or np.unique(x).size < 2:
        raise ValueError("Moran's I is undefined for a constant surface")
    W = rook_adjacency(grid)
    s0 = W.sum()
    if s0 == 0:
        raise ValueError("grid has no rook neighbours")
    return float(x.shape[0] / s0 * (dev @ W @ dev) / ss)


def surface_csv(grid: DetectorGrid, surface: BaselineSurface) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["detector_id", "x", "y", "W", "p0"])
    for j in range(grid.J):
        w.writerow(
            [
                j,
                repr(float(grid.coords[j, 0])),
                repr(float(grid.coords[j, 1])),
                repr(float(surface.W[j])),
                repr(float(surface.p0[j])),
            ]
        )
    return buf.getvalue()
