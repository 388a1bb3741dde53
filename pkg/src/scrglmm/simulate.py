"""Scenario catalogue and SCR data simulation.

Each dataset is one sampling occasion of binary detections on a detector
lattice, zero-augmented to ``M`` rows, with the generating truth attached.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import logit

from scrglmm.geometry import DetectorGrid, Habitat, build_detector_grid, build_habitat, pairwise_detector_distances
from scrglmm.surfaces import (
    BaselineSurface,
    categorical_surface,
    cholesky_lower,
    continuous_surface,
    exponential_covariance,
)

KINDS = ("continuous", "categorical")


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from an arbitrary tuple of keys."""
    digest = hashlib.sha256(repr(tuple(keys)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class Scenario:
    id: int
    eta: float
    phi: float
    kind: str
    n_true: int = 300
    m_aug: int = 500
    sigma: float = 1.5
    nx: int = 32
    ny: int = 32
    spacing: float = 1.0
    buffer: float = 5.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.m_aug > self.n_true:
            raise ValueError(f"augmented size M={self.m_aug} must exceed N={self.n_true}")
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.sigma <= 0 or self.phi < 0:
            raise ValueError("sigma must be positive and phi non-negative")

    def grid(self) -> DetectorGrid:
        return build_detector_grid(self.nx, self.ny, self.spacing)

    def habitat(self, grid: DetectorGrid | None = None) -> Habitat:
        return build_habitat(grid if grid is not None else self.grid(), self.buffer)

    def with_design(self, **overrides) -> "Scenario":
        return replace(self, **overrides)

    def overlap_index(self) -> float:
        """Home-range overlap ``k = sigma * sqrt(N / habitat area)``."""
        return self.sigma * np.sqrt(self.n_true / self.habitat().area)

    def to_config(self) -> dict:
        return asdict(self)


_CATALOG = (
    (1, 0.1, 1.0, "continuous"),
    (2, 0.1, 0.05, "continuous"),
    (3, 0.3, 1.0, "continuous"),
    (4, 0.3, 0.05, "continuous"),
    (5, 0.6, 1.0, "continuous"),
    (6, 0.6, 0.05, "continuous"),
    (7, 0.1, 1.0, "categorical"),
    (8, 0.1, 0.05, "categorical"),
    (9, 0.3, 1.0, "categorical"),
    (10, 0.3, 0.05, "categorical"),
)


def scenario_catalog() -> list[Scenario]:
    """The ten simulation scenarios at full scale (32x32 detectors, N=300, M=500)."""
    return [Scenario(id=i, eta=eta, phi=phi, kind=kind) for i, eta, phi, kind in _CATALOG]


def get_scenario(scenario_id: int) -> Scenario:
    for s in scenario_catalog():
        if s.id == scenario_id:
            return s
    raise ValueError(f"unknown scenario {scenario_id}; valid ids are 1-10")


@dataclass
class Truth:
    s: np.ndarray  # (n_true, 2), rows aligned with the first n_true rows of Y
    z: np.ndarray  # (M,)
    W: np.ndarray  # (J,)
    p0: np.ndarray  # (J,)
    n_true: int
    sigma: float
    eta: float
    phi: float
    kind: str

    def fe_covariate(self) -> np.ndarray:
        """Logit-scale effect of the realised surface relative to ``logit(eta)``.

        Equals ``W`` for continuous surfaces. For categorical surfaces active
        detectors get 0 and inactive ones ``-inf`` so that
        ``expit(logit(eta) + covariate)`` reproduces the true surface.
        """
        if self.kind == "continuous":
            return np.asarray(self.W, dtype=float).copy()
        out = np.zeros_like(self.p0, dtype=float)
        out[self.p0 <= 0] = -np.inf
        active = self.p0 > 0
        out[active] = logit(self.p0[active]) - logit(self.eta)
        return out


@dataclass
class SimulatedDataset:
    Y: np.ndarray  # (M, J) uint8
    grid: DetectorGrid
    habitat: Habitat
    truth: Truth | None = None
    scenario: Scenario | None = None
    seed: int | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.uint8)
        if self.Y.ndim != 2 or self.Y.shape[1] != self.grid.J:
            raise ValueError(f"Y must be M x J with J={self.grid.J}, got shape {self.Y.shape}")

    @property
    def M(self) -> int:
        return self.Y.shape[0]

    @property
    def J(self) -> int:
        return self.Y.shape[1]

    @property
    def detected(self) -> np.ndarray:
        return self.Y.any(axis=1)

    @property
    def n_detected(self) -> int:
        return int(self.detected.sum())

    @property
    def n_detections(self) -> int:
        return int(self.Y.sum())

    def summary(self) -> dict:
        n = self.n_detected
        total = self.n_detections
        out = {
            "n_detected": n,
            "n_detections": total,
            "detections_per_detector": total / self.J if self.J else float("nan"),
            "detections_per_detected": total / n if n else float("nan"),
        }
        if self.truth is not None:
            out["detections_per_individual"] = total / self.truth.n_true
        return out


def simulate_activity_centers(N: int, habitat: Habitat, rng: np.random.Generator) -> np.ndarray:
    """``N`` independent uniform points in the habitat rectangle."""
    if N < 0:
        raise ValueError("N must be non-negative")
    x = rng.uniform(habitat.xmin, habitat.xmax, size=N)
    y = rng.uniform(habitat.ymin, habitat.ymax, size=N)
    return np.column_stack([x, y])


def detection_probabilities(acs: np.ndarray, p0: np.ndarray, sigma: float, coords: np.ndarray) -> np.ndarray:
    acs = np.asarray(acs, dtype=float).reshape(-1, 2)
    d2 = (acs[:, 0:1] - coords[None, :, 0]) ** 2 + (acs[:, 1:2] - coords[None, :, 1]) ** 2
    return np.asarray(p0, dtype=float)[None, :] * np.exp(-d2 / (2.0 * sigma * sigma))


def simulate_capture_history(
    acs: np.ndarray,
    p0: BaselineSurface | np.ndarray,
    sigma: float,
    grid: DetectorGrid,
    rng: np.random.Generator,
) -> np.ndarray:
    """Independent Bernoulli detections with half-normal probabilities, one occasion."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    p0 = p0.p0 if isinstance(p0, BaselineSurface) else np.asarray(p0, dtype=float)
    if p0.shape[0] != grid.J:
        raise ValueError(f"p0 has length {p0.shape[0]}, grid has {grid.J} detectors")
    p = detection_probabilities(acs, p0, sigma, grid.coords)
    return (rng.random(p.shape) < p).astype(np.uint8)


@lru_cache(maxsize=16)
def _field_factor(nx: int, ny: int, spacing: float, phi: float) -> np.ndarray:
    grid = build_detector_grid(nx, ny, spacing)
    L = cholesky_lower(exponential_covariance(pairwise_detector_distances(grid), phi))
    L.setflags(write=False)
    return L


def simulate_surface(scenario: Scenario, grid: DetectorGrid, rng: np.random.Generator) -> BaselineSurface:
    """Gaussian field on the detectors, transformed according to the scenario kind."""
    L = _field_factor(grid.nx, grid.ny, grid.spacing, scenario.phi)
    W = L @ rng.standard_normal(grid.J)
    if scenario.kind == "continuous":
        return continuous_surface(W, scenario.eta)
    return categorical_surface(W, scenario.eta)


def canonical_order(Y: np.ndarray) -> np.ndarray:
    """Detected rows first (by first-detection detector), then the rest in original order."""
    detected = Y.any(axis=1)
    first = np.where(detected, Y.argmax(axis=1), Y.shape[1])
    return np.lexsort((np.arange(Y.shape[0]), first))


def simulate_scenario(scenario: Scenario, seed: int) -> SimulatedDataset:
    """Draw one complete dataset (surface, activity centres, detections) for a scenario."""
    rng = np.random.default_rng(seed)
    grid = scenario.grid()
    habitat = scenario.habitat(grid)
    surface = simulate_surface(scenario, grid, rng)
    acs = simulate_activity_centers(scenario.n_true, habitat, rng)
    Y_true = simulate_capture_history(acs, surface, scenario.sigma, grid, rng)
    order = canonical_order(Y_true)
    Y = np.zeros((scenario.m_aug, grid.J), dtype=np.uint8)
    Y[: scenario.n_true] = Y_true[order]
    z = np.zeros(scenario.m_aug, dtype=np.uint8)
    z[: scenario.n_true] = 1
    truth = Truth(
        s=acs[order],
        z=z,
        W=surface.W,
        p0=surface.p0,
        n_true=scenario.n_true,
        sigma=scenario.sigma,
        eta=scenario.eta,
        phi=scenario.phi,
        kind=scenario.kind,
    )
    return SimulatedDataset(Y=Y, grid=grid, habitat=habitat, truth=truth, scenario=scenario, seed=int(seed))


def replicate_seed(base_seed: int, scenario_id: int, replicate: int) -> int:
    return derive_seed(int(base_seed), "dataset", int(scenario_id), int(replicate))
