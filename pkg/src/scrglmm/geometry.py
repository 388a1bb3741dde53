"""Detector lattices, habitat rectangles and detector-cluster aggregation.

Detector indices are row-major starting at the south-west corner: index
``j = row * nx + col`` with ``row`` increasing northwards. Cluster indices
follow the same convention on the coarse lattice.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DetectorGrid:
    """Regular rectangular detector array."""

    coords: np.ndarray
    nx: int
    ny: int
    spacing: float
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        if coords.shape[0] != self.nx * self.ny:
            raise ValueError(
                f"coords has {coords.shape[0]} rows, expected nx*ny = {self.nx * self.ny}"
            )
        object.__setattr__(self, "coords", _frozen(coords))

    @property
    def J(self) -> int:
        return self.nx * self.ny

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.J) // max(self.nx, 1)

    @property
    def cols(self) -> np.ndarray:
        return np.arange(self.J) % max(self.nx, 1)

    def bounds(self) -> tuple[float, float, float, float]:
        if self.J == 0:
            cx, cy = self.center
            return cx, cx, cy, cy
        x, y = self.coords[:, 0], self.coords[:, 1]
        return float(x.min()), float(x.max()), float(y.min()), float(y.max())

    def to_config(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "spacing": self.spacing,
            "center": [float(self.center[0]), float(self.center[1])],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "DetectorGrid":
        return build_detector_grid(
            int(cfg["nx"]), int(cfg["ny"]), float(cfg["spacing"]), tuple(cfg.get("center", (0.0, 0.0)))
        )


@dataclass(frozen=True)
class Habitat:
    """Axis-aligned habitat rectangle (the state space of activity centres)."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    buffer: float = 0.0

    def __post_init__(self):
        if not (self.xmax >= self.xmin and self.ymax >= self.ymin):
            raise ValueError("habitat bounds are inverted")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the closed rectangle."""
        p = np.asarray(points, dtype=float)
        x, y = p[..., 0], p[..., 1]
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)

    def to_config(self) -> dict:
        return {
            "xmin": self.xmin,
            "xmax": self.xmax,
            "ymin": self.ymin,
            "ymax": self.ymax,
            "buffer": self.buffer,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Habitat":
        return cls(**{k: float(cfg[k]) for k in ("xmin", "xmax", "ymin", "ymax", "buffer")})


@dataclass(frozen=True)
class ClusterMap:
    """Assignment of detectors to square blocks of ``factor x factor`` detectors."""

    factor: int
    cluster_of: np.ndarray
    n_clusters: int
    ncx: int
    ncy: int
    centroids: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "cluster_of", _frozen(np.asarray(self.cluster_of, dtype=np.intp)))
        object.__setattr__(self, "centroids", _frozen(np.asarray(self.centroids, dtype=float)))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.n_clusters)

    def expand(self, values: np.ndarray) -> np.ndarray:
        """Broadcast per-cluster values to per-detector values."""
        return np.asarray(values)[self.cluster_of]

    def cluster_mean(self, values: np.ndarray) -> np.ndarray:
        """Average of per-detector values within each cluster."""
        sums = np.bincount(self.cluster_of, weights=np.asarray(values, dtype=float), minlength=self.n_clusters)
        return sums / self.sizes()

    def centroid_distances(self) -> np.ndarray:
        return _pairwise(self.centroids)


def build_detector_grid(
    nx: int, ny: int, spacing: float = 1.0, center: tuple[float, float] = (0.0, 0.0)
) -> DetectorGrid:
    """Regular ``nx`` by ``ny`` lattice with the given spacing, centred at ``center``."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"grid dimensions must be positive integers, got nx={nx}, ny={ny}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    nx, ny = int(nx), int(ny)
    cx, cy = float(center[0]), float(center[1])
    xs = cx + (np.arange(nx) - (nx - 1) / 2.0) * spacing
    ys = cy + (np.arange(ny) - (ny - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(xs, ys)  # rows index y
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    return DetectorGrid(coords=coords, nx=nx, ny=ny, spacing=float(spacing), center=(cx, cy))


def build_habitat(grid: DetectorGrid, buffer: float) -> Habitat:
    """Bounding box of the detectors expanded by ``buffer`` on every side."""
    if buffer < 0:
        raise ValueError(f"buffer must be non-negative, got {buffer}")
    xmin, xmax, ymin, ymax = grid.bounds()
    b = float(buffer)
    return Habitat(xmin - b, xmax + b, ymin - b, ymax + b, buffer=b)


def _pairwise(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_detector_distances(grid: DetectorGrid) -> np.ndarray:
    """Symmetric ``J x J`` Euclidean distance matrix between detectors."""
    return _pairwise(grid.coords)


def aggregate_detectors(grid: DetectorGrid, factor: int) -> ClusterMap:
    """Group detectors into contiguous ``factor x factor`` blocks.

    Raises ``ValueError`` naming the dimension that ``factor`` does not divide.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"aggregation factor must be a positive integer, got {factor}")
    factor = int(factor)
    for name, n in (("nx", grid.nx), ("ny", grid.ny)):
        if n % factor:
            raise ValueError(f"aggregation factor {factor} does not divide {name}={n}")
    ncx, ncy = grid.nx // factor, grid.ny // factor
    cluster_of = (grid.rows // factor) * ncx + grid.cols // factor
    n_clusters = ncx * ncy
    counts = np.bincount(cluster_of, minlength=n_clusters)
    cx = np.bincount(cluster_of, weights=grid.coords[:, 0], minlength=n_clusters) / counts
    cy = np.bincount(cluster_of, weights=grid.coords[:, 1], minlength=n_clusters) / counts
    return ClusterMap(
        factor=factor,
        cluster_of=cluster_of,
        n_clusters=n_clusters,
        ncx=ncx,
        ncy=ncy,
        centroids=np.column_stack([cx, cy]),
    )


def detectors_csv(grid: DetectorGrid, clusters: ClusterMap | None = None) -> str:
    """CSV text with columns ``detector_id,x,y,cluster_id``."""
    if clusters is None:
        clusters = aggregate_detectors(grid, 1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["detector_id", "x", "y", "cluster_id"])
    for j in range(grid.J):
        w.writerow([j, repr(float(grid.coords[j, 0])), repr(float(grid.coords[j, 1])), int(clusters.cluster_of[j])])
    return buf.getvalue()
