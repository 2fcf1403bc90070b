"""Cubic-cell regionalization, direction selection and the sub-grid filter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from gpslam.geometry import ALL_DIRECTIONS, Direction


@dataclass(frozen=True)
class GridConfig:
    """Cell and lattice geometry.

    ``a`` is the cell side, ``r`` the spacing of test locations; ``a`` must be
    an integer multiple of ``r`` so each face carries ``(a/r)**2`` locations.
    """

    a: float = 1.5
    r: float = 0.25
    n_min: int = 5
    planarity_ratio: float = 0.1
    normal_component_threshold: float = 0.15

    def __post_init__(self):
        if self.a <= 0 or self.r <= 0:
            raise ValueError("cell side and test interval must be positive")
        ratio = self.a / self.r
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"cell side {self.a} is not an integer multiple of test interval {self.r}")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")

    @property
    def n_side(self) -> int:
        return int(round(self.a / self.r))

    @property
    def n_test(self) -> int:
        return self.n_side**2


class CellIndex(NamedTuple):
    ix: int
    iy: int
    iz: int

    def shifted(self, d: Direction, step: int) -> CellIndex:
        idx = list(self)
        idx[int(d)] += step
        return CellIndex(*idx)


def cell_of(p, a: float) -> CellIndex:
    """Cell containing ``p``; cells are half-open ``[k*a, (k+1)*a)``."""
    return CellIndex(*(int(v) for v in np.floor(np.asarray(p, dtype=float) / a)))


@dataclass
class CellBucket:
    index: CellIndex
    raw_points: np.ndarray
    active_directions: frozenset = field(default_factory=lambda: ALL_DIRECTIONS)

    def __len__(self):
        return len(self.raw_points)


def regionalize(cloud, cfg: GridConfig) -> dict[CellIndex, CellBucket]:
    """Split a world-frame cloud into buckets keyed by cell index."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return {}
    idx = np.floor(pts / cfg.a).astype(np.int64)
    # pack into one int64 key; 21 bits per axis covers +-1e6 cells
    off = idx + (1 << 20)
    if np.any(off < 0) or np.any(off >= (1 << 21)):
        raise ValueError("cloud extends beyond the addressable cell range")
    key = (off[:, 0] << 42) | (off[:, 1] << 21) | off[:, 2]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])
    ends = np.r_[starts[1:], len(order)]
    out = {}
    for s, e in zip(starts, ends):
        ix, iy, iz = idx[order[s]]
        ci = CellIndex(int(ix), int(iy), int(iz))
        out[ci] = CellBucket(ci, pts[order[s:e]])
    return out


def cell_origin(index: CellIndex, a: float) -> np.ndarray:
    return np.asarray(index, dtype=float) * a


@dataclass(frozen=True)
class TestLattice:
    """Planar test locations of one cell face for one direction.

    Locations sit at sub-grid centers, ``(i + 1/2) * r`` from the cell's
    minimum corner along each of ``direction.plane_axes``. Cells adjacent
    along ``direction`` share identical planar locations.
    """

    __test__ = False  # not a pytest class

    index: CellIndex
    direction: Direction
    a: float
    r: float

    @classmethod
    def for_cell(cls, index: CellIndex, direction: Direction, cfg: GridConfig) -> TestLattice:
        return cls(index, direction, cfg.a, cfg.r)

    @property
    def n_side(self) -> int:
        return int(round(self.a / self.r))

    @property
    def origin(self) -> np.ndarray:
        """Minimum corner of the cell in the two plane axes."""
        u, v = self.direction.plane_axes
        return np.array([self.index[u] * self.a, self.index[v] * self.a])

    def locations(self) -> np.ndarray:
        """(n_side, n_side, 2) array of planar test locations indexed by (i, j)."""
        c = (np.arange(self.n_side) + 0.5) * self.r
        o = self.origin
        uu, vv = np.meshgrid(o[0] + c, o[1] + c, indexing="ij")
        return np.stack([uu, vv], axis=-1)

    def subgrid_of(self, planar: np.ndarray) -> np.ndarray:
        """(N, 2) integer sub-grid indices of planar coordinates, clipped into the cell."""
        ij = np.floor((np.asarray(planar, dtype=float) - self.origin) / self.r).astype(np.int64)
        return np.clip(ij, 0, self.n_side - 1)


def planar(points: np.ndarray, d: Direction) -> np.ndarray:
    u, v = d.plane_axes
    return points[:, [u, v]]


def select_directions(bucket: CellBucket, cfg: GridConfig) -> frozenset:
    """Drop directions along which a planar bucket provides no constraint.

    A direction ``d`` is omitted only when the bucket is planar (smallest
    covariance eigenvalue at most ``planarity_ratio`` times the middle one)
    and the surface normal is nearly orthogonal to ``e_d``.
    """
    pts = np.asarray(bucket.raw_points, dtype=float)
    if len(pts) < 3:
        return ALL_DIRECTIONS
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    scale = evals[2]
    if scale <= 1e-18 or evals[1] <= 1e-12 * scale:
        # coincident or collinear points
        return ALL_DIRECTIONS
    if evals[0] > cfg.planarity_ratio * evals[1]:
        return ALL_DIRECTIONS
    normal = evecs[:, 0]
    keep = frozenset(d for d in Direction if abs(normal[int(d)]) >= cfg.normal_component_threshold)
    return keep or ALL_DIRECTIONS


def principled_downsample(bucket: CellBucket, direction: Direction, lattice: TestLattice):
    """Keep, per sub-grid, the point whose planar location is closest to its center.

    Returns ``(points, subgrid_ij)`` where ``subgrid_ij`` is the (K, 2) lattice
    index each retained point belongs to, ordered by sub-grid. Linear in the
    bucket size (two scatter passes, no sort); ties go to the earlier point.
    """
    pts = np.asarray(bucket.raw_points, dtype=float)
    if len(pts) == 0:
        return pts.reshape(0, 3), np.zeros((0, 2), dtype=np.int64)
    n = len(pts)
    loc = planar(pts, direction)
    ij = lattice.subgrid_of(loc)
    centers = lattice.origin + (ij + 0.5) * lattice.r
    dist2 = np.sum((loc - centers) ** 2, axis=1)
    key = ij[:, 0] * lattice.n_side + ij[:, 1]
    n_cells = lattice.n_side**2
    best = np.full(n_cells, np.inf)
    np.minimum.at(best, key, dist2)
    winner = dist2 == best[key]
    first = np.full(n_cells, n)
    np.minimum.at(first, key[winner], np.flatnonzero(winner))
    keep = first[first < n]
    return pts[keep], ij[keep]
