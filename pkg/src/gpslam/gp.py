"""Per-cell Gaussian-process surface reconstruction.

Each active direction of a cell gets one :class:`Layer`: the coordinate along
the direction is regressed on the other two with an exponential kernel
``k(l1, l2) = exp(-kappa * |l1 - l2|)`` and predicted at the cell's test
lattice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from gpslam.geometry import Direction
from gpslam.grid import CellBucket, CellIndex, GridConfig, TestLattice, planar, principled_downsample, select_directions


class ReconstructionFailed(RuntimeError):
    """The regularized kernel system could not be factorized."""


@dataclass(frozen=True)
class KernelConfig:
    """Kernel and noise settings.

    ``kappa`` is the inverse length scale (1/m). With unit prior variance the
    predictive variance near data grows roughly as ``2 * kappa * distance``,
    so ``kappa`` sets how far from a training point a sample still passes the
    matching threshold. ``sigma2`` is the per-point noise variance (m^2).
    """

    kappa: float = 0.1
    sigma2: float = 0.03**2
    jitter: float = 1e-8
    variance_includes_noise: bool = True

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def prior_variance(self) -> float:
        return 1.0 + (self.sigma2 if self.variance_includes_noise else 0.0)


def kernel(l1, l2, cfg: KernelConfig) -> float:
    d = np.linalg.norm(np.asarray(l1, dtype=float) - np.asarray(l2, dtype=float))
    return float(np.exp(-cfg.kappa * d))


def kernel_matrix(A: np.ndarray, B: np.ndarray, kappa: float) -> np.ndarray:
    return np.exp(-kappa * cdist(A, B))


def gp_predict(train_locations, train_values, test_locations, cfg: KernelConfig, prior_mean: float = 0.0):
    """Predictive mean and variance at ``test_locations``.

    ``prior_mean`` is a constant mean function; observations are regressed
    as offsets from it. Raises :class:`ReconstructionFailed` if the system is
    not positive definite.
    """
    L = np.asarray(train_locations, dtype=float).reshape(-1, 2)
    f = np.asarray(train_values, dtype=float).reshape(-1)
    T = np.asarray(test_locations, dtype=float).reshape(-1, 2)
    if len(L) == 0:
        raise ValueError("at least one training point is required")
    if len(L) != len(f):
        raise ValueError("train_locations and train_values differ in length")

    A = kernel_matrix(L, L, cfg.kappa)
    A[np.diag_indices_from(A)] += cfg.sigma2 + cfg.jitter
    try:
        chol = cho_factor(A, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise ReconstructionFailed(str(exc)) from exc
    if not np.all(np.isfinite(chol[0])):
        raise ReconstructionFailed("non-finite factor")

    Ks = kernel_matrix(L, T, cfg.kappa)
    alpha = cho_solve(chol, f - prior_mean, check_finite=False)
    mean = prior_mean + Ks.T @ alpha
    v = solve_triangular(chol[0], Ks, lower=True, check_finite=False)
    var = 1.0 - np.einsum("ij,ij->j", v, v)
    if cfg.variance_includes_noise:
        var += cfg.sigma2
    np.maximum(var, 1e-12, out=var)
    return mean, var


class Sample(NamedTuple):
    direction: Direction
    lattice_id: tuple
    location: tuple
    mean: float
    variance: float

    @property
    def position(self) -> np.ndarray:
        p = np.empty(3)
        u, v = self.direction.plane_axes
        p[u], p[v] = self.location
        p[int(self.direction)] = self.mean
        return p


@dataclass
class Layer:
    """Predictions of one cell for one direction on its test lattice.

    ``mean`` and ``var`` are ``(n_side, n_side)`` arrays indexed by lattice
    id ``(i, j)``; a missing sample has NaN mean and infinite variance.
    """

    lattice: TestLattice
    mean: np.ndarray
    var: np.ndarray

    @property
    def direction(self) -> Direction:
        return self.lattice.direction

    @property
    def index(self) -> CellIndex:
        return self.lattice.index

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.mean)

    def __len__(self):
        return int(self.valid.sum())

    def positions(self) -> np.ndarray:
        """(n_side, n_side, 3) world positions of the samples."""
        loc = self.lattice.locations()
        out = np.empty(loc.shape[:2] + (3,))
        u, v = self.direction.plane_axes
        out[..., u] = loc[..., 0]
        out[..., v] = loc[..., 1]
        out[..., int(self.direction)] = self.mean
        return out

    def get(self, lattice_id) -> Sample | None:
        i, j = lattice_id
        if not np.isfinite(self.mean[i, j]):
            return None
        loc = self.lattice.locations()[i, j]
        return Sample(self.direction, (i, j), (float(loc[0]), float(loc[1])), float(self.mean[i, j]), float(self.var[i, j]))

    def samples(self) -> Iterator[Sample]:
        loc = self.lattice.locations()
        for i, j in zip(*np.nonzero(self.valid)):
            yield Sample(
                self.direction,
                (int(i), int(j)),
                (float(loc[i, j, 0]), float(loc[i, j, 1])),
                float(self.mean[i, j]),
                float(self.var[i, j]),
            )

    def copy(self) -> Layer:
        return Layer(self.lattice, self.mean.copy(), self.var.copy())


class ReconstructionStats:
    """Counters for instrumentation of the kernel solves."""

    def __init__(self):
        self.solves = 0
        self.failures = 0
        self.max_system_size = 0
        self.training_points = 0

    def record(self, n: int):
        self.solves += 1
        self.training_points += n
        self.max_system_size = max(self.max_system_size, n)


def reconstruct_cell(
    bucket: CellBucket,
    grid: GridConfig,
    kcfg: KernelConfig,
    stats: ReconstructionStats | None = None,
    directions=None,
) -> list[Layer]:
    """Reconstruct 0-3 layers for one bucket.

    A direction yields a layer only if at least ``grid.n_min`` points survive
    the sub-grid filter; a failed factorization skips that layer.
    """
    if directions is None:
        directions = select_directions(bucket, grid)
    bucket.active_directions = frozenset(directions)
    layers = []
    for d in sorted(directions):
        lattice = TestLattice.for_cell(bucket.index, d, grid)
        pts, _ = principled_downsample(bucket, d, lattice)
        if len(pts) < grid.n_min:
            continue
        values = pts[:, int(d)]
        try:
            mean, var = gp_predict(planar(pts, d), values, lattice.locations().reshape(-1, 2), kcfg, values.mean())
        except ReconstructionFailed:
            if stats is not None:
                stats.failures += 1
            continue
        if stats is not None:
            stats.record(len(pts))
        n = lattice.n_side
        layers.append(Layer(lattice, mean.reshape(n, n), var.reshape(n, n)))
    return layers
