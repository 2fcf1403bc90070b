"""Map sharpness and trajectory accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from gpslam.io import Trajectory


class UndefinedMetric(ValueError):
    pass


def _entropy_sums(pts: np.ndarray, nbrs: list) -> tuple[float, int]:
    sizes = np.fromiter((len(n) for n in nbrs), dtype=np.int64, count=len(nbrs))
    flat = np.concatenate([np.asarray(n, dtype=np.int64) for n in nbrs])
    offsets = np.r_[0, np.cumsum(sizes)[:-1]]
    P = pts[flat]
    mean = np.add.reduceat(P, offsets, axis=0) / sizes[:, None]
    outer = np.einsum("ni,nj->nij", P, P).reshape(len(P), 9)
    second = np.add.reduceat(outer, offsets, axis=0).reshape(-1, 3, 3)
    cov = second / sizes[:, None, None] - np.einsum("ni,nj->nij", mean, mean)
    sign, logdet = np.linalg.slogdet(2 * np.pi * np.e * cov)
    good = sign > 0
    return 0.5 * float(np.sum(logdet[good])), int(good.sum())


def mean_map_entropy(
    cloud, radius: float = 1.5, min_neighbors: int = 5, query_stride: int = 1, row_budget: int = 2_000_000
) -> float:
    """Mean differential entropy of local neighborhoods, in nats.

    For every query point with at least ``min_neighbors`` points (itself
    included) within ``radius``, ``h = 0.5 * ln det(2*pi*e * Sigma)`` with
    ``Sigma`` the population (biased) covariance of the neighborhood, which
    leaves the score unchanged when every point is duplicated. Every
    ``query_stride``-th point is used as a query; neighbors always come from
    the whole cloud. Neighborhoods are processed in groups holding at most
    ``row_budget`` neighbor rows to bound memory.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise UndefinedMetric("empty cloud")
    tree = cKDTree(pts)
    queries = pts[::query_stride]
    total, count = 0.0, 0
    block = 512
    for start in range(0, len(queries), block):
        nbrs = [n for n in tree.query_ball_point(queries[start : start + block], radius) if len(n) >= min_neighbors]
        group, rows = [], 0
        for n in nbrs + [None]:
            if n is None or (group and rows + len(n) > row_budget):
                if group:
                    t, c = _entropy_sums(pts, group)
                    total += t
                    count += c
                group, rows = [], 0
            if n is not None:
                group.append(n)
                rows += len(n)
    if count == 0:
        raise UndefinedMetric(f"no point has {min_neighbors} neighbors within {radius} m")
    return total / count


def closest_point_rmse(source, target) -> float:
    """RMSE of distances from each source point to its nearest target point."""
    d, _ = cKDTree(np.asarray(target, dtype=float)).query(np.asarray(source, dtype=float))
    return float(np.sqrt(np.mean(d * d)))


def rigid_align(source: np.ndarray, target: np.ndarray):
    """Least-squares rotation ``R`` and translation ``t`` with ``R @ s + t ~ target``."""
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    H = (source - cs).T @ (target - ct)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, ct - R @ cs


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Index pairs matching each estimate to the nearest ground-truth timestamp."""
    order = np.argsort(gt.timestamps)
    ts = gt.timestamps[order]
    pairs = []
    for i, t in enumerate(est.timestamps):
        k = np.searchsorted(ts, t)
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(ts) and (best is None or abs(ts[c] - t) < abs(ts[best] - t)):
                best = c
        if best is not None and abs(ts[best] - t) <= max_dt:
            pairs.append((i, int(order[best])))
    return pairs


@dataclass
class EvalReport:
    avg_translation_error: float = float("nan")
    avg_xy_error: float = float("nan")
    final_elevation_error: float = float("nan")
    final_translation_error: float = float("nan")
    associated: int = 0
    mme: float | None = None
    per_frame_timings: list = field(default_factory=list)

    def lines(self):
        out = [
            f"associated {self.associated}",
            f"avg_translation_error_m {self.avg_translation_error:.6f}",
            f"avg_xy_error_m {self.avg_xy_error:.6f}",
            f"final_elevation_error_m {self.final_elevation_error:.6f}",
            f"final_translation_error_m {self.final_translation_error:.6f}",
        ]
        if self.mme is not None:
            out.append(f"mme_nats {self.mme:.6f}")
        return out


def trajectory_error(estimated: Trajectory, ground_truth: Trajectory, max_dt: float = 0.02) -> EvalReport:
    """Errors after rigidly aligning estimated positions onto ground truth."""
    pairs = associate(estimated, ground_truth, max_dt)
    if len(pairs) < 3:
        raise UndefinedMetric(f"only {len(pairs)} associated poses; need at least 3 for alignment")
    ie, ig = np.array(pairs).T
    pe = estimated.positions[ie]
    pg = ground_truth.positions[ig]
    R, t = rigid_align(pe, pg)
    aligned = pe @ R.T + t
    diff = aligned - pg
    return EvalReport(
        avg_translation_error=float(np.mean(np.linalg.norm(diff, axis=1))),
        avg_xy_error=float(np.mean(np.linalg.norm(diff[:, :2], axis=1))),
        final_elevation_error=float(abs(diff[-1, 2])),
        final_translation_error=float(np.linalg.norm(diff[-1])),
        associated=len(pairs),
    )
