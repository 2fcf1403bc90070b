"""Scan-to-map registration over the sample lattice.

Samples of the current frame are paired with map samples that share their
direction and planar test location, and the pose is found by minimizing the
variance-weighted squared differences of the predicted coordinates.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from gpslam.geometry import Direction, Pose, quat_multiply, so3_exp
from gpslam.gp import KernelConfig, ReconstructionStats
from gpslam.grid import GridConfig
from gpslam.mapstore import GPMap, reconstruct_frame

log = logging.getLogger(__name__)

PARAM_NAMES = ("rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z")


class RegistrationError(RuntimeError):
    pass


class NoCorrespondences(RegistrationError):
    """Matching produced no usable sample pairs."""


class DegenerateGeometry(RegistrationError):
    """The correspondences do not constrain all six degrees of freedom."""

    def __init__(self, message, unobservable=(), null_space=None):
        super().__init__(message)
        self.unobservable = tuple(unobservable)
        self.null_space = null_space


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MatchConfig:
    sigma2_thr: float = 0.01
    max_outer_iters: int = 5
    max_inner_iters: int = 20
    pose_epsilon_trans: float = 1e-3
    pose_epsilon_rot: float = 1e-3
    huber_delta: float | None = 0.1
    degeneracy_tol: float = 1e-6

    def __post_init__(self):
        for name in ("sigma2_thr", "max_outer_iters", "max_inner_iters", "pose_epsilon_trans", "pose_epsilon_rot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive when set")


@dataclass(frozen=True)
class Correspondence:
    direction: Direction
    p_mean: float
    q_mean: float
    p_var: float
    q_var: float
    p_point: np.ndarray
    q_point: np.ndarray


@dataclass
class Correspondences:
    """Matched sample pairs stored column-wise.

    ``p_point``/``q_point`` are full 3D sample positions in the world frame;
    the predicted coordinates are ``p_point[i, direction[i]]`` and
    ``q_point[i, direction[i]]``.
    """

    direction: np.ndarray
    p_point: np.ndarray
    q_point: np.ndarray
    p_var: np.ndarray
    q_var: np.ndarray

    @classmethod
    def empty(cls) -> Correspondences:
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_records(cls, records) -> Correspondences:
        records = list(records)
        if not records:
            return cls.empty()
        return cls(
            np.array([int(c.direction) for c in records], dtype=np.int64),
            np.array([c.p_point for c in records], dtype=float),
            np.array([c.q_point for c in records], dtype=float),
            np.array([c.p_var for c in records], dtype=float),
            np.array([c.q_var for c in records], dtype=float),
        )

    def __len__(self):
        return len(self.direction)

    @property
    def q_mean(self) -> np.ndarray:
        return self.q_point[np.arange(len(self)), self.direction]

    @property
    def p_mean(self) -> np.ndarray:
        return self.p_point[np.arange(len(self)), self.direction]

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / (self.p_var + self.q_var)

    def __iter__(self):
        for i in range(len(self)):
            d = int(self.direction[i])
            yield Correspondence(
                Direction(d),
                float(self.p_point[i, d]),
                float(self.q_point[i, d]),
                float(self.p_var[i]),
                float(self.q_var[i]),
                self.p_point[i].copy(),
                self.q_point[i].copy(),
            )


def match(current: GPMap, reference: GPMap, cfg: MatchConfig) -> Correspondences:
    """Pair current samples with reference samples on the shared lattice.

    Candidates come from the same cell and from the two cells adjacent along
    the layer's direction, which are the only neighbors with identical planar
    test locations. Both variances must not exceed ``cfg.sigma2_thr``; the
    candidate with the closest position wins.
    """
    thr = cfg.sigma2_thr
    dirs, p_pts, q_pts, p_vars, q_vars = [], [], [], [], []
    for idx, state in current.cells.items():
        for d, layer in state.layers.items():
            ok_cur = layer.valid & (layer.var <= thr)
            if not ok_cur.any():
                continue
            cand_mean, cand_var = [], []
            for step in (0, -1, 1):
                ref_state = reference.cells.get(idx.shifted(d, step) if step else idx)
                ref = None if ref_state is None else ref_state.layers.get(d)
                if ref is None:
                    continue
                cand_mean.append(ref.mean)
                cand_var.append(ref.var)
            if not cand_mean:
                continue
            cm = np.stack(cand_mean)
            cv = np.stack(cand_var)
            dist = np.abs(cm - layer.mean)
            dist[~(np.isfinite(cm) & (cv <= thr))] = np.inf
            best = np.argmin(dist, axis=0)
            best_dist = np.take_along_axis(dist, best[None], axis=0)[0]
            sel = ok_cur & np.isfinite(best_dist)
            if not sel.any():
                continue
            pos = layer.positions()[sel]
            q_pos = pos.copy()
            q_pos[:, int(d)] = np.take_along_axis(cm, best[None], axis=0)[0][sel]
            dirs.append(np.full(len(pos), int(d), dtype=np.int64))
            p_pts.append(pos)
            q_pts.append(q_pos)
            p_vars.append(layer.var[sel])
            q_vars.append(np.take_along_axis(cv, best[None], axis=0)[0][sel])
    if not dirs:
        return Correspondences.empty()
    return Correspondences(
        np.concatenate(dirs), np.vstack(p_pts), np.vstack(q_pts), np.concatenate(p_vars), np.concatenate(q_vars)
    )


def residuals(pose: Pose, corr: Correspondences) -> np.ndarray:
    """Per-pair difference of predicted coordinates after moving ``p`` by ``pose``."""
    y = pose.apply(corr.p_point)
    n = np.arange(len(corr))
    return y[n, corr.direction] - corr.q_point[n, corr.direction]


def retract(pose: Pose, delta) -> Pose:
    """Left update ``R <- exp(dw) R``, ``t <- t + dv`` with ``delta = [dw, dv]``."""
    delta = np.asarray(delta, dtype=float)
    return Pose(quat_multiply(so3_exp(delta[:3]), pose.quat), pose.translation + delta[3:])


def residual_jacobian(pose: Pose, corr: Correspondences) -> np.ndarray:
    """(N, 6) Jacobian of :func:`residuals` with respect to the :func:`retract` increment.

    Row ``i`` is ``[(R p_i) x e_d, e_d]``.
    """
    rotated = corr.p_point @ pose.rotation.T
    n = len(corr)
    e = np.zeros((n, 3))
    e[np.arange(n), corr.direction] = 1.0
    return np.hstack([np.cross(rotated, e), e])


def _robust(r: np.ndarray, w: np.ndarray, huber_delta: float | None):
    """Cost terms and IRLS weights for whitened residuals ``r * sqrt(w)``.

    Without ``huber_delta`` this is plain weighted least squares; with it
    the terms follow the Huber loss ``a**2`` / ``2*delta*|a| - delta**2``.
    """
    if huber_delta is None:
        return w * r * r, w
    a = np.abs(r) * np.sqrt(w)
    inlier = a <= huber_delta
    terms = np.where(inlier, a * a, 2.0 * huber_delta * a - huber_delta**2)
    irls = np.where(inlier, w, w * huber_delta / np.maximum(a, 1e-300))
    return terms, irls


def observability(H: np.ndarray, tol: float):
    """Null-space basis of a 6x6 information matrix and the named axes it contains."""
    d = np.sqrt(np.maximum(np.diag(H), 0.0))
    dead = d <= tol * max(d.max(), 1e-300)
    scale = np.where(dead, 1.0, 1.0 / np.where(dead, 1.0, d))
    Hs = H * scale[:, None] * scale[None, :]
    Hs[dead, :] = 0.0
    Hs[:, dead] = 0.0
    evals, evecs = np.linalg.eigh(Hs)
    null = evecs[:, evals <= tol * max(evals.max(), 1e-300)]
    names = []
    if null.shape[1]:
        for k in range(6):
            if np.linalg.norm(null[k, :]) > 0.9:
                names.append(PARAM_NAMES[k])
    return null, names


@dataclass
class AlignmentResult:
    pose: Pose
    converged: bool
    iterations: int
    costs: list = field(default_factory=list)


def weighted_cost(pose: Pose, corr: Correspondences, huber_delta: float | None = None) -> float:
    terms, _ = _robust(residuals(pose, corr), corr.weights, huber_delta)
    return float(np.sum(terms))


def align(corr: Correspondences, initial: Pose | None = None, cfg: MatchConfig | None = None) -> AlignmentResult:
    """Damped Gauss-Newton on the variance-weighted per-direction residuals.

    Raises :class:`DegenerateGeometry` when the normal equations are rank
    deficient; the exception lists the unobservable axes. If the inner
    iteration cap is hit the best pose so far is returned with
    ``converged=False`` and a :class:`ConvergenceWarning`.
    """
    cfg = cfg or MatchConfig()
    pose = initial if initial is not None else Pose.identity()
    if len(corr) == 0:
        raise NoCorrespondences("no correspondences to align")
    n_dirs = len(np.unique(corr.direction))
    if len(corr) < 6 or n_dirs < 2:
        J = residual_jacobian(pose, corr)
        null, names = observability(J.T @ (corr.weights[:, None] * J), cfg.degeneracy_tol)
        raise DegenerateGeometry(
            f"{len(corr)} correspondences over {n_dirs} direction(s) cannot constrain 6 DoF; "
            f"unobservable: {', '.join(names) or 'mixed'}",
            names,
            null,
        )

    r = residuals(pose, corr)
    terms, w = _robust(r, corr.weights, cfg.huber_delta)
    cost = float(np.sum(terms))
    J = residual_jacobian(pose, corr)
    H = J.T @ (w[:, None] * J)
    null, names = observability(H, cfg.degeneracy_tol)
    if null.shape[1]:
        raise DegenerateGeometry(f"rank-deficient alignment, unobservable: {', '.join(names) or 'mixed'}", names, null)

    costs = [cost]
    mu = 1e-4
    converged = False
    it = 0
    for it in range(1, cfg.max_inner_iters + 1):
        g = J.T @ (w * r)
        if np.max(np.abs(g)) <= 1e-12 * max(1.0, cost):
            converged = True
            break
        accepted = False
        while mu < 1e10:
            A = H + mu * np.diag(np.diag(H))
            step = np.linalg.solve(A, -g)
            cand = retract(pose, step)
            r_new = residuals(cand, corr)
            terms, w_new = _robust(r_new, corr.weights, cfg.huber_delta)
            new_cost = float(np.sum(terms))
            if new_cost <= cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            converged = True
            break
        mu = max(mu / 10.0, 1e-12)
        small = np.linalg.norm(step[:3]) < 1e-10 and np.linalg.norm(step[3:]) < 1e-10
        rel = (cost - new_cost) <= 1e-12 * max(cost, 1e-300)
        pose, r, w, cost = cand, r_new, w_new, new_cost
        costs.append(cost)
        J = residual_jacobian(pose, corr)
        H = J.T @ (w[:, None] * J)
        if small or rel:
            converged = True
            break
    if not converged:
        warnings.warn(f"alignment stopped after {it} iterations without converging", ConvergenceWarning, stacklevel=2)
    return AlignmentResult(pose, converged, it, costs)


@dataclass
class RegistrationResult:
    pose: Pose
    frame: GPMap
    converged: bool
    iterations: int
    poses: list = field(default_factory=list)
    n_correspondences: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def register_scan(
    scan,
    reference: GPMap,
    initial: Pose,
    grid: GridConfig,
    kcfg: KernelConfig,
    cfg: MatchConfig,
    stats: ReconstructionStats | None = None,
) -> RegistrationResult:
    """Iterate reconstruct, match and align until the pose update is small.

    ``scan`` is in the sensor frame. ``poses`` in the result holds the
    estimate after every outer iteration, starting with ``initial``.
    ``frame`` is the reconstruction at the returned pose.
    """
    scan = np.asarray(scan, dtype=float).reshape(-1, 3)
    if reference.is_empty():
        raise RegistrationError("reference map is empty")
    if len(scan) == 0:
        raise RegistrationError("scan is empty")
    timings = {"preprocess": 0.0, "match": 0.0, "align": 0.0}
    pose = initial
    poses = [pose]
    counts = []
    converged = False
    frame = None
    for outer in range(cfg.max_outer_iters):
        t0 = time.perf_counter()
        frame = reconstruct_frame(pose.apply(scan), grid, kcfg, stats)
        t1 = time.perf_counter()
        corr = match(frame, reference, cfg)
        t2 = time.perf_counter()
        timings["preprocess"] += t1 - t0
        timings["match"] += t2 - t1
        counts.append(len(corr))
        if len(corr) == 0:
            raise NoCorrespondences(f"no correspondences at outer iteration {outer}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = align(corr, Pose.identity(), cfg)
        timings["align"] += time.perf_counter() - t2
        delta = res.pose
        pose = delta @ pose
        poses.append(pose)
        if np.linalg.norm(delta.translation) < cfg.pose_epsilon_trans and delta.angle() < cfg.pose_epsilon_rot:
            converged = True
            break
    if not converged:
        log.debug("registration hit %d outer iterations", cfg.max_outer_iters)
        # the last reconstruction predates the final update
        t0 = time.perf_counter()
        frame = reconstruct_frame(pose.apply(scan), grid, kcfg, stats)
        timings["preprocess"] += time.perf_counter() - t0
    return RegistrationResult(pose, frame, converged, len(poses) - 1, poses, counts, timings)
