"""Per-frame core odometry loop and the lower-frequency refinement loop.

The core loop registers every scan against its own map and fuses it. Every
``refine_batch`` frames it hands the registered clouds, expressed in the
frame of the batch's first scan (the anchor), to the refinement loop. The
refinement loop registers these denser clouds against a second, independent
map with a larger iteration budget. Each refined anchor pose yields a
correction ``refined_anchor @ core_anchor.inverse()`` that is applied on the
left of every core pose from that anchor onward.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol

import numpy as np

from gpslam.config import SlamConfig
from gpslam.geometry import Pose
from gpslam.gp import ReconstructionStats
from gpslam.io import Trajectory
from gpslam.mapstore import GPMap, reconstruct_frame, update_map
from gpslam.registration import RegistrationError, register_scan

log = logging.getLogger(__name__)


@dataclass
class FramePacket:
    seq: int
    timestamp: float
    scan: np.ndarray
    pose_estimate: Pose | None = None


def frames_from_scans(scans, timestamps=None) -> list[FramePacket]:
    scans = list(scans)
    if timestamps is None:
        timestamps = [0.1 * k for k in range(len(scans))]
    return [FramePacket(k, float(t), np.asarray(s, dtype=float)) for k, (s, t) in enumerate(zip(scans, timestamps))]


class InitialGuessProvider(Protocol):
    def guess(self, poses: list[Pose]) -> Pose: ...


class IdentityMotion:
    """Reuse the previous pose."""

    def guess(self, poses):
        return poses[-1] if poses else Pose.identity()


class ConstantVelocity:
    """Replay the last relative motion."""

    def guess(self, poses):
        if not poses:
            return Pose.identity()
        if len(poses) == 1:
            return poses[-1]
        step = poses[-2].inverse() @ poses[-1]
        return poses[-1] @ step


def make_guess_provider(mode: str) -> InitialGuessProvider:
    if mode == "identity":
        return IdentityMotion()
    if mode == "constant_velocity":
        return ConstantVelocity()
    raise ValueError(f"unknown initial_guess_mode {mode!r}")


@dataclass
class FrameTiming:
    seq: int
    preprocess_ms: float = 0.0
    match_ms: float = 0.0
    align_ms: float = 0.0
    update_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.preprocess_ms + self.match_ms + self.align_ms + self.update_ms


@dataclass
class RefineBatch:
    """Registered scans of consecutive frames, in the anchor scan's frame."""

    seqs: list
    cloud: np.ndarray
    anchor_pose: Pose

    @property
    def anchor_seq(self) -> int:
        return self.seqs[0]


@dataclass
class CoreResult:
    poses: list
    timestamps: list
    map: GPMap
    timings: list
    flagged: list
    stats: ReconstructionStats

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self.timestamps), list(self.poses))


@dataclass
class RefinementResult:
    anchor_seqs: list = field(default_factory=list)
    refined_anchor_poses: list = field(default_factory=list)
    corrections: dict = field(default_factory=dict)
    failed: list = field(default_factory=list)
    map: GPMap | None = None


@dataclass
class PipelineResult:
    trajectory: Trajectory
    core_trajectory: Trajectory
    core_map: GPMap
    refine_map: GPMap | None
    timings: list
    flagged: list
    dropped_batches: int = 0
    dropped_frames: int = 0
    refinement: RefinementResult | None = None


def integrate_poses(core_pose_at_batch: Pose, refined_pose_at_batch: Pose, subsequent_core_pose: Pose) -> Pose:
    """Carry a refinement correction onto a later core pose."""
    return refined_pose_at_batch @ core_pose_at_batch.inverse() @ subsequent_core_pose


def _validate_stream(frames):
    prev = None
    for f in frames:
        if prev is not None:
            if f.seq != prev.seq + 1:
                raise ValueError(f"frame seq {f.seq} does not follow {prev.seq}")
            if not f.timestamp > prev.timestamp:
                raise ValueError(f"timestamp of frame {f.seq} is not increasing")
        prev = f
        yield f


def _batches(core_poses, scans, seqs, size):
    """Group registered frames into anchor-frame clouds."""
    for start in range(0, len(seqs), size):
        part = range(start, min(start + size, len(seqs)))
        anchor = core_poses[start]
        to_anchor = anchor.inverse()
        cloud = np.vstack([(to_anchor @ core_poses[k]).apply(scans[k]) for k in part])
        yield RefineBatch([seqs[k] for k in part], cloud, anchor)


class _CoreRunner:
    def __init__(self, cfg: SlamConfig, on_batch=None):
        self.cfg = cfg
        self.match_cfg = replace(cfg.match, max_outer_iters=cfg.pipeline.core_outer_iters)
        self.guess = make_guess_provider(cfg.pipeline.initial_guess_mode)
        self.stats = ReconstructionStats()
        self.map = GPMap(cfg.grid)
        self.poses, self.stamps, self.timings, self.flagged = [], [], [], []
        self.on_batch = on_batch
        self._pending = []

    def step(self, frame: FramePacket):
        cfg = self.cfg
        scan = np.asarray(frame.scan, dtype=float).reshape(-1, 3)
        timing = FrameTiming(frame.seq)
        if not self.poses:
            pose = Pose.identity()
            t0 = time.perf_counter()
            rec = reconstruct_frame(scan, cfg.grid, cfg.kernel, self.stats)
            t1 = time.perf_counter()
            update_map(self.map, rec, cfg.kernel)
            timing.preprocess_ms = 1e3 * (t1 - t0)
            timing.update_ms = 1e3 * (time.perf_counter() - t1)
        else:
            initial = self.guess.guess(self.poses)
            try:
                res = register_scan(scan, self.map, initial, cfg.grid, cfg.kernel, self.match_cfg, self.stats)
            except RegistrationError as exc:
                log.warning("frame %d: registration failed (%s); keeping the initial guess", frame.seq, exc)
                pose = initial
                self.flagged.append(frame.seq)
            else:
                pose = res.pose
                timing.preprocess_ms = 1e3 * res.timings["preprocess"]
                timing.match_ms = 1e3 * res.timings["match"]
                timing.align_ms = 1e3 * res.timings["align"]
                t0 = time.perf_counter()
                update_map(self.map, res.frame, cfg.kernel)
                timing.update_ms = 1e3 * (time.perf_counter() - t0)
        frame.pose_estimate = pose
        self.poses.append(pose)
        self.stamps.append(frame.timestamp)
        self.timings.append(timing)
        if self.on_batch is not None:
            self._pending.append((frame.seq, pose, scan))
            if len(self._pending) == cfg.pipeline.refine_batch:
                self.flush()

    def flush(self):
        if self._pending and self.on_batch is not None:
            seqs, poses, scans = zip(*self._pending)
            self._pending = []
            for batch in _batches(list(poses), list(scans), list(seqs), len(seqs)):
                self.on_batch(batch)

    def result(self) -> CoreResult:
        return CoreResult(self.poses, self.stamps, self.map, self.timings, self.flagged, self.stats)


def run_core(frames: Iterable[FramePacket], cfg: SlamConfig | None = None, on_batch=None) -> CoreResult:
    """Register and fuse every frame; the first frame defines the map origin.

    A frame whose registration fails keeps its initial guess, is listed in
    ``flagged`` and is not fused into the map.
    """
    cfg = cfg or SlamConfig()
    runner = _CoreRunner(cfg, on_batch)
    for frame in _validate_stream(frames):
        runner.step(frame)
    if not runner.poses:
        raise ValueError("empty frame stream")
    runner.flush()
    return runner.result()


class Refiner:
    """Registers anchor-frame batch clouds against an independent map."""

    def __init__(self, cfg: SlamConfig):
        self.cfg = cfg
        self.match_cfg = replace(cfg.match, max_outer_iters=cfg.pipeline.refine_outer_iters)
        self.map = GPMap(cfg.grid)
        self.result = RefinementResult(map=self.map)
        self._correction = Pose.identity()

    def process(self, batch: RefineBatch):
        cfg = self.cfg
        initial = self._correction @ batch.anchor_pose
        if self.map.is_empty():
            refined = batch.anchor_pose
            frame = reconstruct_frame(refined.apply(batch.cloud), cfg.grid, cfg.kernel)
        else:
            try:
                res = register_scan(batch.cloud, self.map, initial, cfg.grid, cfg.kernel, self.match_cfg)
            except RegistrationError as exc:
                log.warning("refinement batch at frame %d failed (%s)", batch.anchor_seq, exc)
                self.result.failed.append(batch.anchor_seq)
                return
            refined, frame = res.pose, res.frame
        update_map(self.map, frame, cfg.kernel)
        self._correction = refined @ batch.anchor_pose.inverse()
        self.result.anchor_seqs.append(batch.anchor_seq)
        self.result.refined_anchor_poses.append(refined)
        self.result.corrections[batch.anchor_seq] = (batch.anchor_pose, refined)


def run_refinement(batches: Iterable[RefineBatch], cfg: SlamConfig | None = None) -> RefinementResult:
    refiner = Refiner(cfg or SlamConfig())
    for batch in batches:
        refiner.process(batch)
    return refiner.result


def apply_corrections(core_poses: list, corrections: dict) -> list:
    """Correct each core pose with the latest refined anchor at or before it.

    Frames before the first successful anchor are left unchanged.
    """
    out = []
    current = None
    for seq, pose in enumerate(core_poses):
        if seq in corrections:
            current = corrections[seq]
        out.append(pose if current is None else integrate_poses(current[0], current[1], pose))
    return out


class DropOldestQueue:
    """Bounded FIFO whose ``put`` never blocks; when full the oldest item is discarded."""

    def __init__(self, maxsize: int):
        self._items = collections.deque()
        self._maxsize = maxsize
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item):
        with self._cond:
            if len(self._items) >= self._maxsize:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self):
        with self._cond:
            while not self._items:
                self._cond.wait()
            return self._items.popleft()

    def __len__(self):
        with self._cond:
            return len(self._items)


_STOP = object()


def run_pipeline(frames: Iterable[FramePacket], cfg: SlamConfig | None = None) -> PipelineResult:
    """Run the core loop and, when enabled, the refinement loop.

    With ``pipeline.threaded`` the refinement loop runs on a worker thread fed
    through a :class:`DropOldestQueue`; otherwise batches are refined inline
    and the run is fully deterministic.
    """
    cfg = cfg or SlamConfig()
    pcfg = cfg.pipeline
    if not pcfg.refine_enabled:
        core = run_core(frames, cfg)
        traj = core.trajectory
        return PipelineResult(traj, traj, core.map, None, core.timings, core.flagged)

    refiner = Refiner(cfg)
    dropped = 0
    if pcfg.threaded:
        inbox = DropOldestQueue(pcfg.queue_size)
        errors = []

        def worker():
            while True:
                batch = inbox.get()
                if batch is _STOP:
                    return
                try:
                    refiner.process(batch)
                except Exception as exc:  # keep the core loop alive; report after join
                    errors.append(exc)

        thread = threading.Thread(target=worker, name="gpslam-refine", daemon=True)
        thread.start()
        try:
            core = run_core(frames, cfg, on_batch=inbox.put)
        finally:
            # the stop marker must not displace a pending batch
            with inbox._cond:
                inbox._items.append(_STOP)
                inbox._cond.notify()
            thread.join()
        dropped = inbox.dropped
        if errors:
            raise errors[0]
    else:
        core = run_core(frames, cfg, on_batch=refiner.process)

    refinement = refiner.result
    corrected = apply_corrections(core.poses, refinement.corrections)
    return PipelineResult(
        Trajectory(np.array(core.timestamps), corrected),
        core.trajectory,
        core.map,
        refinement.map,
        core.timings,
        core.flagged,
        dropped_batches=dropped,
        dropped_frames=0,
        refinement=refinement,
    )
