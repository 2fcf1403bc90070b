"""Flat key-value configuration (YAML ``key: value`` lines)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import yaml

from gpslam.gp import KernelConfig
from gpslam.grid import GridConfig
from gpslam.registration import MatchConfig


@dataclass(frozen=True)
class PipelineConfig:
    refine_enabled: bool = False
    refine_batch: int = 5
    core_outer_iters: int = 5
    refine_outer_iters: int = 10
    initial_guess_mode: str = "constant_velocity"
    threaded: bool = False
    queue_size: int = 4

    def __post_init__(self):
        if self.refine_batch < 1:
            raise ValueError("refine_batch must be >= 1")
        if self.initial_guess_mode not in ("identity", "constant_velocity"):
            raise ValueError(f"unknown initial_guess_mode {self.initial_guess_mode!r}")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")


@dataclass(frozen=True)
class SlamConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


def _as_bool(v) -> bool:
    if isinstance(v, str):
        if v.lower() in ("on", "true", "yes", "1"):
            return True
        if v.lower() in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return bool(v)


# file key -> (section, attribute, converter)
_KEYS = {
    "cell_side_a": ("grid", "a", float),
    "test_interval_r": ("grid", "r", float),
    "min_points": ("grid", "n_min", int),
    "planarity_ratio": ("grid", "planarity_ratio", float),
    "normal_threshold": ("grid", "normal_component_threshold", float),
    "kappa": ("kernel", "kappa", float),
    "sigma": ("kernel", "sigma2", lambda v: float(v) ** 2),
    "jitter": ("kernel", "jitter", float),
    "variance_includes_noise": ("kernel", "variance_includes_noise", _as_bool),
    "sigma2_thr": ("match", "sigma2_thr", float),
    "max_outer_iters": ("match", "max_outer_iters", int),
    "max_inner_iters": ("match", "max_inner_iters", int),
    "pose_epsilon_trans": ("match", "pose_epsilon_trans", float),
    "pose_epsilon_rot": ("match", "pose_epsilon_rot", float),
    "huber_delta": ("match", "huber_delta", lambda v: None if v in (None, False, "off", "none") else float(v)),
    "refine_enabled": ("pipeline", "refine_enabled", _as_bool),
    "refine_batch": ("pipeline", "refine_batch", int),
    "core_outer_iters": ("pipeline", "core_outer_iters", int),
    "refine_outer_iters": ("pipeline", "refine_outer_iters", int),
    "initial_guess_mode": ("pipeline", "initial_guess_mode", str),
    "threaded": ("pipeline", "threaded", _as_bool),
    "queue_size": ("pipeline", "queue_size", int),
}

CONFIG_KEYS = tuple(_KEYS)


def config_from_dict(values: dict, base: SlamConfig | None = None) -> SlamConfig:
    base = base or SlamConfig()
    unknown = set(values) - set(_KEYS)
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    sections = {"grid": {}, "kernel": {}, "match": {}, "pipeline": {}}
    for key, raw in values.items():
        section, attr, conv = _KEYS[key]
        sections[section][attr] = conv(raw)
    return SlamConfig(
        replace(base.grid, **sections["grid"]),
        replace(base.kernel, **sections["kernel"]),
        replace(base.match, **sections["match"]),
        replace(base.pipeline, **sections["pipeline"]),
    )


def load_config(path) -> SlamConfig:
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ValueError(f"{path}: expected key-value pairs")
    return config_from_dict(values)
