"""Hash-indexed GP map and its incremental inverse-variance fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gpslam.geometry import Direction
from gpslam.gp import KernelConfig, Layer, ReconstructionStats, Sample, reconstruct_cell
from gpslam.grid import CellBucket, CellIndex, GridConfig, regionalize

VARIANCE_FLOOR = 1e-6


def fuse(mean_map, var_map, mean_cur, var_cur):
    """Inverse-variance combination, elementwise on scalars or arrays."""
    denom = var_map + var_cur
    var = var_map * var_cur / denom
    mean = (var_map * mean_cur + var_cur * mean_map) / denom
    return mean, var


def fuse_sample(map_sample: Sample, cur_sample: Sample, floor: float = VARIANCE_FLOOR) -> Sample:
    if map_sample.direction != cur_sample.direction or tuple(map_sample.lattice_id) != tuple(cur_sample.lattice_id):
        raise ValueError("samples must share direction and lattice id")
    mean, var = fuse(map_sample.mean, map_sample.variance, cur_sample.mean, cur_sample.variance)
    return map_sample._replace(mean=float(mean), variance=float(max(var, floor)))


@dataclass
class CellState:
    layers: dict = field(default_factory=dict)
    residue: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def sample_count(self) -> int:
        return sum(len(layer) for layer in self.layers.values())


class GPMap:
    """Cells of up to three layers plus raw points too sparse to reconstruct."""

    def __init__(self, grid: GridConfig):
        self.grid = grid
        self.cells: dict[CellIndex, CellState] = {}

    def __len__(self):
        return len(self.cells)

    def __contains__(self, index):
        return index in self.cells

    def __iter__(self):
        return iter(self.cells.items())

    def is_empty(self) -> bool:
        return not self.cells

    def cell(self, index: CellIndex) -> CellState:
        state = self.cells.get(index)
        if state is None:
            state = self.cells[index] = CellState()
        return state

    def insert_layer(self, layer: Layer):
        self.cell(layer.index).layers[layer.direction] = layer

    def layers(self):
        for state in self.cells.values():
            yield from state.layers.values()

    def sample_count(self) -> int:
        return sum(s.sample_count() for s in self.cells.values())

    def residue_count(self) -> int:
        return sum(len(s.residue) for s in self.cells.values())

    def copy(self) -> GPMap:
        out = GPMap(self.grid)
        for idx, state in self.cells.items():
            out.cells[idx] = CellState({d: l.copy() for d, l in state.layers.items()}, state.residue.copy())
        return out

    def samples_array(self, max_variance: float = np.inf) -> np.ndarray:
        """(N, 5) rows of ``x y z variance direction`` for every valid sample."""
        rows = []
        for layer in self.layers():
            keep = layer.valid & (layer.var <= max_variance)
            if not keep.any():
                continue
            pos = layer.positions()[keep]
            rows.append(np.column_stack([pos, layer.var[keep], np.full(len(pos), int(layer.direction))]))
        if not rows:
            return np.zeros((0, 5))
        return np.vstack(rows)

    def export(self, path, max_variance: float = np.inf):
        """Write samples as ASCII ``x y z variance direction`` lines."""
        data = self.samples_array(max_variance)
        header = (
            "gpslam map samples, world frame (right-handed, z-up), meters\n"
            "direction: 0=x 1=y 2=z\n"
            "x y z variance direction"
        )
        np.savetxt(path, data, fmt=["%.6f", "%.6f", "%.6f", "%.9g", "%d"], header=header)


def query_samples(gmap: GPMap, index: CellIndex, direction: Direction) -> Layer | None:
    state = gmap.cells.get(index)
    if state is None:
        return None
    return state.layers.get(direction)


def reconstruct_frame(
    cloud_world, grid: GridConfig, kcfg: KernelConfig, stats: ReconstructionStats | None = None
) -> GPMap:
    """Regionalize a world-frame cloud and reconstruct every cell."""
    frame = GPMap(grid)
    for idx, bucket in regionalize(cloud_world, grid).items():
        layers = reconstruct_cell(bucket, grid, kcfg, stats)
        state = frame.cell(idx)
        if layers:
            state.layers = {layer.direction: layer for layer in layers}
        else:
            state.residue = bucket.raw_points
    return frame


def _fuse_layer(map_layer: Layer, cur_layer: Layer, floor: float) -> Layer:
    both = map_layer.valid & cur_layer.valid
    only_cur = cur_layer.valid & ~map_layer.valid
    out = map_layer.copy()
    if both.any():
        m, v = fuse(map_layer.mean[both], map_layer.var[both], cur_layer.mean[both], cur_layer.var[both])
        out.mean[both] = m
        out.var[both] = np.maximum(v, floor)
    out.mean[only_cur] = cur_layer.mean[only_cur]
    out.var[only_cur] = cur_layer.var[only_cur]
    return out


def _merge_layers(state: CellState, layers, floor: float):
    for layer in layers:
        existing = state.layers.get(layer.direction)
        state.layers[layer.direction] = layer.copy() if existing is None else _fuse_layer(existing, layer, floor)


def update_map(
    gmap: GPMap,
    frame: GPMap,
    kcfg: KernelConfig,
    floor: float = VARIANCE_FLOOR,
    residue_cap: int | None = None,
) -> GPMap:
    """Fuse a registered, reconstructed frame into ``gmap`` in place.

    New cells and layers are inserted, layers sharing a direction are fused
    per lattice location, and raw residue accumulates until it can be
    reconstructed. Returns ``gmap``.
    """
    grid = gmap.grid
    if residue_cap is None:
        residue_cap = 3 * grid.n_test
    for idx, cur in frame.cells.items():
        state = gmap.cells.get(idx)
        if state is None:
            gmap.cells[idx] = CellState({d: l.copy() for d, l in cur.layers.items()}, cur.residue.copy())
            continue
        _merge_layers(state, cur.layers.values(), floor)
        if len(cur.residue) == 0:
            continue
        residue = np.vstack([state.residue, cur.residue])
        if len(residue) >= grid.n_min:
            layers = reconstruct_cell(CellBucket(idx, residue), grid, kcfg)
            if layers:
                _merge_layers(state, layers, floor)
                residue = np.zeros((0, 3))
        state.residue = residue[-residue_cap:]
    return gmap
