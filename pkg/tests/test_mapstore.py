import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpslam.geometry import Direction
from gpslam.gp import KernelConfig, Layer, Sample
from gpslam.grid import CellIndex, GridConfig, TestLattice
from gpslam.mapstore import (
    VARIANCE_FLOOR,
    GPMap,
    fuse,
    fuse_sample,
    query_samples,
    reconstruct_frame,
    update_map,
)

GRID = GridConfig()
KCFG = KernelConfig()

pos_var = st.floats(1e-6, 1e3)
val = st.floats(-1e3, 1e3)


def sample(mean, var, d=Direction.Z, lid=(0, 0)):
    return Sample(d, lid, np.zeros(2), mean, var)


def plane_cloud(rng, n=4000, z=0.3, extent=4.5):
    xy = rng.uniform(0, extent, size=(n, 2))
    return np.column_stack([xy, z + rng.normal(0, 0.005, n)])


def box_corner_cloud(rng, n=3000):
    """Floor plus two walls: constrains every direction."""
    parts = [
        np.column_stack([rng.uniform(0, 3, n), rng.uniform(0, 3, n), np.full(n, 0.2)]),
        np.column_stack([np.full(n, 0.2), rng.uniform(0, 3, n), rng.uniform(0, 3, n)]),
        np.column_stack([rng.uniform(0, 3, n), np.full(n, 0.2), rng.uniform(0, 3, n)]),
    ]
    return np.vstack(parts)


class TestFuse:
    def test_equal_variances(self):
        s = fuse_sample(sample(1.0, 0.2), sample(3.0, 0.2))
        assert np.isclose(s.mean, 2.0) and np.isclose(s.variance, 0.1)

    def test_confident_map_dominates(self):
        fm, fc = 0.5, 2.5
        s = fuse_sample(sample(fm, 1e-4), sample(fc, 1.0))
        assert abs(s.mean - fm) <= 1e-4 * abs(fc - fm)

    def test_self_fusion_halves_variance(self):
        s = fuse_sample(sample(0.7, 0.02), sample(0.7, 0.02))
        assert s.mean == 0.7 and np.isclose(s.variance, 0.01)

    def test_floor(self):
        assert fuse_sample(sample(0, 1e-7), sample(0, 1e-7)).variance == VARIANCE_FLOOR

    def test_mismatched_samples_rejected(self):
        with pytest.raises(ValueError):
            fuse_sample(sample(0, 1, Direction.Z), sample(0, 1, Direction.X))
        with pytest.raises(ValueError):
            fuse_sample(sample(0, 1, lid=(0, 0)), sample(0, 1, lid=(0, 1)))

    @given(val, pos_var, val, pos_var)
    def test_variance_not_above_inputs(self, m1, v1, m2, v2):
        m, v = fuse(m1, v1, m2, v2)
        assert v <= min(v1, v2) * (1 + 1e-12)
        assert min(m1, m2) - 1e-9 <= m <= max(m1, m2) + 1e-9

    @given(val, pos_var, val, pos_var)
    def test_symmetric(self, m1, v1, m2, v2):
        a = fuse(m1, v1, m2, v2)
        b = fuse(m2, v2, m1, v1)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    @given(val, pos_var, val, pos_var, val, pos_var)
    def test_associative(self, m1, v1, m2, v2, m3, v3):
        left = fuse(*fuse(m1, v1, m2, v2), m3, v3)
        right = fuse(m1, v1, *fuse(m2, v2, m3, v3))
        assert np.allclose(left, right, rtol=1e-9, atol=1e-9)


def make_layer(idx, d, rng):
    lat = TestLattice.for_cell(idx, d, GRID)
    n = lat.n_side
    return Layer(lat, rng.normal(size=(n, n)), rng.uniform(0.001, 0.01, size=(n, n)))


class TestQuery:
    def test_empty(self):
        assert query_samples(GPMap(GRID), CellIndex(0, 0, 0), Direction.Z) is None

    def test_insert_then_query(self, rng):
        m = GPMap(GRID)
        layer = make_layer(CellIndex(1, 2, 3), Direction.Y, rng)
        m.insert_layer(layer)
        assert query_samples(m, CellIndex(1, 2, 3), Direction.Y) is layer
        assert query_samples(m, CellIndex(1, 2, 3), Direction.X) is None

    def test_many_inserts_against_dict_oracle(self, rng):
        m = GPMap(GRID)
        oracle = {}
        lat_cache = {}
        keys = rng.integers(-200, 200, size=(100_000, 4))
        for ix, iy, iz, d in keys:
            idx = CellIndex(int(ix), int(iy), int(iz))
            dd = Direction(int(d) % 3)
            lat = lat_cache.setdefault((idx, dd), TestLattice.for_cell(idx, dd, GRID))
            layer = Layer(lat, np.zeros((6, 6)), np.ones((6, 6)))
            m.insert_layer(layer)
            oracle[(idx, dd)] = layer
        for (idx, dd), layer in oracle.items():
            assert query_samples(m, idx, dd) is layer


class TestUpdate:
    def test_first_frame_initializes(self, rng):
        frame = reconstruct_frame(plane_cloud(rng), GRID, KCFG)
        m = update_map(GPMap(GRID), frame, KCFG)
        assert set(m.cells) == set(frame.cells)
        for idx, state in frame.cells.items():
            for d, layer in state.layers.items():
                got = m.cells[idx].layers[d]
                assert np.array_equal(got.mean, layer.mean, equal_nan=True)
                assert np.array_equal(got.var, layer.var)

    def test_identical_frame_halves_variance(self, rng):
        frame = reconstruct_frame(box_corner_cloud(rng), GRID, KCFG)
        m = update_map(GPMap(GRID), frame, KCFG)
        before = m.copy()
        update_map(m, frame, KCFG)
        assert set(m.cells) == set(before.cells)
        for idx, state in before.cells.items():
            for d, layer in state.layers.items():
                ok = layer.valid
                expected = np.maximum(layer.var[ok] / 2, VARIANCE_FLOOR)
                assert np.allclose(m.cells[idx].layers[d].var[ok], expected, rtol=1e-12)
                assert np.allclose(m.cells[idx].layers[d].mean[ok], layer.mean[ok], rtol=1e-12)

    def test_residue_reconstructs_once_enough_points(self):
        idx = CellIndex(0, 0, 0)
        a = np.array([[0.1, 0.1, 0.5], [0.6, 0.2, 0.5], [1.1, 0.3, 0.5]])
        b = np.array([[0.2, 0.9, 0.5], [0.7, 1.2, 0.5], [1.3, 1.4, 0.5]])
        m = update_map(GPMap(GRID), reconstruct_frame(a, GRID, KCFG), KCFG)
        assert m.cells[idx].layers == {} and len(m.cells[idx].residue) == 3
        update_map(m, reconstruct_frame(b, GRID, KCFG), KCFG)
        state = m.cells[idx]
        assert len(state.residue) == 0
        assert Direction.Z in state.layers
        assert np.allclose(state.layers[Direction.Z].mean, 0.5)

    def test_partial_overlap_takes_union(self, rng):
        idx = CellIndex(0, 0, 0)
        lat = TestLattice.for_cell(idx, Direction.Z, GRID)
        mean_a = np.full((6, 6), np.nan)
        var_a = np.full((6, 6), np.inf)
        mean_a[:3], var_a[:3] = 1.0, 0.004
        mean_b = np.full((6, 6), 2.0)
        var_b = np.full((6, 6), 0.004)
        m = GPMap(GRID)
        m.insert_layer(Layer(lat, mean_a, var_a))
        frame = GPMap(GRID)
        frame.insert_layer(Layer(lat, mean_b, var_b))
        update_map(m, frame, KCFG)
        out = m.cells[idx].layers[Direction.Z]
        assert np.allclose(out.mean[:3], 1.5) and np.allclose(out.var[:3], 0.002)
        assert np.allclose(out.mean[3:], 2.0) and np.allclose(out.var[3:], 0.004)

    def test_new_direction_is_inserted(self, rng):
        idx = CellIndex(0, 0, 0)
        m = GPMap(GRID)
        m.insert_layer(make_layer(idx, Direction.Z, rng))
        frame = GPMap(GRID)
        xl = make_layer(idx, Direction.X, rng)
        frame.insert_layer(xl)
        update_map(m, frame, KCFG)
        assert set(m.cells[idx].layers) == {Direction.X, Direction.Z}
        assert np.array_equal(m.cells[idx].layers[Direction.X].mean, xl.mean)

    @given(st.integers(0, 2**31))
    def test_state_bound_property(self, seed):
        rng = np.random.default_rng(seed)
        m = GPMap(GRID)
        for _ in range(5):
            cloud = rng.uniform(0, 3, size=(int(rng.integers(1, 400)), 3))
            update_map(m, reconstruct_frame(cloud, GRID, KCFG), KCFG)
        for state in m.cells.values():
            assert len(state.layers) <= 3
            assert state.sample_count() <= 3 * GRID.n_test
            assert len(state.residue) <= 3 * GRID.n_test


def test_export_format(tmp_path, rng):
    m = update_map(GPMap(GRID), reconstruct_frame(plane_cloud(rng), GRID, KCFG), KCFG)
    path = tmp_path / "map.txt"
    m.export(path)
    lines = path.read_text().splitlines()
    assert lines[2] == "# x y z variance direction"
    data = np.loadtxt(path)
    assert data.shape == (m.sample_count(), 5)
    assert set(np.unique(data[:, 4]).astype(int)) <= {0, 1, 2}
    assert np.all(data[:, 3] > 0)
