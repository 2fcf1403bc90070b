import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpslam.geometry import Direction
from gpslam.gp import (
    KernelConfig,
    Layer,
    ReconstructionFailed,
    ReconstructionStats,
    gp_predict,
    kernel,
    reconstruct_cell,
)
from gpslam.grid import CellBucket, CellIndex, GridConfig, TestLattice, planar, principled_downsample

GRID = GridConfig()


def dense_oracle(L, f, T, cfg, prior_mean=0.0):
    """Direct evaluation with an explicit matrix inverse and per-entry kernel calls."""
    n, m = len(L), len(T)
    K = np.array([[kernel(L[i], L[j], cfg) for j in range(n)] for i in range(n)])
    Ks = np.array([[kernel(L[i], T[j], cfg) for j in range(m)] for i in range(n)])
    Ainv = np.linalg.inv(K + (cfg.sigma2 + cfg.jitter) * np.eye(n))
    mean = prior_mean + Ks.T @ Ainv @ (f - prior_mean)
    var = 1.0 - np.einsum("ij,ik,kj->j", Ks, Ainv, Ks)
    if cfg.variance_includes_noise:
        var = var + cfg.sigma2
    return mean, var


class TestKernel:
    def test_zero_distance(self):
        assert kernel([0.3, 0.2], [0.3, 0.2], KernelConfig()) == 1.0

    def test_unit_distance(self):
        assert np.isclose(kernel([0, 0], [0.6, 0.8], KernelConfig(kappa=1.0)), np.exp(-1.0))

    def test_symmetry_and_range(self, rng):
        cfg = KernelConfig(kappa=2.5)
        for _ in range(1000):
            a, b = rng.normal(size=2) * 3, rng.normal(size=2) * 3
            k = kernel(a, b, cfg)
            assert k == kernel(b, a, cfg)
            assert 0 < k <= 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KernelConfig(kappa=0)
        with pytest.raises(ValueError):
            KernelConfig(sigma2=0)
        with pytest.raises(ValueError):
            KernelConfig(jitter=-1)


class TestPredict:
    def test_single_point_closed_form(self):
        s2 = 0.01
        cfg = KernelConfig(kappa=1.0, sigma2=s2, jitter=0.0)
        mean, var = gp_predict([[0.2, 0.3]], [2.0], [[0.2, 0.3]], cfg)
        assert np.isclose(mean[0], 2.0 / (1 + s2), rtol=1e-12)
        assert np.isclose(var[0], 1 - 1 / (1 + s2) + s2, rtol=1e-12)

    def test_constant_observations_zero_prior_shrinkage_is_bounded(self, rng):
        s2, c = 1e-4, 3.0
        cfg = KernelConfig(kappa=4.0, sigma2=s2)
        L = rng.uniform(0, 1.5, size=(60, 2))
        mean, _ = gp_predict(L, np.full(60, c), L[:10], cfg)
        assert np.all(np.abs(mean - c) <= s2 * abs(c))

    def test_constant_observations_with_prior_mean_are_exact(self, rng):
        cfg = KernelConfig(kappa=4.0, sigma2=1e-4)
        L = rng.uniform(0, 1.5, size=(60, 2))
        mean, _ = gp_predict(L, np.full(60, -1.25), rng.uniform(0, 1.5, size=(30, 2)), cfg, prior_mean=-1.25)
        assert np.allclose(mean, -1.25, atol=1e-12)

    def test_far_away_returns_prior(self, rng):
        cfg = KernelConfig(kappa=1.0, sigma2=0.01)
        L = rng.uniform(0, 1, size=(20, 2))
        mean, var = gp_predict(L, rng.normal(size=20), [[30.0, 30.0]], cfg)
        assert abs(mean[0]) < 1e-4
        assert abs(var[0] - (1 + cfg.sigma2)) < 1e-4

    def test_variance_without_noise_term(self):
        cfg = KernelConfig(kappa=1.0, sigma2=0.01, jitter=0.0, variance_includes_noise=False)
        _, var = gp_predict([[0.0, 0.0]], [1.0], [[0.0, 0.0]], cfg)
        assert np.isclose(var[0], 1 - 1 / 1.01)

    @given(st.integers(1, 40), st.integers(0, 2**31), st.floats(0.05, 8.0), st.floats(1e-4, 0.1))
    def test_matches_dense_oracle(self, n, seed, kappa, s2):
        rng = np.random.default_rng(seed)
        cfg = KernelConfig(kappa=kappa, sigma2=s2)
        L = rng.uniform(0, 1.5, size=(n, 2))
        f = rng.normal(size=n)
        T = rng.uniform(-0.5, 2.0, size=(15, 2))
        mu0 = float(f.mean())
        mean, var = gp_predict(L, f, T, cfg, mu0)
        om, ov = dense_oracle(L, f, T, cfg, mu0)
        assert np.allclose(mean, om, rtol=1e-7, atol=1e-9)
        assert np.allclose(var, ov, rtol=1e-7, atol=1e-9)

    @given(st.integers(1, 40), st.integers(0, 2**31))
    def test_variance_bounds(self, n, seed):
        rng = np.random.default_rng(seed)
        cfg = KernelConfig(kappa=3.0)
        _, var = gp_predict(rng.uniform(0, 1.5, (n, 2)), rng.normal(size=n), rng.uniform(0, 1.5, (20, 2)), cfg)
        assert np.all(var > 0)
        assert np.all(var <= cfg.prior_variance + 1e-12)

    @given(st.integers(2, 30), st.integers(0, 2**31))
    def test_more_data_never_raises_variance(self, n, seed):
        rng = np.random.default_rng(seed)
        cfg = KernelConfig(kappa=2.0)
        L = rng.uniform(0, 1.5, (n, 2))
        f = rng.normal(size=n)
        T = rng.uniform(0, 1.5, (20, 2))
        _, v_less = gp_predict(L[:-1], f[:-1], T, cfg)
        _, v_more = gp_predict(L, f, T, cfg)
        assert np.all(v_more <= v_less + 1e-10)

    def test_variance_smaller_near_data(self):
        cfg = KernelConfig(kappa=4.0)
        _, var = gp_predict([[0.0, 0.0]], [0.0], [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], cfg)
        assert var[0] < var[1] < var[2]

    def test_non_positive_definite_raises(self):
        cfg = KernelConfig(kappa=1.0, sigma2=1e-300, jitter=0.0)
        L = np.array([[np.nan, 0.0], [0.0, 0.0]])
        with pytest.raises(ReconstructionFailed):
            gp_predict(L, [1.0, 2.0], [[0.0, 0.0]], cfg)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            gp_predict(np.zeros((0, 2)), [], [[0, 0]], KernelConfig())
        with pytest.raises(ValueError):
            gp_predict([[0, 0]], [1, 2], [[0, 0]], KernelConfig())


class TestReconstructCell:
    def test_noisy_plane(self, rng):
        xy = rng.uniform(0, 1.5, size=(100, 2))
        pts = np.column_stack([xy, 1.0 + rng.normal(0, 0.01, 100)])
        bucket = CellBucket(CellIndex(0, 0, 0), pts)
        stats = ReconstructionStats()
        layers = reconstruct_cell(bucket, GRID, KernelConfig(), stats)
        assert [layer.direction for layer in layers] == [Direction.Z]
        z = layers[0]
        assert len(z) == GRID.n_test
        assert np.all(np.abs(z.mean - 1.0) < 0.05)
        assert stats.solves == 1 and stats.max_system_size <= GRID.n_test

    def test_variance_smaller_near_data(self, rng):
        # data only in the lower half of x
        xy = np.column_stack([rng.uniform(0, 0.7, 60), rng.uniform(0, 1.5, 60)])
        pts = np.column_stack([xy, np.full(60, 0.5)])
        layers = reconstruct_cell(CellBucket(CellIndex(0, 0, 0), pts), GRID, KernelConfig(kappa=2.0), directions=[Direction.Z])
        var = layers[0].var
        assert var[:2].mean() < var[-2:].mean()

    def test_matches_oracle_on_downsampled_points(self, rng):
        pts = rng.uniform(0, 1.5, size=(300, 3))
        bucket = CellBucket(CellIndex(0, 0, 0), pts)
        cfg = KernelConfig(kappa=1.0)
        layers = reconstruct_cell(bucket, GRID, cfg)
        for layer in layers:
            d = layer.direction
            lat = TestLattice.for_cell(bucket.index, d, GRID)
            train, _ = principled_downsample(bucket, d, lat)
            f = train[:, int(d)]
            om, ov = dense_oracle(planar(train, d), f, lat.locations().reshape(-1, 2), cfg, f.mean())
            assert np.allclose(layer.mean.ravel(), om, rtol=1e-9)
            assert np.allclose(layer.var.ravel(), ov, rtol=1e-9)

    def test_below_n_min_gives_no_layers(self):
        pts = np.array([[0.1, 0.1, 0.1], [0.5, 0.4, 0.3], [1.0, 0.2, 0.9]])
        assert reconstruct_cell(CellBucket(CellIndex(0, 0, 0), pts), GRID, KernelConfig()) == []

    def test_wall_gives_single_x_layer(self, rng):
        pts = np.column_stack([np.full(50, 1.2), rng.uniform(0, 1.5, 50), rng.uniform(0, 1.5, 50)])
        layers = reconstruct_cell(CellBucket(CellIndex(0, 0, 0), pts), GRID, KernelConfig())
        assert [layer.direction for layer in layers] == [Direction.X]
        assert np.allclose(layers[0].mean, 1.2, atol=1e-9)

    def test_layer_accessors(self, rng):
        xy = rng.uniform(0, 1.5, size=(60, 2))
        pts = np.column_stack([xy, np.full(60, 0.7)])
        layer = reconstruct_cell(CellBucket(CellIndex(0, 0, 0), pts), GRID, KernelConfig())[0]
        s = layer.get((1, 2))
        assert s.direction == Direction.Z and s.lattice_id == (1, 2)
        assert np.allclose(s.position, [1.5 * 0.25, 2.5 * 0.25, s.mean])
        assert len(list(layer.samples())) == len(layer)
        assert len({s.lattice_id for s in layer.samples()}) == len(layer)
        copy = layer.copy()
        copy.mean[0, 0] = 99
        assert layer.mean[0, 0] != 99


def test_missing_samples_are_not_counted():
    lat = TestLattice.for_cell(CellIndex(0, 0, 0), Direction.Z, GRID)
    mean = np.full((6, 6), np.nan)
    var = np.full((6, 6), np.inf)
    mean[0, 0], var[0, 0] = 1.0, 0.001
    layer = Layer(lat, mean, var)
    assert len(layer) == 1
    assert layer.get((0, 1)) is None
