import pytest
import numpy as np
import pandas as pd

from fbm_volterra.exceptions import GridMismatchError
from fbm_volterra.gaussian_paths import (
    GaussianLaw,
    MomentAccumulator,
    RkhsElement,
    SamplePath,
    empirical_covariance,
    read_paths_csv,
    rkhs_norm,
    sample_bm,
    sample_bm_increments,
    sample_fbm_cholesky,
    sample_fbm_cholesky_batch,
    stack_paths,
    volterra_from_bm,
    volterra_from_increments,
    write_paths_csv,
)
from fbm_volterra.kernels import TimeGrid, fbm_covariance, fbm_kernel_matrix


def within_3se(samples, expected):
    se = samples.std(ddof=1) / np.sqrt(len(samples))
    return abs(samples.mean() - expected) <= 3.0 * se


class TestSamplePath:

    def test_shape_validation(self, grid_16):
        """Test that values must cover every grid point"""
        with pytest.raises(GridMismatchError):
            SamplePath(grid_16, np.zeros(10))

    def test_values_read_only(self, grid_16):
        """Test immutability of stored values"""
        path = SamplePath(grid_16, np.zeros(17))

        assert path.dim == 1
        with pytest.raises(ValueError):
            path.values[0, 0] = 1.0

    def test_frame_roundtrip(self, grid_16, seed):
        """Test DataFrame export"""
        path = sample_bm(grid_16, 2, seed)
        loaded = SamplePath.from_frame(path.to_frame())

        assert loaded.grid == grid_16
        assert np.array_equal(loaded.values, path.values)

    def test_stack_paths(self, grid_16):
        """Test stacking of path collections"""
        stacked = stack_paths([SamplePath(grid_16, np.zeros(17)), SamplePath(grid_16, np.ones(17))])

        assert stacked.shape == (2, 17, 1)
        assert stack_paths(np.zeros((3, 17))).shape == (3, 17, 1)

        with pytest.raises(ValueError, match="Empty"):
            stack_paths([])


class TestBrownianSampling:

    def test_same_seed_same_path(self, grid_16, seed):
        """Test reproducibility"""
        assert np.array_equal(sample_bm(grid_16, 1, seed).values, sample_bm(grid_16, 1, seed).values)

    def test_starts_at_zero(self, grid_16, seed):
        """Test W_0 = 0"""
        assert np.all(sample_bm(grid_16, 3, seed).values[0] == 0.0)

    def test_increment_variance(self, seed):
        """Test the variance of 10^5 increments"""
        grid = TimeGrid(1.0, 100)
        increments = sample_bm_increments(grid, 1, 1000, seed).reshape(-1)
        squares = increments ** 2

        assert within_3se(squares, grid.dt)

    def test_terminal_second_moment(self, grid_16, seed):
        """Test E[W_1^2] = 1 over 10^4 paths"""
        increments = sample_bm_increments(grid_16, 1, 10000, seed)
        terminal = increments.sum(axis=1)[:, 0]

        assert within_3se(terminal ** 2, 1.0)


class TestVolterraSampling:

    def test_brownian_kernel_reproduces_bm(self, grid_32, seed):
        """Test Z = W at h = 1/2"""
        bm = sample_bm(grid_32, 1, seed)
        z = volterra_from_bm(fbm_kernel_matrix(0.5, grid_32), bm)

        assert np.allclose(z.values, bm.values, atol=1e-12)

    def test_grid_mismatch(self, grid_16, grid_32, seed):
        """Test that the kernel and the Brownian path must share a grid"""
        with pytest.raises(GridMismatchError):
            volterra_from_bm(fbm_kernel_matrix(0.5, grid_16), sample_bm(grid_32, 1, seed))

    def test_super_diffusive_covariance(self, grid_16, seed):
        """Test Cov(Z_1, Z_1/2) for h = 0.7 over 10^4 paths"""
        kmat = fbm_kernel_matrix(0.7, grid_16)
        z = volterra_from_increments(kmat, sample_bm_increments(grid_16, 1, 10000, seed))[:, :, 0]
        product = z[:, 16] * z[:, 8]

        se = product.std(ddof=1) / np.sqrt(len(product))
        assert abs(product.mean() - fbm_covariance(0.7, 1.0, 0.5)) <= 3.0 * se + 1e-2

    @pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
    def test_sub_diffusive_variance(self, t, seed):
        """Test Var(Z_t) = t^0.6 for h = 0.3 with exact Cholesky sampling"""
        grid = TimeGrid(1.0, 16)
        z = sample_fbm_cholesky_batch(0.3, grid, 1, 10000, seed)[:, grid.index_of(t), 0]

        assert within_3se(z ** 2, t ** 0.6)

    def test_cholesky_brownian_law(self, grid_16, seed):
        """Test that Cholesky sampling at h = 1/2 has the Brownian covariance"""
        paths = sample_fbm_cholesky_batch(0.5, grid_16, 1, 10000, seed)
        law = empirical_covariance(paths)
        t = grid_16.points

        assert np.max(np.abs(law.cov - np.minimum.outer(t, t))) < 0.1

    def test_cholesky_single_path(self, grid_16, seed):
        """Test single-path Cholesky sampling"""
        path = sample_fbm_cholesky(0.7, grid_16, 2, seed)

        assert path.values.shape == (17, 2)
        assert np.all(path.values[0] == 0.0)

    def test_self_similarity(self, seed):
        """Test Var(Z_2t) / Var(Z_t) = 2^(2h)"""
        grid = TimeGrid(1.0, 16)
        z = sample_fbm_cholesky_batch(0.7, grid, 1, 20000, seed)[:, :, 0]
        ratio = np.mean(z[:, 16] ** 2) / np.mean(z[:, 8] ** 2)

        assert ratio == pytest.approx(2.0 ** 1.4, rel=0.05)


class TestLawsAndMoments:

    def test_gaussian_law_validation(self):
        """Test covariance checks"""
        with pytest.raises(ValueError, match="symmetric"):
            GaussianLaw(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

        with pytest.raises(ValueError, match="PSD"):
            GaussianLaw(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

        with pytest.raises(ValueError, match="does not match"):
            GaussianLaw(np.zeros(3), np.eye(2))

    def test_gaussian_law_marginals(self):
        """Test restriction to coordinates and time points"""
        law = GaussianLaw(np.arange(4.0), np.diag([1.0, 2.0, 3.0, 4.0]), dim=2)

        assert np.array_equal(law.time_marginal(1).mean, [2.0, 3.0])
        assert np.array_equal(law.restrict([0, 3]).cov, np.diag([1.0, 4.0]))

    def test_identical_paths_zero_covariance(self, grid_16):
        """Test empirical covariance of identical paths"""
        paths = np.tile(np.linspace(0.0, 1.0, 17), (5, 1))

        assert np.allclose(empirical_covariance(paths).cov, 0.0)

    def test_brownian_empirical_covariance(self, grid_16, seed):
        """Test that i.i.d. Brownian paths have covariance min(t, s)"""
        increments = sample_bm_increments(grid_16, 1, 10000, seed)
        paths = np.concatenate([np.zeros((10000, 1, 1)), np.cumsum(increments, axis=1)], axis=1)
        law = empirical_covariance(paths)
        t = grid_16.points

        # 3 s.e. of an entry is at most 3 * sqrt(2 / 10^4)
        assert np.max(np.abs(law.cov - np.minimum.outer(t, t))) < 3.0 * np.sqrt(2.0 / 10000) * 1.5

    def test_moment_accumulator_merge_order(self, rng):
        """Test that merged accumulators match a single pass"""
        data = rng.standard_normal((200, 3))
        whole = MomentAccumulator(3).update(data)
        merged = MomentAccumulator(3).update(data[120:]).merge(MomentAccumulator(3).update(data[:120]))

        assert np.allclose(whole.covariance(), np.cov(data, rowvar=False))
        assert np.allclose(merged.covariance(), whole.covariance())
        assert np.allclose(merged.mean, data.mean(axis=0))

    def test_rkhs_norm(self, grid_16):
        """Test the RKHS norm of a constant Q-density"""
        assert rkhs_norm(RkhsElement(grid_16, np.zeros(17))) == 0.0
        assert rkhs_norm(RkhsElement(grid_16, np.full(17, 2.0))) == pytest.approx(2.0)
        assert rkhs_norm(RkhsElement(grid_16, np.full(17, 2.0)), up_to=0.25) == pytest.approx(1.0)


class TestPathCsv:

    def test_long_format(self, tmp_path, grid_16, seed):
        """Test long-format path export and import"""
        paths = sample_fbm_cholesky_batch(0.7, grid_16, 2, 3, seed)
        path = write_paths_csv(paths, grid_16, str(tmp_path / "paths.csv"))

        df = pd.read_csv(path)
        assert list(df.columns) == ["path_id", "time", "dim_0", "dim_1"]
        assert len(df) == 3 * 17

        grid, loaded = read_paths_csv(path)
        assert grid == grid_16
        assert np.allclose(loaded, paths)
