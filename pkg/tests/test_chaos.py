import pytest
import numpy as np

from fbm_volterra.chaos import (
    FouParams,
    HierarchyInputs,
    chaos_bound,
    chaos_rate_table,
    entropy_between_laws,
    fou_chaos_constants,
    fou_contrast,
    fou_marginal_entropy,
    fou_marginal_law,
    fou_matrix_exponential,
    fou_rate_limit,
    fou_system_covariance,
    fou_variance,
    fou_xi_eta,
    gaussian_entropy,
    gaussian_wasserstein2,
    hierarchy_AB,
    hierarchy_closed_form,
    hierarchy_moment_bound,
    hierarchy_table,
    hierarchy_tail_bound,
    mean_field_fou_covariance,
)
from fbm_volterra.exceptions import ConfigError, EntropyEstimationError, SingularMatrixError
from fbm_volterra.gaussian_paths import GaussianLaw
from fbm_volterra.kernels import TimeGrid
from fbm_volterra.models import constant_drift
from fbm_volterra.sde_sim import DriftSpec
from fbm_volterra.experiments import constant_drift_entropy_oracle
from fbm_volterra.transforms import q_energy_of_constant


@pytest.fixture
def fou():
    return FouParams(0.7, 1.0, 0.5)


def nan_on_first_path(t, x):
    values = np.zeros((x.shape[0], x.shape[2]))
    values[0] = np.nan
    return values


class TestEntropyEstimation:

    def test_brownian_constant_drift(self, grid_16, seed):
        """Test H = c^2 T / 2 with zero standard error at h = 1/2"""
        est = entropy_between_laws(constant_drift(2.0), DriftSpec.zero(), 0.5, grid_16, 10, seed)

        assert est.estimate == pytest.approx(2.0, rel=1e-12)
        assert est.std_error == 0.0
        assert est.n_used == 10
        assert est.n_excluded == 0

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_fbm_constant_drift(self, h, seed):
        """Test the constant-drift entropy against the closed-form energy of Q^1"""
        grid = TimeGrid(1.0, 64)
        est = entropy_between_laws(constant_drift(1.0), DriftSpec.zero(), h, grid, 4, seed)

        assert est.estimate == pytest.approx(0.5 * float(q_energy_of_constant(h, 1.0)), rel=1e-5)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_fbm_constant_drift_within_oracle_allowance(self, h, seed):
        """Test the estimate against the Gaussian grid oracle, allowing twice its change from n/2 to n"""
        grid = TimeGrid(1.0, 128)
        est = entropy_between_laws(constant_drift(1.0), DriftSpec.zero(), h, grid, 4, seed)
        oracle = constant_drift_entropy_oracle(h, 1.0, grid)
        allowance = 2.0 * abs(oracle - constant_drift_entropy_oracle(h, 1.0, TimeGrid(1.0, 64)))

        assert abs(est.estimate - oracle) <= 3.0 * est.std_error + allowance

    def test_initial_entropy_is_added(self, grid_16, seed):
        """Test the H_0 offset"""
        est = entropy_between_laws(constant_drift(1.0), DriftSpec.zero(), 0.5, grid_16, 4, seed,
                                   initial_entropy=0.25)

        assert est.estimate == pytest.approx(0.75)

    def test_same_drift_zero_entropy(self, grid_16, seed):
        """Test H[P | P] = 0"""
        drift = constant_drift(1.0)

        assert entropy_between_laws(drift, drift, 0.7, grid_16, 5, seed).estimate == 0.0

    def test_excludes_non_finite_samples(self, grid_16, seed, caplog):
        """Test that a few non-finite samples are dropped and counted"""
        est = entropy_between_laws(DriftSpec.zero(), DriftSpec.single(nan_on_first_path), 0.5, grid_16, 200, seed)

        assert est.n_used == 199
        assert est.n_excluded == 1
        assert "Excluded 1 samples" in caplog.text

    def test_too_many_excluded(self, grid_16, seed):
        """Test that exceeding the exclusion limit aborts"""
        with pytest.raises(EntropyEstimationError, match="non-finite"):
            entropy_between_laws(DriftSpec.zero(), DriftSpec.single(nan_on_first_path), 0.5, grid_16, 50, seed)

    def test_sample_count(self, grid_16):
        """Test the minimum sample count"""
        with pytest.raises(ConfigError, match="samples"):
            entropy_between_laws(DriftSpec.zero(), DriftSpec.zero(), 0.5, grid_16, 1)


class TestGaussianDistances:

    def test_entropy_closed_form(self):
        """Test H[N(0, 1) | N(1, 2)] = log(2) / 2"""
        assert gaussian_entropy(GaussianLaw([0.0], [[1.0]]), GaussianLaw([1.0], [[2.0]])) == \
            pytest.approx(0.5 * np.log(2.0))

    def test_entropy_of_equal_laws(self):
        """Test H[mu | mu] = 0"""
        law = GaussianLaw(np.ones(2), [[2.0, 0.5], [0.5, 1.0]])

        assert gaussian_entropy(law, law) == pytest.approx(0.0, abs=1e-12)

    def test_entropy_degenerate_cases(self):
        """Test singular reference and degenerate first law"""
        with pytest.raises(SingularMatrixError):
            gaussian_entropy(GaussianLaw(np.zeros(2), np.eye(2)), GaussianLaw(np.zeros(2), np.zeros((2, 2))))

        assert gaussian_entropy(GaussianLaw(np.zeros(2), np.zeros((2, 2))),
                                GaussianLaw(np.zeros(2), np.eye(2))) == float("inf")

    def test_size_mismatch(self):
        """Test that laws must have the same size"""
        with pytest.raises(ValueError, match="different sizes"):
            gaussian_entropy(GaussianLaw(np.zeros(1), [[1.0]]), GaussianLaw(np.zeros(2), np.eye(2)))

        with pytest.raises(ValueError, match="different sizes"):
            gaussian_wasserstein2(GaussianLaw(np.zeros(1), [[1.0]]), GaussianLaw(np.zeros(2), np.eye(2)))

    def test_wasserstein_one_dimensional(self):
        """Test W2^2 = (m1 - m2)^2 + (s1 - s2)^2"""
        w2 = gaussian_wasserstein2(GaussianLaw([0.0], [[1.0]]), GaussianLaw([1.0], [[4.0]]), squared=True)

        assert w2 == pytest.approx(2.0)

    def test_wasserstein_non_commuting(self):
        """Test the Bures formula on non-commuting covariances"""
        a = GaussianLaw(np.zeros(2), [[2.0, 1.0], [1.0, 2.0]])
        b = GaussianLaw(np.array([1.0, 0.0]), np.diag([1.0, 3.0]))

        assert gaussian_wasserstein2(a, b) == pytest.approx(gaussian_wasserstein2(b, a), rel=1e-8)
        assert gaussian_wasserstein2(a, b, squared=True) >= 1.0
        assert gaussian_wasserstein2(a, a) == pytest.approx(0.0, abs=1e-6)


class TestFractionalOU:

    def test_parameter_validation(self):
        """Test the h > 1/2 and a + b != 0 requirements"""
        with pytest.raises(ConfigError, match="hurst"):
            FouParams(0.4, 1.0, 0.5)

        with pytest.raises(ConfigError, match="fou_b"):
            FouParams(0.7, 1.0, -1.0)

    def test_variance_without_mean_reversion(self):
        """Test that rate 0 gives the fBm variance t^(2H)"""
        assert fou_variance(0.7, 0.0, 2.0) == pytest.approx(2.0 ** 1.4, rel=1e-9)
        assert fou_variance(0.7, 1.0, 0.0) == 0.0

    def test_variance_decreases_with_rate(self):
        """Test that stronger mean reversion lowers the variance"""
        values = [fou_variance(0.7, rate, 1.0) for rate in (0.0, 0.5, 1.0, 2.0)]

        assert all(a > b for a, b in zip(values, values[1:]))

    def test_matrix_exponential_methods_agree(self, fou):
        """Test the closed-form exponential against scipy's expm"""
        closed = fou_matrix_exponential(fou, 5, 0.7)
        numeric = fou_matrix_exponential(fou, 5, 0.7, method="expm")

        assert np.allclose(closed, numeric, atol=1e-12)
        with pytest.raises(ValueError, match="Unknown method"):
            fou_matrix_exponential(fou, 5, 0.7, method="pade")

    def test_system_covariance_eigenvalues(self, fou):
        """Test that the covariance has eigenvalue eta along (1..1) and xi elsewhere"""
        xi, eta = fou_xi_eta(fou, 1.0)
        law = fou_system_covariance(fou, 4, 1.0)

        assert np.allclose(np.sort(np.linalg.eigvalsh(law.cov)), np.sort([xi, xi, xi, eta]))

    def test_marginal_law_validation(self, fou):
        """Test the 1 <= k <= n requirement"""
        with pytest.raises(ConfigError, match="'k'"):
            fou_marginal_law(fou, 3, 4, 1.0)

    def test_marginal_entropy_closed_form(self, fou):
        """Test (x - log(1 + x)) / 2 against the Gaussian relative entropy"""
        marginal, product = fou_marginal_law(fou, 20, 3, 1.0)

        assert fou_marginal_entropy(fou, 20, 3, 1.0) == pytest.approx(gaussian_entropy(marginal, product), rel=1e-8)

    def test_contrast_sign(self, fou):
        """Test that positive b contracts the mean direction"""
        assert fou_contrast(fou, 1.0) < 0.0

    def test_rate_limit(self, fou):
        """Test n^2/k^2 W2^2 against its limit xi c^2 / 4"""
        table = fou_rate_limit(fou, 2, 1.0, [50, 100, 200, 400, 800])

        assert list(table.columns) == ["n", "k", "t", "w2_scaled", "limit", "ratio", "gaussian_entropy"]
        assert 0.95 <= table["ratio"].iloc[-1] <= 1.05
        gaps = (table["ratio"] - 1.0).abs().to_numpy()
        assert np.all(np.diff(gaps) < 0)


class TestHierarchy:

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_recursion_matches_closed_form(self, k):
        """Test the level recursion against the negative binomial closed form"""
        table = hierarchy_table(0.5, k, 16, 1.0)
        a, b = hierarchy_closed_form(0.5, k, table["l"].to_numpy(), 1.0)

        assert np.allclose(table["A"], a, atol=1e-4)
        assert np.allclose(table["B"], b, atol=1e-4)

    def test_probabilities_add_up(self):
        """Test sum_l B_k^l + A_k^L = 1"""
        levels = np.arange(2, 31)
        a, b = hierarchy_closed_form(0.7, 2, levels, 1.0)

        assert b.sum() + a[-1] == pytest.approx(1.0, rel=1e-12)

    def test_time_zero(self):
        """Test the initial condition"""
        table = hierarchy_table(1.0, 2, 5, 0.0)

        assert np.all(table["A"] == 0.0)
        assert list(table["B"]) == [1.0, 0.0, 0.0, 0.0]

    def test_single_level(self):
        """Test hierarchy_AB at the top level"""
        a, b = hierarchy_AB(0.5, 3, 3, 1.0)

        assert a == pytest.approx(1.0 - np.exp(-1.5))
        assert b == pytest.approx(np.exp(-1.5))

    def test_validation(self):
        """Test argument checks"""
        with pytest.raises(ConfigError, match="'t'"):
            hierarchy_table(1.0, 1, 3, -1.0)

        with pytest.raises(ConfigError, match="'l'"):
            hierarchy_AB(1.0, 3, 2, 1.0)

        with pytest.raises(ConfigError, match="gamma"):
            hierarchy_table(0.0, 1, 3, 1.0)

    def test_tail_bound(self):
        """Test A_k^l(t) <= exp(-2(l+1)(e^{-gamma t} - k/(l+1))_+^2)"""
        levels = np.arange(1, 49)
        for t in (0.5, 1.0):
            a, _ = hierarchy_closed_form(0.5, 1, levels, t)
            assert np.all(a <= hierarchy_tail_bound(0.5, 1, levels, t) + 1e-12)

    def test_moment_bound(self):
        """Test sum_l l A_k^l(t) against the factorial moment bound"""
        levels = np.arange(2, 400)
        a, _ = hierarchy_closed_form(0.5, 2, levels, 1.0)

        assert np.sum(levels * a) <= hierarchy_moment_bound(0.5, 2, 1, 1.0)


class TestChaosBound:

    def test_input_validation(self):
        """Test hierarchy input checks"""
        with pytest.raises(ConfigError, match="'n'"):
            HierarchyInputs(1.0, 0.1, 0.0, 1.0, 2, 3)

        with pytest.raises(ConfigError, match="'M'"):
            HierarchyInputs(1.0, -0.1, 0.0, 1.0, 4, 2)

    def test_full_marginal(self):
        """Test that k = n returns the global entropy bound"""
        bound = chaos_bound(HierarchyInputs(1.0, 0.2, 0.5, 1.0, 4, 4))

        assert bound.value == pytest.approx(0.5 + 4 * 0.2 / 2)
        assert bound.levels.empty

    def test_level_terms(self):
        """Test the level table and the packaged constants"""
        bound = chaos_bound(HierarchyInputs(0.5, 0.1, 0.2, 1.0, 20, 2))

        assert list(bound.levels["l"]) == list(range(2, 20))
        total = bound.levels["initial_term"].sum() + bound.levels["drift_term"].sum() + bound.top_term
        assert bound.value == pytest.approx(total)
        assert bound.m_bar == pytest.approx(2.0 * bound.explicit_constant)
        assert bound.packaged_valid

    def test_fou_constants(self, fou):
        """Test gamma = 2M for the fOU instance"""
        M, gamma = fou_chaos_constants(fou, TimeGrid(1.0, 32))

        assert M > 0.0
        assert gamma == pytest.approx(2.0 * M)

    def test_mean_field_covariance(self, fou):
        """Test the Euler mean-field covariance"""
        cov = mean_field_fou_covariance(fou, TimeGrid(1.0, 16))

        assert cov.shape == (17, 17)
        assert np.allclose(cov, cov.T)
        assert np.all(cov[0] == 0.0)
        assert np.linalg.eigvalsh(cov).min() > -1e-12

    def test_rate_table_dominates_and_scales(self, fou):
        """Test that the bound dominates the marginal entropy and decays like n^-2"""
        table = chaos_rate_table(fou, 2, 1.0, [100, 200, 400], grid=TimeGrid(1.0, 64))

        assert np.all(table["chaos_bound"] >= table["gaussian_entropy"])
        slope = np.polyfit(np.log(table["n"]), np.log(table["chaos_bound"]), 1)[0]
        assert -2.2 <= slope <= -1.8
