"""Unit tests for chemical potentials, partition tables and canonical sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from latgas.errors import ResourceCapError
from latgas.gibbs import (
    GibbsSpec,
    PartitionTable,
    annealed_lambda,
    build_thermo_table,
    compressibility,
    empirical_lambda,
    ensemble_gap,
    enumerate_spec,
    exact_expectation,
    occupation_prob,
    sample,
    sector_configurations,
    thermo_check,
    variance_ratio,
)

DENSITIES = [k / 20 for k in range(1, 20)]


class TestChemicalPotential:
    """Test empirical and annealed chemical potentials."""

    def test_constant_law_is_logit(self, constant_law):
        """Test lambda_0(m) = log(m / (1 - m)) without disorder."""
        for m in (0.1, 0.5, 0.8):
            assert annealed_lambda(constant_law, m) == pytest.approx(logit(m), abs=1e-10)

    def test_half_filling_symmetric_law(self, two_point_law):
        """Test lambda_0(1/2) = 0 for a symmetric law."""
        assert annealed_lambda(two_point_law, 0.5) == pytest.approx(0.0, abs=1e-10)

    def test_annealed_mean(self, uniform_law):
        """Test E[p(alpha, lambda_0)] = m for the uniform law."""
        lam = annealed_lambda(uniform_law, 0.3)

        assert uniform_law.expectation(lambda a: occupation_prob(a, lam)) == pytest.approx(0.3, abs=1e-10)

    def test_empirical_mean(self, rng):
        """Test sum_x p_x = m |region|."""
        alpha = rng.uniform(-1, 1, 50)
        lam = empirical_lambda(alpha, 0.37)

        assert occupation_prob(alpha, lam).sum() == pytest.approx(0.37 * 50, abs=1e-8)

    def test_density_outside_interval(self, two_point_law):
        """Test m = 0 and m = 1 are refused."""
        with pytest.raises(ValueError):
            annealed_lambda(two_point_law, 0.0)
        with pytest.raises(ValueError):
            empirical_lambda(np.zeros(3), 1.0)

    def test_constant_compressibility(self, constant_law):
        """Test chi(m) = m (1 - m) without disorder."""
        assert compressibility(constant_law, 0.3) == pytest.approx(0.21, abs=1e-12)

    @pytest.mark.parametrize("law_name", ["constant_law", "two_point_law", "uniform_law"])
    def test_thermodynamic_relation(self, law_name, request):
        """Test d lambda_0/dm * chi = 1 on the 19-point grid."""
        law = request.getfixturevalue(law_name)
        if law.kind == "uniform_continuous":
            law = law.binned(5)

        for m in DENSITIES:
            assert thermo_check(law, m) < 1e-6

    def test_thermo_table(self, two_point_law):
        """Test the table is increasing in lambda and passes its check."""
        table = build_thermo_table(two_point_law, DENSITIES)

        assert np.all(np.diff(table.lam) > 0)
        assert np.max(table.check) < 1e-6
        assert not table.clamped.any()
        assert table.rows()[0]["m"] == pytest.approx(0.05)

    def test_thermo_table_unsorted_grid(self, two_point_law):
        """Test a grid out of order is refused as invalid input."""
        with pytest.raises(ValueError):
            build_thermo_table(two_point_law, [0.5, 0.2, 0.8])


class TestPartitionTable:
    """Test partition values, marginals and canonical sampling."""

    def test_log_z_matches_enumeration(self, rng):
        """Test Z(N) against a sum over the sector."""
        alpha = rng.uniform(-1, 1, 7)
        table = PartitionTable(alpha)
        configs = sector_configurations(7, 3)

        assert table.log_z(3) == pytest.approx(np.log(np.exp(configs @ alpha).sum()), abs=1e-12)

    def test_marginals_match_enumeration(self, rng):
        """Test canonical marginals against enumerated weights."""
        alpha = rng.uniform(-1, 1, 8)
        configs, weights = enumerate_spec(GibbsSpec(alpha, n_particles=4))

        assert PartitionTable(alpha).canonical_marginals(4) == pytest.approx(weights @ configs, abs=1e-12)

    def test_marginals_sum_to_count(self, rng):
        """Test sum_i P(eta_i = 1 | N) = N for every N."""
        table = PartitionTable(rng.uniform(-1, 1, 9)).marginal_table()

        assert table.sum(axis=1) == pytest.approx(np.arange(10), abs=1e-10)

    def test_count_distribution(self, rng):
        """Test the Poisson-binomial law sums to one with mean sum p_x."""
        alpha = rng.uniform(-1, 1, 12)
        probs = PartitionTable(alpha).count_distribution(0.2)

        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert probs @ np.arange(13) == pytest.approx(occupation_prob(alpha, 0.2).sum(), abs=1e-10)

    def test_support_law(self, rng):
        """Test the joint law of two sites against enumeration."""
        alpha = rng.uniform(-1, 1, 6)
        configs, weights = enumerate_spec(GibbsSpec(alpha, n_particles=3))
        patterns, probs = PartitionTable(alpha).support_law([1, 4], 3)

        for pattern, p in zip(patterns, probs):
            match = np.all(configs[:, [1, 4]] == pattern, axis=1)
            assert p == pytest.approx(weights[match].sum(), abs=1e-12)

    def test_sampler_total_variation(self):
        """Test 10^5 canonical draws are within 0.02 total variation of the exact law."""
        rng = np.random.default_rng(7)
        alpha = rng.uniform(-1, 1, 8)
        configs, weights = enumerate_spec(GibbsSpec(alpha, n_particles=3))
        draws = PartitionTable(alpha).sample_canonical(3, rng, 100_000)
        powers = 1 << np.arange(8)
        observed = np.bincount(draws.astype(np.int64) @ powers, minlength=256) / len(draws)
        exact = np.zeros(256)
        exact[configs.astype(np.int64) @ powers] = weights

        assert 0.5 * np.abs(observed - exact).sum() <= 0.02
        assert np.all(draws.sum(axis=1) == 3)

    def test_sampler_extreme_counts(self, rng):
        """Test N = 0 and N = |region| give the empty and full configurations."""
        table = PartitionTable(rng.uniform(-1, 1, 5))

        assert table.sample_canonical(0, rng).tolist() == [0] * 5
        assert table.sample_canonical(5, rng).tolist() == [1] * 5

    def test_count_out_of_range(self):
        """Test N > |region| is refused."""
        with pytest.raises(ValueError):
            PartitionTable(np.zeros(3)).sample_canonical(4, np.random.default_rng())


class TestGibbsSpec:
    """Test specifications, enumeration and sampling."""

    def test_needs_exactly_one_parameter(self):
        """Test lam and n_particles are mutually exclusive."""
        with pytest.raises(ValueError):
            GibbsSpec(np.zeros(3))
        with pytest.raises(ValueError):
            GibbsSpec(np.zeros(3), lam=0.0, n_particles=1)

    def test_grand_enumeration_sums_to_one(self, rng):
        """Test 2^n weights sum to one."""
        _, weights = enumerate_spec(GibbsSpec(rng.uniform(-1, 1, 6), lam=-0.4))

        assert weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_exact_expectation_of_occupation(self, rng):
        """Test mu(eta_0) = p_0."""
        alpha = rng.uniform(-1, 1, 5)
        value = exact_expectation(GibbsSpec(alpha, lam=0.1), lambda eta: eta[..., 0])

        assert value == pytest.approx(occupation_prob(alpha[0], 0.1), abs=1e-12)

    def test_enumeration_cap(self, monkeypatch):
        """Test regions over the cap raise ResourceCapError."""
        monkeypatch.setenv("LATGAS_CAP_GRAND_ENUMERATION_SITES", "4")

        with pytest.raises(ResourceCapError):
            enumerate_spec(GibbsSpec(np.zeros(5), lam=0.0))

    def test_grand_sampling_density(self, rng):
        """Test grand canonical draws have mean density m at the empirical lambda."""
        alpha = rng.uniform(-1, 1, 400)
        draws = sample(GibbsSpec(alpha, lam=empirical_lambda(alpha, 0.6)), rng, 200)

        assert draws.mean() == pytest.approx(0.6, abs=0.01)

    def test_sector_configurations(self):
        """Test C(5, 2) configurations with two particles each."""
        configs = sector_configurations(5, 2)

        assert configs.shape == (10, 5)
        assert np.all(configs.sum(axis=1) == 2)


class TestEquivalenceOfEnsembles:
    """Test canonical against grand canonical expectations."""

    def test_gap_shrinks_with_region(self):
        """Test |nu(eta_0) - mu(eta_0)| decays like 1/|region| for one periodic disorder pattern."""
        pattern = np.array([-1.0, 1.0, 0.5, -0.25])
        sizes = [8, 12, 16, 20, 24]
        gaps = []
        for n in sizes:
            alpha = np.tile(pattern, n // len(pattern))
            gaps.append(abs(ensemble_gap(alpha, [np.arange(n)], [n // 2], lambda eta: eta[..., 0], [0])))
        slope = np.polyfit(np.log(sizes), np.log(gaps), 1)[0]

        assert all(gap > 0 for gap in gaps)
        assert -1.3 <= slope <= -0.7

    def test_variance_ratio_below_one(self, rng):
        """Test conditioning on N reduces the variance of the total occupation of a half."""
        alpha = rng.uniform(-1, 1, 10)
        ratio = variance_ratio(alpha, 5, lambda eta: eta[..., :5].sum(axis=-1))

        assert 0.0 < ratio < 1.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), count=st.integers(0, 6))
    def test_canonical_weights_normalized(self, seed, count):
        """Test every sector's weights sum to one."""
        alpha = np.random.default_rng(seed).uniform(-1, 1, 6)
        _, weights = enumerate_spec(GibbsSpec(alpha, n_particles=count))

        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
