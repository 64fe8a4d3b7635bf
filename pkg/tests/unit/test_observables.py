"""Unit tests for block densities, the psi/phi split and long-jump observables."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latgas.disorder import DisorderLaw
from latgas.errors import ResourceCapError
from latgas.gibbs import GibbsSpec, enumerate_spec
from latgas.lattice import make_torus, paired_boxes
from latgas.observables import (
    block_density,
    block_pair,
    ibp_check,
    long_jump_pair,
    long_jump_W,
    phi_statistics,
    psi_phi,
    random_local_function,
    w_xy,
)


class TestBlockDensity:
    """Test block densities."""

    def test_empty_and_full(self, square4):
        """Test empty and full lattices give 0 and 1."""
        assert block_density(np.zeros(16), square4, 5, 1) == 0.0
        assert block_density(np.ones(16), square4, 5, 1) == 1.0

    def test_alternating_ring(self):
        """Test an alternating ring has density 3/5 on a box of side 5 centered on a particle."""
        geometry = make_torus([10])
        eta = np.tile([1, 0], 5)

        assert block_density(eta, geometry, 4, 2) == pytest.approx(3 / 5)


class TestPsiPhi:
    """Test the decomposition of block gradients."""

    def test_sum_is_block_difference(self, rng):
        """Test psi + phi equals m^2_n - m^1_n exactly."""
        geometry = make_torus([20])
        alpha = rng.uniform(-1, 1, 20)
        eta = rng.integers(0, 2, 20)
        split = psi_phi(eta, alpha, geometry, 10, 3, 5)
        first, second = paired_boxes(10, 3, 0, geometry)

        assert split.psi + split.phi == pytest.approx(split.difference, abs=1e-15)
        assert split.difference == pytest.approx(eta[second.sites].mean() - eta[first.sites].mean())

    def test_constant_disorder_phi_vanishes(self, rng):
        """Test phi is identically zero without disorder."""
        geometry = make_torus([20])
        eta = rng.integers(0, 2, 20)

        assert psi_phi(eta, np.zeros(20), geometry, 7, 3, 3).phi == 0.0

    def test_empty_blocks(self, rng):
        """Test no particles gives psi = phi = 0."""
        geometry = make_torus([12])
        split = psi_phi(np.zeros(12), rng.uniform(-1, 1, 12), geometry, 6, 3, 3)

        assert split.phi == pytest.approx(0.0, abs=1e-15)
        assert split.psi == pytest.approx(0.0, abs=1e-15)

    def test_phi_matches_enumeration(self, rng):
        """Test phi against a brute-force canonical average on the two blocks."""
        geometry = make_torus([12])
        alpha = rng.uniform(-1, 1, 12)
        eta = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1])
        split = psi_phi(eta, alpha, geometry, 6, 3, 3)
        pair = block_pair(geometry, 6, 3, 3, 0)
        configs, weights = enumerate_spec(GibbsSpec(alpha[pair.support], n_particles=split.count))

        assert split.phi == pytest.approx(weights @ (configs @ pair.weights), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), count=st.integers(0, 10))
    def test_psi_has_zero_canonical_mean(self, seed, count):
        """Test nu(psi) = 0 on the conditioning blocks for every particle number."""
        rng = np.random.default_rng(seed)
        geometry = make_torus([12])
        alpha = rng.uniform(-1, 1, 12)
        pair = block_pair(geometry, 6, 3, 5, 0)
        local = alpha[pair.support]
        configs, weights = enumerate_spec(GibbsSpec(local, n_particles=count))
        psis = []
        for config in configs:
            eta = np.zeros(12, dtype=np.int8)
            eta[pair.support] = config
            psis.append(psi_phi(eta, alpha, geometry, 6, 3, 5).psi)

        assert weights @ np.array(psis) == pytest.approx(0.0, abs=1e-12)

    def test_inner_blocks_must_fit(self, rng):
        """Test n > s is refused."""
        geometry = make_torus([20])

        with pytest.raises(ValueError):
            psi_phi(np.zeros(20), rng.uniform(-1, 1, 20), geometry, 10, 5, 3)

    def test_exact_mode_cap(self, monkeypatch, rng):
        """Test exact mode refuses supports above the cap."""
        monkeypatch.setenv("LATGAS_CAP_EXACT_CONDITIONAL_SITES", "4")
        geometry = make_torus([20])

        with pytest.raises(ResourceCapError):
            psi_phi(np.ones(20), rng.uniform(-1, 1, 20), geometry, 10, 3, 3)

    def test_sampled_mode(self, rng):
        """Test sampled phi is flagged and close to the exact value."""
        geometry = make_torus([20])
        alpha = rng.uniform(-1, 1, 20)
        eta = rng.integers(0, 2, 20)
        exact = psi_phi(eta, alpha, geometry, 10, 3, 3)
        sampled = psi_phi(eta, alpha, geometry, 10, 3, 3, mode="sampled", rng=rng, draws=20_000)

        assert sampled.approximate
        assert sampled.phi == pytest.approx(exact.phi, abs=0.02)


class TestPhiStatistics:
    """Test disorder moments of phi."""

    def test_constant_law(self, constant_law):
        """Test all moments vanish without disorder."""
        stats = phi_statistics(constant_law, 0.5, [1, 3], samples=5)

        assert all(row["mean_phi"] == 0.0 and row["mean_phi2"] == 0.0 for row in stats.rows)
        assert stats.slope is None

    def test_mean_consistent_with_zero(self, two_point_law):
        """Test E[phi] is within 3 standard errors of 0."""
        stats = phi_statistics(two_point_law, 0.5, [3], samples=400, seed=2)
        row = stats.rows[0]

        assert abs(row["mean_phi"]) <= 3 * row["mean_phi_stderr"] + 1e-12

    @pytest.mark.slow
    def test_second_moment_decays(self, two_point_law):
        """Test the log-log slope of E[phi^2] against n is at most -0.5 in d=1."""
        stats = phi_statistics(two_point_law, 0.5, [3, 5, 7, 9, 11], samples=2000, seed=1)

        assert stats.slope <= -0.5
        for row in stats.rows:
            assert abs(row["mean_phi"]) <= 3 * row["mean_phi_stderr"] + 1e-12


class TestLongJumps:
    """Test w_{x,y}, W_n and the integration by parts identity."""

    def test_w_without_disorder(self):
        """Test w = 2 (eta_y - eta_x) when alpha is constant."""
        eta = np.array([1, 0])
        alpha = np.zeros(2)

        assert w_xy(eta, alpha, 0, 1) == -2.0
        assert w_xy(eta, alpha, 1, 0) == 2.0

    def test_flat_profile(self, rng):
        """Test W vanishes when the two blocks are full."""
        geometry = make_torus([12])

        assert long_jump_W(np.ones(12), rng.uniform(-1, 1, 12), geometry, 6, 3) == 0.0

    def test_constant_disorder(self, rng):
        """Test W_n = 2 (m^2_n - m^1_n) without disorder."""
        geometry = make_torus([12])
        eta = rng.integers(0, 2, 12)
        first, second = paired_boxes(6, 3, 0, geometry)

        expected = 2 * (eta[second.sites].mean() - eta[first.sites].mean())
        assert long_jump_W(eta, np.zeros(12), geometry, 6, 3) == pytest.approx(expected)

    def test_double_loop(self, rng):
        """Test W against an explicit double average."""
        geometry = make_torus([12])
        alpha = rng.uniform(-1, 1, 12)
        eta = rng.integers(0, 2, 12)
        first, second = paired_boxes(6, 3, 0, geometry)
        total = 0.0
        for x in first.sites:
            for y in second.sites:
                total += (1 + np.exp(-(alpha[x] - alpha[y]) * (eta[x] - eta[y]))) * (eta[y] - eta[x])

        assert long_jump_W(eta, alpha, geometry, 6, 3) == pytest.approx(total / 9)

    def test_pair_columns(self, rng, two_point_law):
        """Test the exploratory pair carries both terms."""
        geometry = make_torus([12])
        row = long_jump_pair(rng.integers(0, 2, 12), rng.choice([-1.0, 1.0], 12), geometry, 6, 3, two_point_law, 0.5)

        assert set(row) == {"n", "w_over_n", "psi_term"}

    def test_ibp_constant_function(self, rng):
        """Test both sides vanish for g = 1."""
        result = ibp_check(rng.uniform(-1, 1, 6), 3, 0, 4, lambda eta: np.ones(len(eta)))

        assert result.lhs == pytest.approx(0.0, abs=1e-14)
        assert result.rhs == pytest.approx(0.0, abs=1e-14)

    def test_ibp_same_site(self, rng):
        """Test x = y gives zero on both sides."""
        result = ibp_check(rng.uniform(-1, 1, 6), 3, 2, 2, lambda eta: eta[:, 0])

        assert result.lhs == 0.0
        assert result.rhs == 0.0

    def test_ibp_occupation(self, rng):
        """Test the identity for g = eta_x."""
        assert ibp_check(rng.uniform(-1, 1, 6), 3, 1, 5, lambda eta: eta[:, 1]).residual <= 1e-12

    @settings(max_examples=1000, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        count=st.integers(0, 6),
        x=st.integers(0, 5),
        y=st.integers(0, 5),
    )
    def test_ibp_random_functions(self, seed, count, x, y):
        """Test nu(w g) = nu((eta_x - eta_y) grad g) for random local functions."""
        rng = np.random.default_rng(seed)
        alpha = DisorderLaw.uniform(1.0).sample(rng, 6)
        g = random_local_function(rng.choice(6, size=3, replace=False), rng)

        assert ibp_check(alpha, count, x, y, g).residual <= 1e-12
