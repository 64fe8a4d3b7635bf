"""Unit tests for disorder laws and fields."""

import numpy as np
import pytest

from latgas.disorder import DisorderField, DisorderLaw, sample_field, window_rng
from latgas.lattice import make_torus


class TestDisorderLaw:
    """Test law validation, sampling and expectations."""

    def test_discrete_probabilities_must_sum_to_one(self):
        """Test a discrete law with mass 0.9 is rejected."""
        with pytest.raises(ValueError):
            DisorderLaw.discrete([-1.0, 1.0], [0.5, 0.4])

    def test_support_must_lie_in_bound(self):
        """Test values outside [-bound, bound] are rejected."""
        with pytest.raises(ValueError):
            DisorderLaw.discrete([-2.0, 1.0], [0.5, 0.5], bound=1.0)
        with pytest.raises(ValueError):
            DisorderLaw.constant(1.5)

    def test_constant_samples(self, rng):
        """Test a constant law samples its value everywhere."""
        values = DisorderLaw.constant(0.25).sample(rng, 100)

        assert np.all(values == 0.25)

    def test_uniform_samples_in_range(self, rng, uniform_law):
        """Test uniform samples lie in [-1, 1] with mean near 0."""
        values = uniform_law.sample(rng, 100_000)

        assert values.min() >= -1.0
        assert values.max() <= 1.0
        assert abs(values.mean()) < 0.01

    def test_discrete_frequencies(self, rng):
        """Test atom frequencies match the probabilities."""
        law = DisorderLaw.discrete([-1.0, 0.0, 1.0], [0.2, 0.3, 0.5])
        values = law.sample(rng, 100_000)

        assert np.mean(values == -1.0) == pytest.approx(0.2, abs=0.01)
        assert np.mean(values == 1.0) == pytest.approx(0.5, abs=0.01)

    def test_expectation_exact_for_atoms(self, two_point_law):
        """Test E[alpha^2] = 1 and E[alpha] = 0 for the +-1 law."""
        assert two_point_law.expectation(lambda a: a**2) == pytest.approx(1.0, abs=1e-15)
        assert two_point_law.expectation(lambda a: a) == pytest.approx(0.0, abs=1e-15)

    def test_expectation_by_quadrature(self, uniform_law):
        """Test E[alpha^2] = 1/3 for the uniform law."""
        assert uniform_law.expectation(lambda a: a**2) == pytest.approx(1.0 / 3.0, abs=1e-10)

    def test_binned_uniform(self, uniform_law):
        """Test quantile binning of the uniform law into 4 cells."""
        binned = uniform_law.binned(4)

        assert binned.values == pytest.approx((-0.75, -0.25, 0.25, 0.75))
        assert binned.probs == pytest.approx((0.25, 0.25, 0.25, 0.25))

    def test_binned_discrete_is_unchanged(self, two_point_law):
        """Test atomic laws are their own binning."""
        assert two_point_law.binned(7) is two_point_law

    def test_bin_index(self, uniform_law):
        """Test values fall in the right quantile cell."""
        letters = uniform_law.bin_index(np.array([-1.0, -0.4, 0.1, 1.0]), bins=4)

        assert letters.tolist() == [0, 1, 2, 3]

    def test_alphabet_size(self, constant_law, two_point_law, uniform_law):
        """Test alphabet sizes of the three kinds of law."""
        assert constant_law.alphabet_size() == 1
        assert two_point_law.alphabet_size() == 2
        assert uniform_law.alphabet_size(6) == 6

    def test_enumerate_patterns(self, two_point_law):
        """Test all 2^3 patterns are listed with probability 1/8."""
        patterns, probs = two_point_law.enumerate_patterns(3)

        assert patterns.shape == (8, 3)
        assert len({tuple(row) for row in patterns.tolist()}) == 8
        assert probs == pytest.approx(np.full(8, 0.125))


class TestDisorderField:
    """Test field sampling and IO."""

    def test_field_is_reproducible(self, two_point_law, square4):
        """Test identical (law, geometry, seed) gives identical values."""
        first = sample_field(two_point_law, square4, 42)
        second = sample_field(two_point_law, square4, 42)

        assert np.array_equal(first.values, second.values)

    def test_seeds_differ(self, uniform_law):
        """Test different seeds give different fields."""
        geometry = make_torus([64])

        assert not np.array_equal(
            sample_field(uniform_law, geometry, 1).values, sample_field(uniform_law, geometry, 2).values
        )

    def test_field_is_read_only(self, uniform_law, ring8):
        """Test field values cannot be modified in place."""
        disorder = sample_field(uniform_law, ring8, 0)

        with pytest.raises(ValueError):
            disorder.values[0] = 0.0

    def test_constant_field(self, constant_law, ring8):
        """Test a constant law gives a constant field."""
        assert sample_field(constant_law, ring8, 3).is_constant

    def test_restrict(self, uniform_law, ring8):
        """Test restriction picks the listed sites."""
        disorder = sample_field(uniform_law, ring8, 5)

        assert disorder.restrict([2, 5]).tolist() == [disorder.values[2], disorder.values[5]]

    def test_csv_preserves_values(self, tmp_path, uniform_law, square4):
        """Test values written with 17 digits read back bit-for-bit."""
        disorder = sample_field(uniform_law, square4, 9)
        disorder.to_csv(tmp_path / "field.csv")
        loaded = DisorderField.from_csv(tmp_path / "field.csv", square4, uniform_law, 9)

        assert np.array_equal(loaded.values, disorder.values)

    def test_json_keeps_law_and_geometry(self, two_point_law, square4):
        """Test the JSON form carries law, geometry and seed."""
        disorder = sample_field(two_point_law, square4, 11)
        loaded = DisorderField.from_json(disorder.to_json())

        assert loaded.geometry == square4
        assert loaded.law == two_point_law
        assert loaded.seed == 11
        assert np.array_equal(loaded.values, disorder.values)

    def test_window_streams_are_independent(self):
        """Test window streams depend on their index."""
        assert window_rng(0, 1).random() != window_rng(0, 2).random()
        assert window_rng(0, 1).random() == window_rng(0, 1).random()
