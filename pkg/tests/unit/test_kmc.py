"""Unit tests for the kinetic Monte Carlo runner."""

import numpy as np
import pytest

from latgas.dynamics import RateFamily
from latgas.gibbs import PartitionTable
from latgas.kmc import DynState, kmc_run, run_ensemble
from latgas.lattice import make_torus


def half_filled(geometry, rng):
    eta = np.zeros(geometry.n_sites, dtype=np.int8)
    eta[rng.permutation(geometry.n_sites)[: geometry.n_sites // 2]] = 1
    return eta


class TestDynState:
    """Test state construction and the rate tree."""

    def test_shape_mismatch(self, ring8, metropolis):
        """Test a configuration of the wrong size is refused."""
        with pytest.raises(ValueError):
            DynState(ring8, np.zeros(8), metropolis, np.zeros(7, dtype=np.int8))

    def test_root_matches_active_bonds(self, square4, metropolis, rng):
        """Test the tree root equals the sum of active bond rates."""
        alpha = rng.uniform(-1, 1, 16)
        state = DynState(square4, alpha, metropolis, half_filled(square4, rng), epsilon=1.0)

        assert state.total_rate == pytest.approx(state.recomputed_rates().sum(), rel=1e-14)
        assert state.rate_drift() <= 1e-12

    def test_default_epsilon(self, ring8, metropolis):
        """Test epsilon defaults to one over the first side."""
        state = DynState(ring8, np.zeros(8), metropolis, np.zeros(8, dtype=np.int8))

        assert state.epsilon == pytest.approx(1 / 8)


class TestKmcRun:
    """Test trajectories."""

    def test_conserves_particles_and_rates(self, metropolis, rng):
        """Test N is conserved and stored rates stay coherent after many events."""
        geometry = make_torus([32, 32])
        alpha = rng.uniform(-1, 1, geometry.n_sites)
        state = DynState(geometry, alpha, metropolis, half_filled(geometry, rng), epsilon=1.0)
        stats = kmc_run(state, 20.0, rng)

        assert stats.n_events > 10_000
        assert int(state.eta.sum()) == geometry.n_sites // 2
        assert state.rate_drift() <= 1e-12

    def test_debug_checks(self, monkeypatch, ring8, metropolis, rng):
        """Test the per-chunk conservation check passes on a valid run."""
        monkeypatch.setenv("LATGAS_DEBUG", "true")
        state = DynState(ring8, rng.uniform(-1, 1, 8), metropolis, half_filled(ring8, rng), epsilon=1.0)

        assert kmc_run(state, 5.0, rng, chunk=64).n_particles == 4

    @pytest.mark.parametrize("fill", [0, 1])
    def test_frozen_configurations(self, ring8, metropolis, rng, fill):
        """Test empty and full lattices have no events."""
        state = DynState(ring8, np.zeros(8), metropolis, np.full(8, fill, dtype=np.int8), epsilon=1.0)
        stats = kmc_run(state, 3.0, rng)

        assert stats.n_events == 0
        assert state.time == pytest.approx(3.0)

    def test_negative_horizon(self, ring8, metropolis, rng):
        """Test a negative horizon is refused."""
        state = DynState(ring8, np.zeros(8), metropolis, np.zeros(8, dtype=np.int8))

        with pytest.raises(ValueError):
            kmc_run(state, -1.0, rng)

    def test_observers_and_snapshots(self, ring8, metropolis, rng):
        """Test observers fire at the requested times and snapshots are copies."""
        state = DynState(ring8, np.zeros(8), metropolis, half_filled(ring8, rng), epsilon=1.0)
        stats = kmc_run(
            state,
            1.0,
            rng,
            observers={"density": lambda eta: float(eta.mean())},
            observe_times=[0.0, 0.5, 1.0],
            keep_snapshots=True,
        )

        assert [t for t, _, _ in stats.rows] == [0.0, 0.5, 1.0]
        assert all(value == 0.5 for _, _, value in stats.rows)
        assert len(stats.snapshots) == 3
        assert stats.snapshots[-1][1] is not state.eta

    def test_single_particle_mean_square_displacement(self):
        """Test E[X_T^2] = 2T for one particle with unit rates."""
        geometry = make_torus([20])
        family = RateFamily.builtin("metropolis")

        def make_state(rng):
            eta = np.zeros(20, dtype=np.int8)
            eta[0] = 1
            return DynState(geometry, np.zeros(20), family, eta)

        runs = run_ensemble(make_state, 0.1, 2000, seed=3)
        msd = np.mean([run.displacement[0] ** 2 for run in runs])

        assert abs(msd - 0.2) < 0.03


class TestEnsembles:
    """Test reproducibility and stationarity of ensembles."""

    def make_factory(self, geometry, alpha, family):
        def make_state(rng):
            return DynState(geometry, alpha, family, half_filled(geometry, rng), epsilon=1.0)

        return make_state

    def test_same_seed_same_result(self, ring8, metropolis):
        """Test two runs with one seed give identical fluxes."""
        factory = self.make_factory(ring8, np.linspace(-1, 1, 8), metropolis)
        first = run_ensemble(factory, 2.0, 8, seed=11)
        second = run_ensemble(factory, 2.0, 8, seed=11)

        assert [run.flux.tolist() for run in first] == [run.flux.tolist() for run in second]

    def test_threads_do_not_change_results(self, ring8, metropolis):
        """Test the output does not depend on the thread count."""
        factory = self.make_factory(ring8, np.linspace(-1, 1, 8), metropolis)
        serial = run_ensemble(factory, 2.0, 8, seed=5, threads=1)
        parallel = run_ensemble(factory, 2.0, 8, seed=5, threads=4)

        assert [run.n_events for run in serial] == [run.n_events for run in parallel]
        assert [run.flux.tolist() for run in serial] == [run.flux.tolist() for run in parallel]

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_canonical_measure_is_stationary(self, seed):
        """Test marginals at T=1 from canonical starts match the exact canonical marginals."""
        geometry = make_torus([8])
        alpha = np.random.default_rng(seed).uniform(-1, 1, 8)
        family = RateFamily.builtin("metropolis")
        table = PartitionTable(alpha)
        exact = table.canonical_marginals(4)

        def make_state(rng):
            return DynState(geometry, alpha, family, table.sample_canonical(4, rng), epsilon=1.0)

        runs = run_ensemble(
            make_state, 1.0, 10_000, seed=seed, keep_snapshots=True, observe_times=[1.0]
        )
        final = np.array([run.snapshots[-1][1] for run in runs], dtype=float)
        stderr = np.sqrt(exact * (1 - exact) / len(runs))

        assert np.all(np.abs(final.mean(axis=0) - exact) <= 3 * stderr)
