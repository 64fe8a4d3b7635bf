"""Macroscopic equation d_t m = div(D(m) grad m) and its comparison with particles.

The solver is a conservative finite-volume scheme on the unit torus: the flux
through each face uses D averaged over the two adjacent cells, so the mean of
the profile changes only by roundoff.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.ndimage import uniform_filter

from latgas.config import HydroConfig
from latgas.disorder import sample_field
from latgas.errors import ValidationFailure
from latgas.greenkubo import DiffusionTable, tabulate_D
from latgas.kmc import DynState, TrajectoryStats, run_ensemble
from latgas.lattice import TorusGeometry, make_torus

logger = logging.getLogger(__name__)

CFL_SAFETY = 0.9


class CFLError(ValueError):
    """Time step above h^2 / (2 d max D)."""


@dataclass
class DensityProfile:
    """Values of a density on a regular periodic grid at one time."""

    values: np.ndarray = field(repr=False)
    time: float = 0.0

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def mass(self) -> float:
        return float(np.mean(self.values))


@dataclass
class HydroSolution:
    profiles: list[DensityProfile]
    dt: float
    h: float
    scheme: str
    steps: int = 0
    clamped: int = 0

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.profiles])

    def at(self, time: float) -> DensityProfile:
        return self.profiles[int(np.argmin(np.abs(self.times - time)))]


def grid_coordinates(resolution: int, d: int) -> list[np.ndarray]:
    """theta_i = i / resolution along each axis, as broadcastable open grids."""
    axis = np.arange(resolution) / resolution
    return list(np.meshgrid(*([axis] * d), indexing="ij", sparse=True))


def cosine_profile(resolution: int, d: int, mean: float, amplitude: float, mode: int = 1) -> np.ndarray:
    """mean + amplitude cos(2 pi mode theta_0) on the grid."""
    theta = grid_coordinates(resolution, d)
    return np.broadcast_to(mean + amplitude * np.cos(2 * np.pi * mode * theta[0]), (resolution,) * d).copy()


def _divergence(m: np.ndarray, diffusion: DiffusionTable, h: float) -> np.ndarray:
    coefficients = diffusion.diagonal(m)
    out = np.zeros_like(m)
    for axis in range(m.ndim):
        cell = coefficients[..., axis]
        face = 0.5 * (cell + np.roll(cell, -1, axis=axis))
        flux = face * (np.roll(m, -1, axis=axis) - m) / h
        out += (flux - np.roll(flux, 1, axis=axis)) / h
    return out


def stable_dt(m0: np.ndarray, diffusion: DiffusionTable, h: float) -> float:
    """The largest step allowed by h^2 / (2 d max D) on the range of ``m0``."""
    probe = np.linspace(float(m0.min()), float(m0.max()), 101)
    d_max = float(np.max(diffusion.diagonal(probe)))
    return h**2 / (2 * m0.ndim * d_max)


def solve_pde(
    m0: np.ndarray,
    diffusion: DiffusionTable,
    horizon: float,
    dt: float | None = None,
    scheme: str = "euler",
    record_times: list[float] | None = None,
    record_every: int | None = None,
) -> HydroSolution:
    """Integrate from ``m0`` to ``horizon``.

    Profiles are kept at ``record_times`` (hit exactly by shortening the step
    before each) and, if ``record_every`` is set, after every that many steps.

    Raises:
        CFLError: If ``dt`` exceeds the stability limit.
    """
    m = np.array(m0, dtype=float)
    if m.ndim != diffusion.d:
        raise ValueError(f"profile has {m.ndim} axes, diffusion table is {diffusion.d}-dimensional")
    if scheme not in ("euler", "heun"):
        raise ValueError(f"unknown scheme {scheme!r}")
    h = 1.0 / m.shape[0]
    limit = stable_dt(m, diffusion, h)
    if dt is None:
        dt = CFL_SAFETY * limit
    elif dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3e} exceeds the stability limit {limit:.3e}")
    stops = sorted({float(t) for t in record_times or [] if 0.0 <= t <= horizon} | {float(horizon)})
    solution = HydroSolution([], dt, h, scheme)
    if 0.0 in stops or record_every:
        solution.profiles.append(DensityProfile(m.copy(), 0.0))
    clamped_before = diffusion.clamped
    t = 0.0
    for stop in stops:
        while t < stop - 1e-15:
            step = min(dt, stop - t)
            if scheme == "euler":
                m = m + step * _divergence(m, diffusion, h)
            else:
                predictor = m + step * _divergence(m, diffusion, h)
                m = m + 0.5 * step * (_divergence(m, diffusion, h) + _divergence(predictor, diffusion, h))
            outside = (m < 0.0) | (m > 1.0)
            if np.any(outside):
                solution.clamped += int(np.count_nonzero(outside))
                m = np.clip(m, 0.0, 1.0)
            t = t + step if stop - (t + step) > 1e-15 else stop
            solution.steps += 1
            if record_every and solution.steps % record_every == 0 and t < stop:
                solution.profiles.append(DensityProfile(m.copy(), t))
        if stop > 0.0 or not solution.profiles:
            solution.profiles.append(DensityProfile(m.copy(), stop))
    table_clamps = diffusion.clamped - clamped_before
    if solution.clamped or table_clamps:
        logger.warning(
            f"densities clamped {solution.clamped} times into [0, 1]; "
            f"{table_clamps} lookups fell outside the D table"
        )
    return solution


# --- weak formulation -----------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """A smooth H(t, theta) with its time derivative and second space derivatives."""

    __test__ = False

    value: Callable[[float, list[np.ndarray]], np.ndarray]
    time_derivative: Callable[[float, list[np.ndarray]], np.ndarray]
    laplacian_terms: Callable[[float, list[np.ndarray], int], np.ndarray]

    @classmethod
    def constant(cls, c: float = 1.0) -> "TestFunction":
        return cls(lambda t, x: np.full(np.broadcast(*x).shape, c), lambda t, x: 0.0, lambda t, x, a: 0.0)

    @classmethod
    def cosine(cls, mode: int = 1, axis: int = 0, growth: float = 0.0) -> "TestFunction":
        """cos(2 pi mode theta_axis) (1 + growth t)."""
        k = 2 * np.pi * mode

        def value(t, x):
            return np.cos(k * x[axis]) * (1 + growth * t)

        def time_derivative(t, x):
            return np.cos(k * x[axis]) * growth

        def second(t, x, a):
            return -(k**2) * np.cos(k * x[axis]) * (1 + growth * t) if a == axis else 0.0

        return cls(value, time_derivative, second)


def weak_residual(solution: HydroSolution, test: TestFunction, diffusion: DiffusionTable) -> float:
    """int m_T H_T - int m_0 H_0 - int_0^T int (m d_t H + sum_e A_e(m) d_e^2 H).

    A_e is the antiderivative of D_ee; space integrals are grid means and the
    time integral is the trapezoid rule over the recorded profiles.
    """
    first, last = solution.profiles[0], solution.profiles[-1]
    x = grid_coordinates(first.resolution, first.d)
    boundary = np.mean(last.values * test.value(last.time, x)) - np.mean(first.values * test.value(first.time, x))
    integrand = []
    for profile in solution.profiles:
        m = profile.values
        total = m * test.time_derivative(profile.time, x)
        for axis in range(first.d):
            total = total + diffusion.antiderivative(m, axis) * test.laplacian_terms(profile.time, x, axis)
        integrand.append(float(np.mean(total)))
    return float(boundary - integrate.trapezoid(integrand, solution.times))


# --- particles --------------------------------------------------------------


def empirical_profile(eta: np.ndarray, geometry: TorusGeometry, ell: int, time: float = 0.0) -> DensityProfile:
    """Average occupation over the cube of side 2 ell + 1 around every site."""
    if 2 * ell + 1 > min(geometry.dims):
        raise ValueError(f"block of side {2 * ell + 1} does not fit in torus {list(geometry.dims)}")
    grid = np.asarray(eta, dtype=float).reshape(geometry.dims)
    return DensityProfile(uniform_filter(grid, size=2 * ell + 1, mode="wrap"), time)


def coarse_grain(values: np.ndarray, blocks: int) -> np.ndarray:
    """Means over ``blocks`` equal cells per axis."""
    side = values.shape[0]
    if side % blocks:
        raise ValueError(f"grid of side {side} does not split into {blocks} cells")
    factor = side // blocks
    shape = []
    for _ in range(values.ndim):
        shape += [blocks, factor]
    return values.reshape(shape).mean(axis=tuple(range(1, 2 * values.ndim, 2)))


def empirical_pairing(eta: np.ndarray, geometry: TorusGeometry, test: TestFunction, profile: DensityProfile) -> tuple[float, float]:
    """(Av_x H(eps x) eta_x, int H m) at the profile's time."""
    particles = np.asarray(eta, dtype=float).reshape(geometry.dims)
    x_particles = grid_coordinates(geometry.dims[0], geometry.d)
    x_grid = grid_coordinates(profile.resolution, profile.d)
    return (
        float(np.mean(particles * test.value(profile.time, x_particles))),
        float(np.mean(profile.values * test.value(profile.time, x_grid))),
    )


def energy_estimate(
    snapshots: list[tuple[float, np.ndarray]],
    geometry: TorusGeometry,
    a_sites: int,
    b_sites: int,
    axis: int = 0,
) -> float:
    """Time integral of Av_x [(m_{x + b e, a} - m_{x, a}) / b]^2 with a, b in macroscopic units."""
    if b_sites < 1 or a_sites < 0:
        raise ValueError("block radius must be >= 0 and shift >= 1")
    epsilon = 1.0 / geometry.dims[0]
    values = []
    for time, eta in snapshots:
        blocks = empirical_profile(eta, geometry, a_sites, time).values
        gradient = (np.roll(blocks, -b_sites, axis=axis) - blocks) / (b_sites * epsilon)
        values.append(float(np.mean(gradient**2)))
    if len(values) == 1:
        return 0.0
    return float(integrate.trapezoid(values, [time for time, _ in snapshots]))


@dataclass
class HydroReport:
    """Distances between particle and PDE profiles at each checkpoint."""

    rows: list[dict] = field(default_factory=list)
    energy: list[dict] = field(default_factory=list)
    pde_clamped: int = 0
    table_clamped: int = 0
    exploratory: bool = False


def load_diffusion(config: HydroConfig, m0: np.ndarray) -> DiffusionTable:
    """D from a CSV table, an embedded estimation run, or a constant."""
    if config.diffusion_table is not None:
        return DiffusionTable.from_csv(Path(config.diffusion_table))
    if config.diffusion is not None:
        low = max(0.05, float(m0.min()) - 0.05)
        high = min(0.95, float(m0.max()) + 0.05)
        table, _ = tabulate_D(np.linspace(low, high, 5), config.diffusion)
        return table
    return DiffusionTable.constant(config.diffusion_constant if config.diffusion_constant is not None else 1.0, config.d)


def compare_hydro(config: HydroConfig, diffusion: DiffusionTable | None = None) -> HydroReport:
    """Run particles from a product initial state and compare block profiles with the PDE."""
    d, side = config.d, config.side
    geometry = make_torus([side] * d)
    if side % config.block:
        raise ValueError(f"side {side} is not a multiple of the block {config.block}")
    n_blocks = side // config.block
    resolution = config.resolution or side
    m0_sites = cosine_profile(side, d, config.mean, config.amplitude, config.mode)
    m0_grid = cosine_profile(resolution, d, config.mean, config.amplitude, config.mode)
    diffusion = diffusion or load_diffusion(config, m0_grid)
    checkpoints = sorted(set(config.checkpoints) | {config.horizon})
    solution = solve_pde(m0_grid, diffusion, config.horizon, scheme=config.scheme, record_times=checkpoints)

    family = config.rates.build()
    alpha = sample_field(config.law, geometry, config.seed).values
    flat_m0 = m0_sites.ravel()

    def make_state(rng: np.random.Generator) -> DynState:
        eta = (rng.random(geometry.n_sites) < flat_m0).astype(np.int8)
        return DynState(geometry, alpha, family, eta, epsilon=1.0 / side)

    runs: list[TrajectoryStats] = run_ensemble(
        make_state,
        config.horizon,
        config.ensemble,
        config.seed,
        config.threads,
        observers={"mass": lambda eta: float(np.mean(eta))},
        observe_times=checkpoints,
        keep_snapshots=True,
    )
    report = HydroReport(
        pde_clamped=solution.clamped,
        table_clamped=diffusion.clamped,
        exploratory=not bool(np.all(alpha == alpha[0])),
    )
    noise_floor = 3.0 / np.sqrt(config.block**d * config.ensemble)
    for t in checkpoints:
        coarse = [
            coarse_grain(eta.reshape(geometry.dims).astype(float), n_blocks)
            for run in runs
            for time, eta in run.snapshots
            if time == t
        ]
        mean_profile = np.mean(coarse, axis=0)
        target = coarse_grain(solution.at(t).values, n_blocks)
        diff = mean_profile - target
        masses = [value for run in runs for time, name, value in run.rows if name == "mass" and time == t]
        row = {
            "t": t,
            "L1": float(np.mean(np.abs(diff))),
            "L2": float(np.sqrt(np.mean(diff**2))),
            "sup": float(np.max(np.abs(diff))),
            "single_L1": float(np.mean(np.abs(coarse[0] - target))),
            "noise_floor": float(noise_floor),
            "pde_mass": solution.at(t).mass,
            "particle_mass": float(np.mean(masses)),
        }
        report.rows.append(row)
        logger.info(f"t={t:.4g}: L1={row['L1']:.4e} L2={row['L2']:.4e} sup={row['sup']:.4e} (floor {noise_floor:.3e})")
    for run in runs:
        if abs(int(run.n_particles) - int(run.snapshots[-1][1].sum())) != 0:
            raise ValidationFailure("particle number changed during a trajectory")
    for a_sites, b_sites in zip(config.energy_blocks[::2], config.energy_blocks[1::2]):
        values = [energy_estimate(run.snapshots, geometry, a_sites, b_sites) for run in runs]
        report.energy.append({"a": a_sites, "b": b_sites, "value": float(np.mean(values))})
    return report
