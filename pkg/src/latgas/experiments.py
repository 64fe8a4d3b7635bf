"""Subcommand implementations.

Each ``cmd_*`` function takes its validated experiment document and a
:class:`~latgas.results.ResultStore`, writes its tables there and returns a
:class:`CommandResult`. Only rate validation and the thermodynamic check can
fail a run; the other commands report their acceptance checks in the summary.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from latgas.config import (
    DiffusionConfig,
    ExperimentConfig,
    FluctuationsConfig,
    GapScalingConfig,
    HydroConfig,
    SampleConfig,
    SpectralH1Config,
    ThermoConfig,
    ValidateRatesConfig,
    get_settings,
)
from latgas.disorder import sample_field, window_rng
from latgas.gibbs import GibbsSpec, annealed_lambda, empirical_lambda, sample
from latgas.greenkubo import tabulate_D
from latgas.hydro import compare_hydro
from latgas.observables import phi_statistics
from latgas.results import THERMO_COLUMNS, ResultStore, cached_thermo_table, write_snapshots
from latgas.spectral import Region, build_sector, gap_scaling, perturbed_supspec, vj_diagnostic

logger = logging.getLogger(__name__)


@dataclass
class CommandResult:
    """Outcome of one subcommand."""

    command: str
    passed: bool
    message: str
    summary: dict = field(default_factory=dict)


def _banner(title: str, config: ExperimentConfig) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)
    logger.info(f"Seed: {config.seed}")
    logger.info(f"Threads: {config.threads}")
    logger.info(f"Output: {config.out}")
    logger.info("=" * 60)


def cmd_validate_rates(config: ValidateRatesConfig, store: ResultStore) -> CommandResult:
    """Grid check of symmetry, positivity and detailed balance for one rate family."""
    _banner("Rate validation", config)
    family = config.rates.build(validate=False)
    report = family.validate(bound=config.bound, grid=config.grid, tol=config.tolerance)
    store.write_rows("violations.csv", ({"violation": v} for v in report.violations), ["violation"])
    summary = {
        "kind": report.kind,
        "points": report.points,
        "symmetry_error": report.symmetry_error,
        "detailed_balance_error": report.detailed_balance_error,
        "c_lo": report.c_lo,
        "c_hi": report.c_hi,
        "violations": len(report.violations),
    }
    if report.passed:
        logger.info(report.message)
    else:
        logger.error(report.message)
    return CommandResult("validate-rates", report.passed, report.message, summary)


def cmd_thermo(config: ThermoConfig, store: ResultStore) -> CommandResult:
    """lambda_0(m), chi(m) and |d lambda_0/dm * chi - 1| on the density grid."""
    _banner("Thermodynamic tables", config)
    law = config.law.binned(config.bins) if config.bins else config.law
    table = cached_thermo_table(law, config.densities, get_settings().runtime.cache)
    store.write_rows("thermo.csv", table.rows(), THERMO_COLUMNS)
    worst = float(np.max(table.check))
    passed = worst <= config.tolerance
    message = f"max |lambda_0' chi - 1| = {worst:.3e} on {len(table.m)} densities (tolerance {config.tolerance:.1e})"
    if table.clamped.any():
        logger.warning(f"{int(table.clamped.sum())} densities were clamped away from 0 and 1")
    return CommandResult("thermo", passed, message, {"max_relation_error": worst, "clamped": int(table.clamped.sum())})


def cmd_gap_scaling(config: GapScalingConfig, store: ResultStore) -> CommandResult:
    """Sector gaps of open boxes and the spread of min gap * ell^2 across sizes."""
    _banner(f"Gap scaling (d={config.d}, sizes {config.sizes})", config)
    report = gap_scaling(
        config.law, config.rates.build(), config.sizes, config.d, config.samples, config.seed, config.sectors, config.threads
    )
    store.write_rows("gaps.csv", report.rows, ["ell", "sample", "N", "gap", "gap_ell2"])
    scaled = report.minimum_scaled()
    store.write_rows("gap_summary.csv", ({"ell": ell, "min_gap_ell2": value} for ell, value in scaled.items()), ["ell", "min_gap_ell2"])
    message = (
        f"min gap * ell^2 over sizes: {min(scaled.values()):.6g}, max/min ratio {report.spread:.4g}, "
        f"fitted exponent {report.exponent:.3f}"
    )
    if not report.passed:
        logger.error(f"gap scaling outside the expected band: {message}")
    return CommandResult(
        "gap-scaling",
        report.passed,
        message,
        {"spread": report.spread, "exponent": report.exponent, "min_gap_ell2": min(scaled.values())},
    )


def _monotone(estimates) -> bool:
    by_density: dict[float, list] = {}
    for estimate in estimates:
        by_density.setdefault(estimate.m, []).append(estimate)
    for chain in by_density.values():
        traces = [float(np.trace(e.D)) for e in chain]
        if any(later > earlier + 1e-8 for earlier, later in zip(traces, traces[1:])):
            return False
    return True


def cmd_diffusion(config: DiffusionConfig, store: ResultStore) -> CommandResult:
    """Truncated variational estimates of D(m) and their interpolated table."""
    _banner(f"Diffusion matrix (d={config.d}, support {config.support} R={config.radius})", config)
    table, estimates = tabulate_D(config.densities, config)
    store.write_rows("diffusion.csv", (e.row() for e in estimates))
    infima = [
        {"m": e.m, "support": e.support, "direction": key, "infimum": value, "g0_value": e.g0_values[key]}
        for e in estimates
        for key, value in e.infimum.items()
    ]
    store.write_rows("infima.csv", infima, ["m", "support", "direction", "infimum", "g0_value"])
    table.to_csv(store.path("diffusion_table.csv"))
    store.register("diffusion_table.csv")
    monotone = _monotone(estimates)
    if not monotone:
        logger.warning("D is not monotone non-increasing along the support chain")
    message = f"D tabulated on {len(table.m)} densities, continuity modulus {table.continuity_modulus:.4g}"
    return CommandResult(
        "diffusion",
        True,
        message,
        {"continuity_modulus": table.continuity_modulus, "monotone": monotone, "formal": estimates[-1].formal},
    )


def cmd_hydro(config: HydroConfig, store: ResultStore) -> CommandResult:
    """Particle block profiles against the PDE solution at each checkpoint."""
    _banner(f"Hydrodynamic comparison (d={config.d}, side {config.side}, T={config.horizon})", config)
    report = compare_hydro(config)
    store.write_rows("hydro.csv", report.rows)
    store.write_rows("energy.csv", report.energy, ["a", "b", "value"])
    worst = max(row["L1"] for row in report.rows)
    message = f"worst ensemble L1 distance {worst:.4e} over {len(report.rows)} checkpoints"
    if report.exploratory:
        logger.info("disordered run: distances are exploratory")
    return CommandResult(
        "hydro",
        True,
        message,
        {
            "worst_L1": worst,
            "pde_clamped": report.pde_clamped,
            "table_clamped": report.table_clamped,
            "exploratory": report.exploratory,
        },
    )


def cmd_fluctuations(config: FluctuationsConfig, store: ResultStore) -> CommandResult:
    """Disorder moments of phi_{n,s} and the log-log slope of E[phi^2] against n."""
    _banner(f"Disorder fluctuations (d={config.d}, sizes {config.sizes})", config)
    stats = phi_statistics(
        config.law, config.density, config.sizes, config.s, config.d, config.samples, config.seed, config.mode, config.draws
    )
    store.write_rows("phi.csv", stats.rows)
    slope = "n/a" if stats.slope is None else f"{stats.slope:.4f}"
    return CommandResult("fluctuations", True, f"slope of E[phi^2] against n: {slope}", {"slope": stats.slope})


def cmd_sample(config: SampleConfig, store: ResultStore) -> CommandResult:
    """Draw a disorder field and Gibbs configurations on it."""
    _banner(f"Gibbs sampling ({config.ensemble}, dims {config.geometry.dims})", config)
    geometry = config.geometry.build()
    disorder = sample_field(config.law, geometry, config.seed)
    disorder.to_csv(store.path("disorder.csv"))
    store.register("disorder.csv")
    if config.ensemble == "canonical":
        spec = GibbsSpec(disorder.values, n_particles=int(round(config.density * geometry.n_sites)))
    elif config.chemical_potential == "empirical":
        spec = GibbsSpec(disorder.values, lam=empirical_lambda(disorder.values, config.density))
    else:
        spec = GibbsSpec(disorder.values, lam=annealed_lambda(config.law, config.density))
    draws = np.atleast_2d(sample(spec, window_rng(config.seed, 1), config.draws))
    write_snapshots(
        store.path("samples.snap"),
        geometry,
        [(float(k), eta) for k, eta in enumerate(draws)],
        {"ensemble": config.ensemble, "lam": spec.lam, "n_particles": spec.n_particles},
    )
    store.register("samples.snap")
    density = float(draws.mean())
    return CommandResult("sample", True, f"{len(draws)} draws, mean density {density:.4f}", {"mean_density": density})


def cmd_spectral_h1(config: SpectralH1Config, store: ResultStore) -> CommandResult:
    """V_ell(j, psi/n) over disorder samples and the perturbation bound on one sector."""
    _banner(f"Variance of currents (d={config.d}, ell={config.ell}, n={config.n})", config)
    family = config.rates.build()
    diagnostic = vj_diagnostic(
        config.law, family, config.ell, config.n, config.density,
        config.axis, config.current_axis, config.d, config.samples, config.seed,
    )
    store.write_rows(
        "vj.csv",
        ({"sample": k, "ell": config.ell, "n": config.n, "value": v} for k, v in enumerate(diagnostic.values)),
        ["sample", "ell", "n", "value"],
    )

    side = 2 * config.ell + 1
    alpha = config.law.sample(window_rng(config.seed, config.ell, 0), side**config.d)
    region = Region.from_box([side] * config.d, alpha)
    op = build_sector(region, family, max(1, min(region.n_sites - 1, int(round(config.density * region.n_sites)))))
    occupation = op.states[:, 0].astype(float)
    potential = occupation - float(op.pi @ occupation)
    rows = []
    for beta in config.betas:
        result = perturbed_supspec(op, potential, beta)
        rows.append(
            {
                "beta": beta,
                "lam": result.lam,
                "bound": result.bound,
                "hypothesis": result.hypothesis,
                "variance": result.variance,
                "ratio": result.lam / beta**2,
                "passed": result.passed,
            }
        )
    store.write_rows("perturbation.csv", rows, ["beta", "lam", "bound", "hypothesis", "variance", "ratio", "passed"])
    bounds_hold = all(row["passed"] for row in rows)
    if not bounds_hold:
        logger.warning("perturbation bound violated on at least one beta")
    message = f"V = {diagnostic.mean:.6g} +- {diagnostic.stderr:.2g} (reference {diagnostic.reference:.6g})"
    return CommandResult(
        "spectral-h1",
        True,
        message,
        {"mean": diagnostic.mean, "stderr": diagnostic.stderr, "reference": diagnostic.reference, "bounds_hold": bounds_hold},
    )


COMMANDS: dict[str, Callable[[ExperimentConfig, ResultStore], CommandResult]] = {
    "validate-rates": cmd_validate_rates,
    "thermo": cmd_thermo,
    "gap-scaling": cmd_gap_scaling,
    "diffusion": cmd_diffusion,
    "hydro": cmd_hydro,
    "fluctuations": cmd_fluctuations,
    "sample": cmd_sample,
    "spectral-h1": cmd_spectral_h1,
}


def run_command(command: str, config: ExperimentConfig) -> CommandResult:
    """Run one subcommand into ``config.out`` and write its manifest."""
    store = ResultStore(config.out, command)
    result = COMMANDS[command](config, store)
    store.write_manifest(config, {"passed": result.passed, "message": result.message, **result.summary})
    return result
