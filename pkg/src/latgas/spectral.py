"""Exact spectral analysis of the exclusion process on small regions.

A canonical sector (region, disorder, rates, N) is enumerated in colex order of
occupied sites, so a configuration's index is its combinatorial rank. The
generator Q is stored sparse; the reversible measure pi makes
S = Pi^{1/2} Q Pi^{-1/2} symmetric and all eigen and linear solves use S.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, cg, eigsh
from scipy.special import logsumexp

from latgas.config import get_settings
from latgas.disorder import DisorderLaw, window_rng
from latgas.dynamics import RateFamily, current, exchange
from latgas.errors import NumericalError, ResourceCapError, ValidationFailure
from latgas.gibbs import PartitionTable, annealed_lambda, compressibility, sector_configurations
from latgas.lattice import open_box, region_bonds
from latgas.observables import local_block_pair, psi_from_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Region:
    """Sites of a finite region with their disorder, internal bonds and coordinates."""

    alpha: np.ndarray = field(repr=False)
    pairs: np.ndarray = field(repr=False)  # local site indices of each bond
    axes: np.ndarray = field(repr=False)
    coords: np.ndarray = field(repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.alpha)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @cached_property
    def lookup(self) -> dict[tuple, int]:
        return {tuple(int(c) for c in row): k for k, row in enumerate(self.coords)}

    @classmethod
    def from_box(cls, shape, alpha=None) -> "Region":
        """Open parallelepiped with sides ``shape``; no bond wraps around."""
        geometry, sites = open_box(shape)
        alpha = np.zeros(len(sites)) if alpha is None else np.asarray(alpha, dtype=float)
        if alpha.shape != (len(sites),):
            raise ValueError(f"disorder has shape {alpha.shape}, expected ({len(sites)},)")
        pairs, axes = region_bonds(geometry, sites)
        return cls(alpha, pairs, axes, geometry.coords(sites))

    @classmethod
    def segment(cls, alpha) -> "Region":
        alpha = np.asarray(alpha, dtype=float)
        return cls.from_box([len(alpha)], alpha)


@dataclass(frozen=True, eq=False)
class SectorOperator:
    """Generator of one canonical sector, its symmetrization and stationary weights."""

    region: Region
    family: RateFamily
    n_particles: int
    states: np.ndarray = field(repr=False)
    log_pi: np.ndarray = field(repr=False)
    generator: sparse.csr_matrix = field(repr=False)
    symmetric: sparse.csr_matrix = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.states)

    @cached_property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @cached_property
    def _binomials(self) -> np.ndarray:
        n = self.region.n_sites
        return np.array([[comb(x, c) for c in range(n + 1)] for x in range(n)], dtype=np.int64)

    def rank(self, configs: np.ndarray) -> np.ndarray:
        """Colex rank sum_x eta_x C(x, #particles on [0, x]) of each configuration."""
        configs = np.asarray(configs, dtype=np.int64)
        filled = np.cumsum(configs, axis=-1)
        sites = np.arange(self.region.n_sites)
        return np.sum(configs * self._binomials[sites, filled], axis=-1)

    def swapped(self, x: int, y: int) -> np.ndarray:
        """Index of eta^{x,y} for every state."""
        return self.rank(exchange(self.states, x, y))


def build_sector(region: Region, family: RateFamily, n_particles: int, check: bool = True) -> SectorOperator:
    """Enumerate the sector and assemble Q and S.

    Raises:
        ResourceCapError: If C(|region|, N) exceeds the sector cap.
        ValidationFailure: If row sums, reversibility or irreducibility fail.
    """
    settings = get_settings()
    n = region.n_sites
    if not 0 <= n_particles <= n:
        raise ValueError(f"particle count {n_particles} outside [0, {n}]")
    size = comb(n, n_particles)
    cap = settings.caps.canonical_sector_states
    if size > cap:
        raise ResourceCapError(f"sector C({n}, {n_particles}) = {size} exceeds cap {cap}")

    configs = sector_configurations(n, n_particles)
    probe = SectorOperator(region, family, n_particles, configs, np.zeros(size), None, None)
    order = np.argsort(probe.rank(configs))
    states = configs[order]
    log_w = states @ region.alpha
    log_pi = log_w - logsumexp(log_w)

    rows, cols, vals = [], [], []
    index = np.arange(size)
    for (x, y), axis in zip(region.pairs, region.axes):
        moved = states[:, x] != states[:, y]
        if not np.any(moved):
            continue
        source = index[moved]
        rate = family.rate(region.alpha[x], states[moved, x], region.alpha[y], states[moved, y], axis)
        rows.append(source)
        cols.append(probe.rank(exchange(states[moved], x, y)))
        vals.append(np.asarray(rate, dtype=float))
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)

    exit_rate = np.bincount(rows, weights=vals, minlength=size)
    diag = np.arange(size)
    generator = sparse.coo_matrix(
        (np.concatenate([vals, -exit_rate]), (np.concatenate([rows, diag]), np.concatenate([cols, diag]))),
        shape=(size, size),
    ).tocsr()
    half = 0.5 * (log_pi[rows] - log_pi[cols])
    symmetric = sparse.coo_matrix(
        (np.concatenate([vals * np.exp(half), -exit_rate]), (np.concatenate([rows, diag]), np.concatenate([cols, diag]))),
        shape=(size, size),
    ).tocsr()
    op = SectorOperator(region, family, n_particles, states, log_pi, generator, symmetric)
    if check:
        _check_sector(op, settings.tolerances.invariant)
    logger.debug(f"sector N={n_particles} on {n} sites: {size} states, {len(vals)} transitions")
    return op


def _check_sector(op: SectorOperator, tol: float) -> None:
    scale = max(float(np.max(np.abs(op.generator.diagonal()), initial=0.0)), 1.0)
    row_sum = float(np.max(np.abs(op.generator @ np.ones(op.size)), initial=0.0))
    if row_sum > tol * scale:
        raise ValidationFailure(f"generator row sums reach {row_sum:.3e}")
    asym = abs(op.symmetric - op.symmetric.T)
    asymmetry = float(asym.max()) if asym.nnz else 0.0
    if asymmetry > tol * scale:
        raise ValidationFailure(f"generator is not reversible: |S - S^T| = {asymmetry:.3e}")
    if op.size > 1:
        n_components, _ = csgraph.connected_components(op.generator, directed=False)
        if n_components != 1:
            raise ValidationFailure(f"sector N={op.n_particles} splits into {n_components} classes")


def symmetrized(op: SectorOperator) -> sparse.csr_matrix:
    return op.symmetric


def symmetrization_error(op: SectorOperator) -> float:
    """Largest gap between the sorted spectra of Q and S (dense, small sectors only)."""
    if op.size > 500:
        raise ResourceCapError(f"dense spectrum comparison limited to 500 states, sector has {op.size}")
    q = np.sort(np.linalg.eigvals(op.generator.toarray()).real)
    s = np.linalg.eigvalsh(op.symmetric.toarray())
    return float(np.max(np.abs(q - s)))


def _ground_vector(op: SectorOperator) -> np.ndarray:
    return np.exp(0.5 * op.log_pi)


def spectral_gap(op: SectorOperator) -> float:
    """Smallest nonzero eigenvalue of -Q; +inf for a one-state sector.

    Raises:
        NumericalError: If the iterative eigensolver does not converge.
    """
    if op.size <= 1:
        return float("inf")
    if op.size <= get_settings().caps.dense_eigen_states:
        eigenvalues = np.linalg.eigvalsh(-op.symmetric.toarray())
        return float(eigenvalues[1])
    # top eigenvalue of R + S - R phi phi^T is R - gap; phi is the constant mode of S
    radius = 2.0 * float(np.max(np.abs(op.symmetric.diagonal())))
    phi = _ground_vector(op)

    def matvec(v):
        v = np.ravel(v)
        return radius * v + op.symmetric @ v - radius * phi * (phi @ v)

    shifted = LinearOperator((op.size, op.size), matvec=matvec, dtype=float)
    try:
        top, vectors = eigsh(shifted, k=1, which="LA", tol=1e-12, maxiter=20 * op.size)
    except ArpackNoConvergence as exc:
        raise NumericalError(f"eigensolver did not converge on {op.size} states: {exc}") from exc
    residual = float(np.linalg.norm(matvec(vectors[:, 0]) - top[0] * vectors[:, 0]))
    logger.debug(f"iterative gap on {op.size} states, residual {residual:.2e}")
    return float(radius - top[0])


@dataclass
class SectorGaps:
    gaps: dict[int, float]

    @property
    def minimum(self) -> float:
        finite = [gap for gap in self.gaps.values() if np.isfinite(gap)]
        return min(finite) if finite else float("inf")


def sector_gaps(region: Region, family: RateFamily, sectors=None) -> SectorGaps:
    """Gaps of the requested sectors (default: all); trivial sectors report +inf."""
    sectors = range(region.n_sites + 1) if sectors is None else sectors
    gaps = {}
    for n_particles in sectors:
        if n_particles in (0, region.n_sites):
            gaps[int(n_particles)] = float("inf")
            continue
        gaps[int(n_particles)] = spectral_gap(build_sector(region, family, int(n_particles)))
    return SectorGaps(gaps)


# --- quadratic forms ------------------------------------------------------


def dirichlet_form(op: SectorOperator, f) -> float:
    """1/2 sum_{r != c} pi_r Q_rc (f_c - f_r)^2."""
    f = np.asarray(f, dtype=float)
    q = op.generator.tocoo()
    off = q.row != q.col
    r, c, rate = q.row[off], q.col[off], q.data[off]
    return float(0.5 * np.sum(op.pi[r] * rate * (f[c] - f[r]) ** 2))


def generator_form(op: SectorOperator, f) -> float:
    """<f, -Q f>_pi."""
    f = np.asarray(f, dtype=float)
    return float(-np.dot(op.pi * f, op.generator @ f))


def resolvent(op: SectorOperator, g, tol: float | None = None) -> np.ndarray:
    """h with -Q h = g and pi(h) = 0, for pi-centered g.

    Solved by conjugate gradients on -S + phi phi^T, which is positive definite
    and acts on sqrt(pi) g like -S on the centered subspace.

    Raises:
        ValueError: If g is not centered under pi.
        NumericalError: If CG stops above tolerance.
    """
    g = np.asarray(g, dtype=float)
    scale = float(np.max(np.abs(g), initial=0.0))
    if scale == 0.0:
        return np.zeros(op.size)
    mean = float(op.pi @ g)
    if abs(mean) > 1e-9 * scale:
        raise ValueError(f"right-hand side has pi-mean {mean:.3e}, expected 0")
    tol = get_settings().tolerances.cg if tol is None else tol
    phi = _ground_vector(op)
    rhs = phi * (g - mean)
    system = LinearOperator(
        (op.size, op.size), matvec=lambda v: -(op.symmetric @ np.ravel(v)) + phi * (phi @ np.ravel(v)), dtype=float
    )
    solution, info = cg(system, rhs, rtol=tol, atol=0.0, maxiter=10 * op.size + 100)
    if info != 0:
        residual = float(np.linalg.norm(system @ solution - rhs) / np.linalg.norm(rhs))
        raise NumericalError(f"CG stopped with relative residual {residual:.3e} > {tol:.1e} (info={info})")
    return solution / phi


def h_minus_one(op: SectorOperator, g, normalization: float = 1.0, f=None) -> float:
    """normalization * <f, (-Q)^{-1} g>_pi, with f = g by default."""
    h = resolvent(op, g)
    f = np.asarray(g if f is None else f, dtype=float)
    return float(normalization * np.dot(op.pi * f, h))


def variational_lower_bound(op: SectorOperator, g, h, normalization: float = 1.0) -> float:
    """normalization * (2 <g, h>_pi - D(h)); its sup over h is h_minus_one(op, g)."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    return float(normalization * (2.0 * np.dot(op.pi * g, h) - dirichlet_form(op, h)))


@dataclass
class PerturbationResult:
    """Top eigenvalue of L + beta V against its second-order bound."""

    lam: float
    bound: float | None
    hypothesis: float  # 2 beta ||V||_inf / gap; the bound needs it below 1
    gap: float
    variance: float
    passed: bool


def perturbed_supspec(op: SectorOperator, potential, beta: float) -> PerturbationResult:
    """sup spec(L + beta V) and beta^2 / (1 - 2 beta ||V|| / gap) * pi(V (-L)^{-1} V)."""
    v = np.asarray(potential, dtype=float)
    norm = float(np.max(np.abs(v), initial=0.0))
    if norm > 0 and abs(float(op.pi @ v)) > 1e-9 * norm:
        raise ValueError("potential must be centered under pi")
    tol = get_settings().tolerances.invariant
    perturbed = op.symmetric + beta * sparse.diags(v)
    if op.size <= get_settings().caps.dense_eigen_states:
        lam = float(np.linalg.eigvalsh(perturbed.toarray())[-1])
    else:
        try:
            lam = float(eigsh(perturbed, k=1, which="LA", tol=1e-12, return_eigenvectors=False)[0])
        except ArpackNoConvergence as exc:
            raise NumericalError(f"eigensolver did not converge on {op.size} states: {exc}") from exc
    gap = spectral_gap(op)
    variance = h_minus_one(op, v) if norm > 0 else 0.0
    hypothesis = 2.0 * beta * norm / gap if np.isfinite(gap) else 0.0
    scale = max(1.0, abs(lam))
    if hypothesis < 1.0:
        bound = beta**2 / (1.0 - hypothesis) * variance
        passed = -tol * scale <= lam <= bound + tol * scale
    else:
        logger.warning(f"perturbation hypothesis fails (2 beta ||V|| / gap = {hypothesis:.3f}); no bound")
        bound = None
        passed = lam >= -tol * scale
    return PerturbationResult(lam, bound, hypothesis, gap, variance, passed)


# --- translation sums and V_ell -------------------------------------------


@dataclass(frozen=True, eq=False)
class LocalFunction:
    """g(alpha_w, eta_w) on the window ``offsets``; ``fn`` takes (alpha_w, eta_rows)."""

    offsets: np.ndarray
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]


def translate_sum(op: SectorOperator, local: LocalFunction) -> tuple[np.ndarray, int]:
    """sum_x tau_x g over every translate whose window lies in the region."""
    region = op.region
    offsets = np.asarray(local.offsets, dtype=np.int64).reshape(-1, region.d)
    total = np.zeros(op.size)
    count = 0
    for base in region.coords - offsets[0]:
        window = [region.lookup.get(tuple(int(c) for c in base + offset)) for offset in offsets]
        if any(position is None for position in window):
            continue
        window = np.asarray(window, dtype=np.int64)
        total += np.asarray(local.fn(region.alpha[window], op.states[:, window]), dtype=float)
        count += 1
    return total, count


def v_ell(
    region: Region,
    family: RateFamily,
    lam: float,
    f_local: LocalFunction,
    g_local: LocalFunction,
    normalization: float,
) -> float:
    """V(F, G) = normalization * sum_N P_lam(N) <F, (-L)^{-1} G>_{nu_N} for translate sums F, G."""
    probs = PartitionTable(region.alpha).count_distribution(lam)
    total = 0.0
    for n_particles in range(1, region.n_sites):
        if probs[n_particles] < 1e-14:
            continue
        op = build_sector(region, family, n_particles)
        g, _ = translate_sum(op, g_local)
        if not np.any(g):
            continue
        f, _ = translate_sum(op, f_local)
        total += probs[n_particles] * h_minus_one(op, g, normalization, f)
    return float(total)


def current_function(family: RateFamily, axis: int, d: int) -> LocalFunction:
    """j_{0,e'} as a local function on the window {0, e'}."""
    offsets = np.zeros((2, d), dtype=np.int64)
    offsets[1, axis] = 1
    return LocalFunction(offsets, lambda alpha_w, rows: current(rows, alpha_w, family, 0, 1, axis))


def psi_function(d: int, n: int, axis: int, sign: int = 1) -> LocalFunction:
    """psi^e_{n,n} / n as a local function on its two blocks."""
    offsets, pair = local_block_pair(d, n, n, axis, sign)
    return LocalFunction(offsets, lambda alpha_w, rows: psi_from_window(alpha_w, rows, pair.weights)[0] / n)


@dataclass
class VjDiagnostic:
    """Disorder-averaged finite-volume V(j_{0,e'}, psi^e_{n,n}/n) and the limit it approaches."""

    ell: int
    n: int
    m: float
    axis: int
    current_axis: int
    values: list[float]
    chi: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stderr(self) -> float:
        return float(np.std(self.values, ddof=1) / np.sqrt(len(self.values))) if len(self.values) > 1 else 0.0

    @property
    def reference(self) -> float:
        """-chi(m) on the diagonal e = e', 0 off it."""
        return -self.chi if self.axis == self.current_axis else 0.0


def vj_diagnostic(
    law: DisorderLaw,
    family: RateFamily,
    ell: int,
    n: int,
    m: float,
    axis: int = 0,
    current_axis: int = 0,
    d: int = 1,
    samples: int = 4,
    seed: int = 0,
    sign: int = 1,
) -> VjDiagnostic:
    """V_ell(j_{0,e'}, psi^e_{n,n}/n) on the open box of side 2 ell + 1 at lambda_0(m)."""
    side = 2 * ell + 1
    if 2 * n > side:
        raise ValueError(f"two blocks of side {n} do not fit in a box of side {side}")
    lam = annealed_lambda(law, m)
    f_local = current_function(family, current_axis, d)
    g_local = psi_function(d, n, axis, sign)
    normalization = float(2 * ell) ** -d
    values = []
    for sample in range(samples):
        alpha = law.sample(window_rng(seed, ell, sample), side**d)
        region = Region.from_box([side] * d, alpha)
        values.append(v_ell(region, family, lam, f_local, g_local, normalization))
        logger.info(f"V_ell sample {sample}: {values[-1]:.6g}")
    return VjDiagnostic(ell, n, m, axis, current_axis, values, compressibility(law, m, lam))


# --- moving particles -------------------------------------------------------


def region_path(region: Region, x: int, y: int) -> list[tuple[int, int]]:
    """Bonds of a shortest path from x to y inside the region."""
    neighbors: dict[int, list[int]] = {k: [] for k in range(region.n_sites)}
    for a, b in region.pairs:
        neighbors[int(a)].append(int(b))
        neighbors[int(b)].append(int(a))
    parent = {x: x}
    queue = deque([x])
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if v not in parent:
                parent[v] = u
                queue.append(v)
    if y not in parent:
        raise ValueError(f"sites {x} and {y} are not connected in the region")
    path = []
    while y != x:
        path.append((parent[y], y))
        y = parent[y]
    return path[::-1]


def moving_particles_ratio(op: SectorOperator, x: int, y: int, path: list[tuple[int, int]], f) -> float:
    """nu((grad_{x,y} f)^2) / (|path| sum_{b in path} nu((grad_b f)^2))."""
    f = np.asarray(f, dtype=float)
    lhs = float(op.pi @ (f[op.swapped(x, y)] - f) ** 2)
    rhs = sum(float(op.pi @ (f[op.swapped(a, b)] - f) ** 2) for a, b in path) * len(path)
    if rhs == 0.0:
        return 0.0 if lhs == 0.0 else float("inf")
    return lhs / rhs


@dataclass
class MovingParticlesReport:
    worst: float
    bound: float
    pairs: int
    functions: int

    @property
    def passed(self) -> bool:
        return self.worst <= self.bound


def moving_particles_check(op: SectorOperator, rng: np.random.Generator, random_functions: int = 20, bound: float = 1.0) -> MovingParticlesReport:
    """Worst ratio over all site pairs, the state indicators and random functions.

    The reference constant is 4 c_hi / c_lo for rates bounded on [-bound, bound].
    """
    cap = get_settings().caps.dense_sector_states
    if op.size > cap:
        raise ResourceCapError(f"sector of {op.size} states exceeds cap {cap}")
    c_lo, c_hi = op.family.bounds(bound)
    functions = list(np.eye(op.size))
    functions += [rng.normal(size=op.size) for _ in range(random_functions)]
    worst, pairs = 0.0, 0
    for x in range(op.region.n_sites):
        for y in range(x + 1, op.region.n_sites):
            path = region_path(op.region, x, y)
            pairs += 1
            for f in functions:
                worst = max(worst, moving_particles_ratio(op, x, y, path, f))
    report = MovingParticlesReport(worst, 4.0 * c_hi / c_lo, pairs, len(functions))
    logger.info(f"moving particles: worst constant {worst:.4f} (reference {report.bound:.4f}) over {pairs} pairs")
    return report


# --- gap scaling ------------------------------------------------------------


@dataclass
class GapScalingReport:
    """Per-sector gaps of open boxes and the stability of min gap * ell^2."""

    rows: list[dict] = field(default_factory=list)

    def minimum_scaled(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for row in self.rows:
            out[row["ell"]] = min(out.get(row["ell"], float("inf")), row["gap_ell2"])
        return out

    @property
    def spread(self) -> float:
        values = list(self.minimum_scaled().values())
        return max(values) / min(values) if values and min(values) > 0 else float("inf")

    @property
    def exponent(self) -> float:
        """Slope of log min gap against log ell; -2 under diffusive scaling."""
        scaled = self.minimum_scaled()
        sizes = [ell for ell, value in scaled.items() if value > 0]
        if len(sizes) < 2:
            return float("nan")
        gaps = [scaled[ell] / ell**2 for ell in sizes]
        return float(np.polyfit(np.log(sizes), np.log(gaps), 1)[0])

    @property
    def passed(self) -> bool:
        values = list(self.minimum_scaled().values())
        return bool(values) and min(values) > 0 and self.spread < 4.0


def gap_scaling(
    law: DisorderLaw,
    family: RateFamily,
    sizes: list[int],
    d: int = 1,
    samples: int = 20,
    seed: int = 0,
    sectors: str = "all",
    threads: int = 1,
) -> GapScalingReport:
    """Gaps of cubes of side ell for independent disorder samples."""
    report = GapScalingReport()
    for ell in sizes:
        n_sites = ell**d
        if n_sites < 2:
            raise ValueError(f"boxes need at least 2 sites, got side {ell} in d={d}")
        chosen = range(1, n_sites) if sectors == "all" else [n_sites // 2]

        def one(sample: int) -> list[dict]:
            alpha = law.sample(window_rng(seed, ell, sample), n_sites)
            gaps = sector_gaps(Region.from_box([ell] * d, alpha), family, chosen)
            return [
                {"ell": ell, "sample": sample, "N": n_particles, "gap": gap, "gap_ell2": gap * ell**2}
                for n_particles, gap in gaps.gaps.items()
            ]

        if threads <= 1:
            batches = [one(sample) for sample in range(samples)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                batches = list(pool.map(one, range(samples)))
        for batch in batches:
            report.rows.extend(batch)
        logger.info(f"ell={ell}: min gap * ell^2 = {report.minimum_scaled()[ell]:.6g}")
    return report
