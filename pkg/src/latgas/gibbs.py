"""Grand canonical and canonical Gibbs measures of the disordered gas.

Configurations are int8 arrays whose last axis runs over the sites of a region;
the disorder restricted to the region is a float array of the same length.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.special import expit, logit, logsumexp

from latgas.config import get_settings
from latgas.disorder import DisorderLaw
from latgas.errors import NumericalError, ResourceCapError

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-6


def occupation_prob(alpha, lam):
    """p = e^{alpha+lam} / (1 + e^{alpha+lam}), stable for large |alpha+lam|."""
    return expit(np.asarray(alpha, dtype=float) + lam)


def _check_density(m: float) -> tuple[float, bool]:
    if not 0.0 < m < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {m}")
    clamped = float(np.clip(m, DENSITY_FLOOR, 1.0 - DENSITY_FLOOR))
    if clamped != m:
        logger.warning(f"density {m:.3g} clamped to {clamped:.3g}")
    return clamped, clamped != m


def _solve_monotone(mean: Callable[[float], float], slope: Callable[[float], float], target: float, lo: float, hi: float, tol: float) -> float:
    lam = optimize.brentq(lambda x: mean(x) - target, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    for _ in range(3):
        gap = mean(lam) - target
        derivative = slope(lam)
        if derivative <= 0 or gap == 0:
            break
        lam -= gap / derivative
    residual = abs(mean(lam) - target)
    if residual > tol:
        raise NumericalError(f"chemical potential residual {residual:.3e} exceeds {tol:.1e}")
    return float(lam)


def empirical_lambda(alpha, m: float, tol: float | None = None) -> float:
    """lambda with sum_x p_x(lambda) = m |region|.

    Raises:
        ValueError: If m is outside (0, 1).
    """
    alpha = np.asarray(alpha, dtype=float)
    m, _ = _check_density(m)
    tol = get_settings().tolerances.root if tol is None else tol
    spread = float(np.max(np.abs(alpha))) + 1.0 if alpha.size else 1.0
    center = float(logit(m))
    return _solve_monotone(
        lambda lam: float(occupation_prob(alpha, lam).sum()),
        lambda lam: float((occupation_prob(alpha, lam) * (1 - occupation_prob(alpha, lam))).sum()),
        m * alpha.size,
        center - spread,
        center + spread,
        tol * alpha.size,
    )


def annealed_lambda(law: DisorderLaw, m: float, tol: float | None = None) -> float:
    """lambda_0(m): E[p(alpha, lambda_0)] = m."""
    m, _ = _check_density(m)
    settings = get_settings().tolerances
    tol = settings.root if tol is None else tol
    spread = law.bound + 1.0
    center = float(logit(m))
    quad = settings.quadrature
    return _solve_monotone(
        lambda lam: law.expectation(lambda a: occupation_prob(a, lam), quad),
        lambda lam: law.expectation(lambda a: occupation_prob(a, lam) * (1 - occupation_prob(a, lam)), quad),
        m,
        center - spread,
        center + spread,
        tol,
    )


def compressibility(law: DisorderLaw, m: float, lam: float | None = None) -> float:
    """chi(m) = E[p (1 - p)] at lambda_0(m)."""
    lam = annealed_lambda(law, m) if lam is None else lam
    tol = get_settings().tolerances.quadrature
    return law.expectation(lambda a: occupation_prob(a, lam) * (1 - occupation_prob(a, lam)), tol)


def thermo_check(law: DisorderLaw, m: float, step: float | None = None) -> float:
    """|d lambda_0/dm * chi(m) - 1| from a five-point centered difference."""
    h = step if step is not None else 0.01 * min(m, 1 - m)
    lams = [annealed_lambda(law, m + k * h) for k in (-2, -1, 1, 2)]
    derivative = (lams[0] - 8 * lams[1] + 8 * lams[2] - lams[3]) / (12 * h)
    return abs(derivative * compressibility(law, m) - 1.0)


@dataclass
class ThermoTable:
    """lambda_0 and chi on a density grid, with the thermodynamic check."""

    law: DisorderLaw
    m: np.ndarray
    lam: np.ndarray
    chi: np.ndarray
    check: np.ndarray
    clamped: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {"m": m, "lambda0": lam, "chi": chi, "relation_error": err, "clamped": int(c)}
            for m, lam, chi, err, c in zip(self.m, self.lam, self.chi, self.check, self.clamped)
        ]


def build_thermo_table(law: DisorderLaw, densities) -> ThermoTable:
    m = np.asarray(densities, dtype=float)
    if np.any(np.diff(m) <= 0):
        raise ValueError("density grid must be strictly increasing")
    clamped = np.array([_check_density(x)[1] for x in m])
    lam = np.array([annealed_lambda(law, x) for x in m])
    chi = np.array([compressibility(law, x, l) for x, l in zip(m, lam)])
    check = np.array([thermo_check(law, x) for x in m])
    if np.any(np.diff(lam) <= 0):
        raise NumericalError("annealed chemical potential is not increasing on the grid")
    return ThermoTable(law, m, lam, chi, check, clamped)


# --- partition values -----------------------------------------------------


def _log_esp(alpha: np.ndarray) -> np.ndarray:
    """table[k, c] = log of the weight of c particles on the first k sites."""
    n = len(alpha)
    table = np.full((n + 1, n + 1), -np.inf)
    table[0, 0] = 0.0
    for k in range(1, n + 1):
        table[k] = table[k - 1]
        table[k, 1:] = np.logaddexp(table[k - 1, 1:], table[k - 1, :-1] + alpha[k - 1])
    return table


class PartitionTable:
    """Canonical partition values Z(k, c) of a region, kept in log space.

    ``suffix[k, c]`` sums e^{alpha . eta} over configurations of the last k
    sites with c particles, following Z(k, c) = Z(k-1, c) + e^{alpha} Z(k-1, c-1);
    ``prefix`` is the same over the first k sites.
    """

    def __init__(self, alpha):
        self.alpha = np.asarray(alpha, dtype=float)
        self.n = len(self.alpha)
        self.prefix = _log_esp(self.alpha)
        self.suffix = _log_esp(self.alpha[::-1])

    def log_z(self, count: int) -> float:
        return float(self.prefix[self.n, count])

    def _check_count(self, count: int) -> None:
        if not 0 <= count <= self.n:
            raise ValueError(f"particle count {count} outside [0, {self.n}]")

    def sample_canonical(self, count: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Exact draws from the canonical measure with ``count`` particles.

        Sites are filled left to right; site i is occupied with probability
        e^{alpha_i} Z(k-1, r-1) / Z(k, r), k sites and r particles remaining.
        """
        self._check_count(count)
        shape = (1,) if size is None else (size,)
        out = np.zeros(shape + (self.n,), dtype=np.int8)
        remaining = np.full(shape, count, dtype=np.int64)
        for i in range(self.n):
            k = self.n - i
            r_prev = np.maximum(remaining - 1, 0)
            log_p = self.alpha[i] + self.suffix[k - 1, r_prev] - self.suffix[k, remaining]
            occupied = (remaining > 0) & (rng.random(shape) < np.exp(np.minimum(log_p, 0.0)))
            out[..., i] = occupied
            remaining -= occupied
        return out[0] if size is None else out

    def marginal_table(self) -> np.ndarray:
        """table[c, i] = probability that site i is occupied given c particles."""
        n = self.n
        table = np.zeros((n + 1, n))
        counts = np.arange(n + 1)
        for i in range(n):
            before = self.prefix[i]
            after = self.suffix[n - i - 1]
            joint = before[:, None] + after[None, :] + self.alpha[i]
            total = np.add.outer(counts, counts) + 1
            log_num = np.full(2 * n + 2, -np.inf)
            np.logaddexp.at(log_num, total.ravel(), joint.ravel())
            table[:, i] = np.exp(log_num[: n + 1] - self.prefix[n])
        table[0] = 0.0
        return np.clip(table, 0.0, 1.0)

    def canonical_marginals(self, count: int) -> np.ndarray:
        self._check_count(count)
        return self.marginal_table()[count]

    def count_distribution(self, lam: float) -> np.ndarray:
        """P(N = c) under the grand canonical measure (Poisson binomial law)."""
        log_norm = np.logaddexp(0.0, self.alpha + lam).sum()
        return np.exp(self.prefix[self.n] + np.arange(self.n + 1) * lam - log_norm)

    def support_law(self, positions, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Joint canonical law of the occupations at ``positions``."""
        self._check_count(count)
        positions = np.asarray(positions, dtype=np.int64)
        rest = PartitionTable(np.delete(self.alpha, positions))
        patterns = np.asarray(list(itertools.product((0, 1), repeat=len(positions))), dtype=np.int8)
        patterns = patterns.reshape(2 ** len(positions), len(positions))
        filled = patterns.sum(axis=1)
        log_rest = np.array(
            [rest.prefix[rest.n, count - c] if 0 <= count - c <= rest.n else -np.inf for c in filled]
        )
        log_w = patterns @ self.alpha[positions] + log_rest - self.log_z(count)
        return patterns, np.exp(log_w)


# --- Gibbs specifications -------------------------------------------------


@dataclass(frozen=True, eq=False)
class GibbsSpec:
    """A region's disorder with either a chemical potential or a particle count."""

    alpha: np.ndarray = field(repr=False)
    lam: float | None = None
    n_particles: int | None = None

    def __post_init__(self):
        if len(self.alpha) == 0:
            raise ValueError("region must be nonempty")
        if (self.lam is None) == (self.n_particles is None):
            raise ValueError("give exactly one of lam (grand canonical) or n_particles (canonical)")
        if self.n_particles is not None and not 0 <= self.n_particles <= len(self.alpha):
            raise ValueError(f"particle count {self.n_particles} outside [0, {len(self.alpha)}]")

    @property
    def canonical(self) -> bool:
        return self.n_particles is not None

    @property
    def size(self) -> int:
        return len(self.alpha)


def sample_grand(alpha, lam: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Independent Bernoulli(p_x) occupations."""
    p = occupation_prob(alpha, lam)
    shape = p.shape if size is None else (size,) + p.shape
    return (rng.random(shape) < p).astype(np.int8)


def sample_canonical(spec: GibbsSpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if not spec.canonical:
        raise ValueError("canonical sampling needs a particle count")
    return PartitionTable(spec.alpha).sample_canonical(spec.n_particles, rng, size)


def sample(spec: GibbsSpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if spec.canonical:
        return sample_canonical(spec, rng, size)
    return sample_grand(spec.alpha, spec.lam, rng, size)


def all_configurations(n: int) -> np.ndarray:
    return ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.int8)


def sector_configurations(n: int, count: int) -> np.ndarray:
    """All configurations of n sites with ``count`` particles, lexicographic in positions."""
    combos = list(itertools.combinations(range(n), count))
    combos = np.asarray(combos, dtype=np.int64).reshape(len(combos), count)
    out = np.zeros((len(combos), n), dtype=np.int8)
    np.put_along_axis(out, combos, 1, axis=1)
    return out


def enumerate_spec(spec: GibbsSpec) -> tuple[np.ndarray, np.ndarray]:
    """Every configuration of the spec with its probability.

    Raises:
        ResourceCapError: If the region or sector exceeds the enumeration caps.
    """
    caps = get_settings().caps
    if spec.canonical:
        from math import comb

        states = comb(spec.size, spec.n_particles)
        if states > caps.canonical_sector_states:
            raise ResourceCapError(f"sector of {states} states exceeds cap {caps.canonical_sector_states}")
        configs = sector_configurations(spec.size, spec.n_particles)
        log_w = configs @ spec.alpha
        return configs, np.exp(log_w - logsumexp(log_w))
    if spec.size > caps.grand_enumeration_sites:
        raise ResourceCapError(f"region of {spec.size} sites exceeds cap {caps.grand_enumeration_sites}")
    configs = all_configurations(spec.size)
    z = spec.alpha + spec.lam
    log_w = configs @ z - np.logaddexp(0.0, z).sum()
    return configs, np.exp(log_w)


def exact_expectation(spec: GibbsSpec, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """Exact expectation of ``f`` (vectorized over a batch of configurations)."""
    configs, weights = enumerate_spec(spec)
    return float(np.dot(weights, np.asarray(f(configs), dtype=float)))


def ensemble_gap(
    alpha,
    atoms: list,
    counts: list[int],
    f: Callable[[np.ndarray], np.ndarray],
    support,
) -> float:
    """nu(f) - mu(f) for a multicanonical nu and its matched product measure mu.

    ``atoms`` partition the region, ``counts`` fix the particle number of each,
    and mu uses on each atom the empirical chemical potential of its density.
    ``f`` sees the occupations at ``support`` only.
    """
    alpha = np.asarray(alpha, dtype=float)
    support = np.asarray(support, dtype=np.int64)
    if len(atoms) != len(counts):
        raise ValueError("one particle count per atom is needed")
    canonical_parts, grand_parts = [], []
    for atom, count in zip(atoms, counts):
        atom = np.asarray(atom, dtype=np.int64)
        if not 0 <= count <= len(atom):
            raise ValueError(f"infeasible count {count} on an atom of {len(atom)} sites")
        inside = [int(np.nonzero(atom == s)[0][0]) for s in support if s in atom]
        where = [int(np.nonzero(support == s)[0][0]) for s in support if s in atom]
        patterns, weights = PartitionTable(alpha[atom]).support_law(inside, count)
        canonical_parts.append((where, patterns, weights))
        density = count / len(atom)
        if 0 < density < 1:
            p = occupation_prob(alpha[atom][inside], empirical_lambda(alpha[atom], density))
        else:
            p = np.full(len(inside), float(density))
        grand_weights = np.prod(np.where(patterns == 1, p, 1 - p), axis=1) if len(inside) else np.ones(1)
        grand_parts.append((where, patterns, grand_weights))

    def expect(parts) -> float:
        total = 0.0
        for combo in itertools.product(*[range(len(w)) for _, _, w in parts]):
            config = np.zeros(len(support), dtype=np.int8)
            weight = 1.0
            for (where, patterns, weights), row in zip(parts, combo):
                config[where] = patterns[row]
                weight *= weights[row]
            total += weight * float(np.asarray(f(config[None, :]))[0])
        return total

    return expect(canonical_parts) - expect(grand_parts)


def variance_ratio(alpha, count: int, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """Var_nu(f) / Var_mu(f): canonical against grand canonical at the matched lambda."""
    alpha = np.asarray(alpha, dtype=float)
    density = count / len(alpha)
    if not 0 < density < 1:
        raise ValueError("variance comparison needs 0 < N < |region|")
    variances = []
    for spec in (GibbsSpec(alpha, n_particles=count), GibbsSpec(alpha, lam=empirical_lambda(alpha, density))):
        configs, weights = enumerate_spec(spec)
        values = np.asarray(f(configs), dtype=float)
        mean = np.dot(weights, values)
        variances.append(float(np.dot(weights, (values - mean) ** 2)))
    if variances[1] == 0:
        return 0.0 if variances[0] == 0 else np.inf
    return variances[0] / variances[1]
