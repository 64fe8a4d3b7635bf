"""Block densities, the psi/phi split of block gradients, and long-jump observables.

phi_{n,s} is the canonical expectation of the block difference m^2_n - m^1_n
given the particle count on the two s-blocks; psi_{n,s} is the rest. Both use
the partition tables of :mod:`latgas.gibbs`.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from latgas.config import get_settings
from latgas.disorder import DisorderLaw, window_rng
from latgas.errors import ResourceCapError
from latgas.gibbs import GibbsSpec, PartitionTable, annealed_lambda, compressibility, enumerate_spec
from latgas.lattice import TorusGeometry, box_sites, make_torus, paired_boxes

logger = logging.getLogger(__name__)


def block_density(eta: np.ndarray, geometry: TorusGeometry, center, ell: int) -> float:
    """Mean occupation over the cube of side 2*ell+1 around ``center``."""
    return float(np.mean(eta[box_sites(center, ell, geometry)]))


@dataclass(frozen=True, eq=False)
class BlockPair:
    """Sites and weights of m^2_n - m^1_n laid out inside the s-blocks."""

    support: np.ndarray  # sites of the two s-blocks, negative side first
    weights: np.ndarray  # -1/n^d on the inner negative block, +1/n^d on the inner positive one

    def difference(self, eta: np.ndarray) -> np.ndarray:
        return np.asarray(eta)[..., self.support] @ self.weights


def block_pair(geometry: TorusGeometry, center, n: int, s: int, axis: int, sign: int = 1) -> BlockPair:
    if n > s:
        raise ValueError(f"inner blocks (n={n}) must not exceed the conditioning blocks (s={s})")
    inner = paired_boxes(center, n, axis, geometry, sign)
    outer = paired_boxes(center, s, axis, geometry, sign)
    support = np.concatenate([outer[0].sites, outer[1].sites])
    weights = np.zeros(len(support))
    volume = float(n**geometry.d)
    position = {int(site): k for k, site in enumerate(support)}
    for box, value in ((inner[0], -1.0 / volume), (inner[1], 1.0 / volume)):
        for site in box.sites:
            weights[position[int(site)]] = value
    return BlockPair(support, weights)


def local_block_pair(d: int, n: int, s: int | None = None, axis: int = 0, sign: int = 1) -> tuple[np.ndarray, BlockPair]:
    """Block pair around the origin of a scratch torus; returns (offsets, pair)."""
    s = n if s is None else s
    geometry = make_torus([2 * s + 2] * d)
    pair = block_pair(geometry, 0, n, s, axis, sign)
    offsets = geometry.coords(pair.support)
    offsets = np.where(offsets > geometry.dims[0] // 2, offsets - geometry.dims[0], offsets)
    return offsets, pair


def conditional_difference(alpha, weights) -> np.ndarray:
    """phi for every particle count c on the support: weights . P(eta_x = 1 | c)."""
    alpha = np.asarray(alpha, dtype=float)
    if np.all(alpha == alpha[0]):
        return np.zeros(len(alpha) + 1)
    return PartitionTable(alpha).marginal_table() @ np.asarray(weights, dtype=float)


def psi_from_window(alpha, eta_rows: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    """(psi, phi) for a batch of configurations of one disorder window."""
    eta_rows = np.asarray(eta_rows)
    phi = conditional_difference(alpha, weights)[eta_rows.sum(axis=-1)]
    return eta_rows @ np.asarray(weights, dtype=float) - phi, phi


@dataclass
class PsiPhi:
    n: int
    s: int
    axis: int
    count: int
    difference: float
    phi: float
    approximate: bool = False

    @property
    def psi(self) -> float:
        return self.difference - self.phi


def psi_phi(
    eta: np.ndarray,
    alpha: np.ndarray,
    geometry: TorusGeometry,
    center,
    n: int,
    s: int,
    axis: int = 0,
    sign: int = 1,
    mode: str = "exact",
    rng: np.random.Generator | None = None,
    draws: int = 200,
) -> PsiPhi:
    """Split m^2_n - m^1_n into psi + phi at a site of a torus configuration.

    Raises:
        ResourceCapError: In exact mode, if the two s-blocks exceed the cap.
    """
    pair = block_pair(geometry, center, n, s, axis, sign)
    local_alpha = np.asarray(alpha, dtype=float)[pair.support]
    local_eta = np.asarray(eta)[pair.support]
    count = int(local_eta.sum())
    difference = float(local_eta @ pair.weights)
    if np.all(local_alpha == local_alpha[0]):
        return PsiPhi(n, s, axis, count, difference, 0.0)
    if mode == "exact":
        cap = get_settings().caps.exact_conditional_sites
        if len(pair.support) > cap:
            raise ResourceCapError(f"{len(pair.support)} conditioning sites exceed cap {cap}; use sampled mode")
        phi = float(PartitionTable(local_alpha).canonical_marginals(count) @ pair.weights)
        return PsiPhi(n, s, axis, count, difference, phi)
    rng = rng or np.random.default_rng()
    samples = PartitionTable(local_alpha).sample_canonical(count, rng, draws)
    return PsiPhi(n, s, axis, count, difference, float(np.mean(samples @ pair.weights)), approximate=True)


@dataclass
class PhiStatistics:
    """Disorder averages of E_mu[phi] and E_mu[phi^2] per block size."""

    rows: list[dict] = field(default_factory=list)
    slope: float | None = None

    @property
    def sizes(self) -> list[int]:
        return [row["n"] for row in self.rows]


def _phi_moments(alpha, pair: BlockPair, lam: float, mode: str, rng, draws: int) -> tuple[float, float]:
    table = PartitionTable(alpha)
    probs = table.count_distribution(lam)
    if mode == "exact":
        phi = conditional_difference(alpha, pair.weights)
    else:
        phi = np.zeros(len(alpha) + 1)
        for count in np.nonzero(probs > 1e-12)[0]:
            phi[count] = np.mean(table.sample_canonical(int(count), rng, draws) @ pair.weights)
    return float(probs @ phi), float(probs @ phi**2)


def phi_statistics(
    law: DisorderLaw,
    m: float,
    sizes: list[int],
    s: int | None = None,
    d: int = 1,
    samples: int = 2000,
    seed: int = 0,
    mode: str = "exact",
    draws: int = 200,
) -> PhiStatistics:
    """Monte Carlo over disorder, exact over occupations, of the first two moments of phi.

    Occupations follow the product measure at the annealed chemical potential, so
    the count on the s-blocks is Poisson-binomial and phi is a function of it.
    """
    lam = annealed_lambda(law, m)
    cap = get_settings().caps.exact_conditional_sites
    stats = PhiStatistics()
    for n in sizes:
        scale = n if s is None else s
        _, pair = local_block_pair(d, n, scale)
        if mode == "exact" and len(pair.support) > cap:
            raise ResourceCapError(f"{len(pair.support)} conditioning sites exceed cap {cap}; use sampled mode")
        first = np.zeros(samples)
        second = np.zeros(samples)
        for i in range(samples):
            rng = window_rng(seed, n, i)
            alpha = law.sample(rng, len(pair.support))
            first[i], second[i] = _phi_moments(alpha, pair, lam, mode, rng, draws)
        row = {
            "n": n,
            "s": scale,
            "mean_phi": float(first.mean()),
            "mean_phi_stderr": float(first.std(ddof=1) / np.sqrt(samples)),
            "mean_phi2": float(second.mean()),
            "mean_phi2_stderr": float(second.std(ddof=1) / np.sqrt(samples)),
        }
        stats.rows.append(row)
        logger.info(f"n={n} s={scale}: E[phi]={row['mean_phi']:.3e}, E[phi^2]={row['mean_phi2']:.3e}")
    second_moments = np.array([row["mean_phi2"] for row in stats.rows])
    if len(sizes) >= 2 and np.all(second_moments > 0):
        stats.slope = float(np.polyfit(np.log(sizes), np.log(second_moments), 1)[0])
    return stats


# --- long jumps -----------------------------------------------------------


def w_xy(eta: np.ndarray, alpha: np.ndarray, x, y) -> np.ndarray:
    """w_{x,y} = (1 + e^{-(alpha_x - alpha_y)(eta_x - eta_y)}) (eta_y - eta_x), broadcasting over x, y."""
    eta = np.asarray(eta)
    ex = eta[..., x].astype(float)
    ey = eta[..., y].astype(float)
    return (1.0 + np.exp(-(alpha[x] - alpha[y]) * (ex - ey))) * (ey - ex)


def long_jump_W(eta: np.ndarray, alpha: np.ndarray, geometry: TorusGeometry, center, n: int, axis: int = 0, sign: int = 1) -> float:
    """Average of w_{x,y} over x in the negative block and y in the positive block."""
    first, second = paired_boxes(center, n, axis, geometry, sign)
    x = first.sites[:, None]
    y = second.sites[None, :]
    return float(np.mean(w_xy(eta, np.asarray(alpha, dtype=float), x, y)))


def long_jump_pair(
    eta: np.ndarray,
    alpha: np.ndarray,
    geometry: TorusGeometry,
    center,
    n: int,
    law: DisorderLaw,
    m: float,
    axis: int = 0,
) -> dict:
    """W_n / n next to 2 m (1-m) lambda_0'(m) psi_{n,n} / n at one location."""
    chi = compressibility(law, m)
    split = psi_phi(eta, alpha, geometry, center, n, n, axis)
    return {
        "n": n,
        "w_over_n": long_jump_W(eta, alpha, geometry, center, n, axis) / n,
        "psi_term": 2.0 * m * (1.0 - m) / chi * split.psi / n,
    }


@dataclass
class IbpResult:
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def ibp_check(alpha, n_particles: int, x: int, y: int, g: Callable[[np.ndarray], np.ndarray]) -> IbpResult:
    """nu(w_{x,y} g) against nu((eta_x - eta_y) grad_{x,y} g) under a canonical measure."""
    alpha = np.asarray(alpha, dtype=float)
    configs, weights = enumerate_spec(GibbsSpec(alpha, n_particles=n_particles))
    values = np.asarray(g(configs), dtype=float)
    swapped = configs.copy()
    swapped[:, [x, y]] = configs[:, [y, x]]
    lhs = float(weights @ (w_xy(configs, alpha, x, y) * values))
    moved = (configs[:, x].astype(float) - configs[:, y]) * (np.asarray(g(swapped), dtype=float) - values)
    return IbpResult(lhs, float(weights @ moved))


def random_local_function(positions, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    """A random function of the occupations at ``positions`` (table lookup)."""
    positions = np.asarray(positions, dtype=np.int64)
    table = rng.normal(size=2 ** len(positions))
    powers = 1 << np.arange(len(positions))

    def g(configs: np.ndarray) -> np.ndarray:
        return table[np.asarray(configs)[..., positions] @ powers]

    return g
