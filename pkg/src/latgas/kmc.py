"""Rejection-free kinetic Monte Carlo under diffusive time scaling.

Active bonds (eta_x != eta_y) carry their exchange rate in a binary sum tree
stored heap-style: leaves at [P, 2P), node i is the sum of nodes 2i and 2i+1.
After an exchange only the leaves of bonds touching the two sites change, and
each of their ancestors is recomputed from its children, so stored sums never
drift from the leaves.

Time runs in macroscopic units: the total rate is eps^-2 times the sum of the
active bond rates.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from latgas.config import get_settings
from latgas.dynamics import RateFamily
from latgas.errors import ValidationFailure
from latgas.lattice import TorusGeometry

logger = logging.getLogger(__name__)

EVENT_CHUNK = 1 << 16

Observer = Callable[[np.ndarray], float]


@njit(cache=True, nogil=True)
def _leaf_rate(b, eta, bonds, rate10, rate01):
    x = bonds[b, 0]
    y = bonds[b, 1]
    if eta[x] == eta[y]:
        return 0.0
    if eta[x] == 1:
        return rate10[b]
    return rate01[b]


@njit(cache=True, nogil=True)
def _set_leaf(tree, n_leaves, b, value):
    i = n_leaves + b
    tree[i] = value
    i //= 2
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i //= 2


@njit(cache=True, nogil=True)
def _rebuild(tree, n_leaves, eta, bonds, rate10, rate01):
    tree[:] = 0.0
    for b in range(bonds.shape[0]):
        tree[n_leaves + b] = _leaf_rate(b, eta, bonds, rate10, rate01)
    for i in range(n_leaves - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@njit(cache=True, nogil=True)
def _run_events(eta, bonds, bond_axes, rate10, rate01, site_bonds, tree, n_leaves, uniforms, clock, t_stop, scale, flux):
    """Execute events until ``t_stop`` or until the uniforms run out.

    ``clock`` holds (time, compensation) for Kahan summation. Returns the number
    of events executed and whether ``t_stop`` was reached.
    """
    n_bonds = bonds.shape[0]
    n_events = uniforms.shape[0] // 2
    for k in range(n_events):
        total = tree[1]
        if total <= 0.0:
            clock[0] = t_stop
            clock[1] = 0.0
            return k, True
        dt = -np.log1p(-uniforms[2 * k]) / (scale * total)
        if clock[0] + dt >= t_stop:
            clock[0] = t_stop
            clock[1] = 0.0
            return k, True
        y = dt - clock[1]
        t = clock[0] + y
        clock[1] = (t - clock[0]) - y
        clock[0] = t

        target = uniforms[2 * k + 1] * total
        i = 1
        while i < n_leaves:
            left = tree[2 * i]
            if target < left or tree[2 * i + 1] <= 0.0:
                i = 2 * i
            else:
                target -= left
                i = 2 * i + 1
        b = i - n_leaves
        if b >= n_bonds or tree[i] <= 0.0:
            continue

        x = bonds[b, 0]
        z = bonds[b, 1]
        if eta[x] == 1:
            flux[bond_axes[b]] += 1
        else:
            flux[bond_axes[b]] -= 1
        eta[x], eta[z] = eta[z], eta[x]
        for site in (x, z):
            for j in range(site_bonds.shape[1]):
                c = site_bonds[site, j]
                if c >= 0:
                    _set_leaf(tree, n_leaves, c, _leaf_rate(c, eta, bonds, rate10, rate01))
    return n_events, False


def _site_bonds(geometry: TorusGeometry) -> np.ndarray:
    table = np.full((geometry.n_sites, 2 * geometry.d), -1, dtype=np.int64)
    fill = np.zeros(geometry.n_sites, dtype=np.int64)
    for b, (x, y) in enumerate(geometry.bonds):
        for site in (x, y):
            table[site, fill[site]] = b
            fill[site] += 1
    return table


@dataclass
class DynState:
    """Configuration, disorder and rates of a running exclusion process."""

    geometry: TorusGeometry
    alpha: np.ndarray = field(repr=False)
    family: RateFamily
    eta: np.ndarray = field(repr=False)
    epsilon: float | None = None
    time: float = 0.0
    n_events: int = 0

    def __post_init__(self):
        if self.eta.shape != (self.geometry.n_sites,):
            raise ValueError(f"configuration has shape {self.eta.shape}, expected ({self.geometry.n_sites},)")
        if self.epsilon is None:
            self.epsilon = 1.0 / self.geometry.dims[0]
        self.eta = np.ascontiguousarray(self.eta, dtype=np.int8)
        self.alpha = np.asarray(self.alpha, dtype=float)
        bonds = self.geometry.bonds
        self.bonds = np.ascontiguousarray(bonds)
        self.bond_axes = np.ascontiguousarray(self.geometry.bond_axes)
        ax, ay = self.alpha[bonds[:, 0]], self.alpha[bonds[:, 1]]
        self.rate10 = np.ascontiguousarray(self.family.rate(ax, 1, ay, 0, self.bond_axes), dtype=float)
        self.rate01 = np.ascontiguousarray(self.family.rate(ax, 0, ay, 1, self.bond_axes), dtype=float)
        self.site_bonds = _site_bonds(self.geometry)
        self.n_leaves = 1 << max(0, int(np.ceil(np.log2(max(len(bonds), 1)))))
        self.tree = np.zeros(2 * self.n_leaves)
        self.flux = np.zeros(self.geometry.d, dtype=np.int64)
        self.clock = np.array([self.time, 0.0])
        self.n_particles = int(self.eta.sum())
        _rebuild(self.tree, self.n_leaves, self.eta, self.bonds, self.rate10, self.rate01)

    @property
    def scale(self) -> float:
        return self.epsilon**-2

    @property
    def total_rate(self) -> float:
        """Macroscopic total jump rate eps^-2 sum_b c_b over active bonds."""
        return self.scale * float(self.tree[1])

    def leaf_rates(self) -> np.ndarray:
        return self.tree[self.n_leaves : self.n_leaves + len(self.bonds)].copy()

    def recomputed_rates(self) -> np.ndarray:
        x, y = self.bonds[:, 0], self.bonds[:, 1]
        active = self.eta[x] != self.eta[y]
        return np.where(active, np.where(self.eta[x] == 1, self.rate10, self.rate01), 0.0)

    def rate_drift(self) -> float:
        """Largest relative gap between stored and freshly recomputed rates, root included."""
        fresh = self.recomputed_rates()
        leaves = np.max(np.abs(self.leaf_rates() - fresh) / np.maximum(np.abs(fresh), 1e-300), initial=0.0)
        total = fresh.sum()
        root = abs(self.tree[1] - total) / total if total > 0 else abs(self.tree[1])
        return float(max(leaves, root))


@dataclass
class TrajectoryStats:
    """Summary of one trajectory."""

    time: float
    n_events: int
    n_particles: int
    flux: np.ndarray
    epsilon: float = 1.0
    rows: list[tuple[float, str, float]] = field(default_factory=list)
    snapshots: list[tuple[float, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def displacement(self) -> np.ndarray:
        """Net macroscopic particle transport per axis (flux times lattice spacing)."""
        return self.flux * self.epsilon


def kmc_run(
    state: DynState,
    horizon: float,
    rng: np.random.Generator,
    observers: dict[str, Observer] | None = None,
    observe_times: list[float] | None = None,
    keep_snapshots: bool = False,
    chunk: int = EVENT_CHUNK,
) -> TrajectoryStats:
    """Advance ``state`` by ``horizon`` macroscopic time units.

    Observers are evaluated on the configuration at each time in
    ``observe_times`` (absolute times within the run). An event that would
    overshoot a stopping time is discarded; by memorylessness the law is exact.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    observers = observers or {}
    t_end = state.time + horizon
    stops = sorted({float(t) for t in (observe_times or []) if state.time <= t <= t_end} | {t_end})
    expected = int(state.total_rate * horizon * 1.25) + 64
    buffer = np.empty(2 * min(chunk, expected))
    stats = TrajectoryStats(state.time, 0, state.n_particles, np.zeros(state.geometry.d, dtype=np.int64), state.epsilon)
    observe = {float(t) for t in observe_times or []}
    debug = get_settings().runtime.debug
    start_flux = state.flux.copy()

    for stop in stops:
        reached = stop <= state.clock[0]
        while not reached:
            rng.random(out=buffer)
            executed, reached = _run_events(
                state.eta, state.bonds, state.bond_axes, state.rate10, state.rate01,
                state.site_bonds, state.tree, state.n_leaves, buffer, state.clock, stop,
                state.scale, state.flux,
            )
            state.n_events += executed
            stats.n_events += executed
            if debug and int(state.eta.sum()) != state.n_particles:
                raise ValidationFailure(f"particle number changed from {state.n_particles} to {int(state.eta.sum())}")
        state.clock[0] = max(state.clock[0], stop)
        state.time = float(state.clock[0])
        if stop in observe:
            for name, observer in observers.items():
                stats.rows.append((stop, name, float(observer(state.eta))))
            if keep_snapshots:
                stats.snapshots.append((stop, state.eta.copy()))

    stats.time = state.time
    stats.flux = state.flux - start_flux
    return stats


def trajectory_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-trajectory streams split from one seed."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(int(seed)).spawn(count)]


def run_ensemble(
    make_state: Callable[[np.random.Generator], DynState],
    horizon: float,
    count: int,
    seed: int,
    threads: int = 1,
    **run_options,
) -> list[TrajectoryStats]:
    """Run ``count`` independent trajectories; results come back in submission order.

    Each trajectory draws its initial state and its events from its own stream,
    so the output depends on (seed, count) only, not on ``threads``.
    """
    rngs = trajectory_rngs(seed, count)

    def one(rng: np.random.Generator) -> TrajectoryStats:
        return kmc_run(make_state(rng), horizon, rng, **run_options)

    if threads <= 1:
        return [one(rng) for rng in rngs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, rngs))
