"""Truncated variational estimates of the diffusion matrix D(m).

For a direction vector a and a local function g,

    Q_a(g) = sum_e E[ mu^{alpha, lambda_0(m)}( c_{0,e} (a_e (eta_e - eta_0) + grad_{0,e} sum_x tau_x g)^2 ) ]

and (a, D(m) a) = inf_g Q_a(g) / (2 chi(m)). g is a table indexed by the binned
disorder letters and the occupations on its support, so Q_a is a quadratic
theta^T M theta + 2 theta^T b_a + C_a in the table entries theta. M, b and C are
assembled per disorder sample from exact (or sampled) occupation expectations
on the window around the bond and then minimized by conjugate gradients.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.interpolate import PchipInterpolator
from scipy.sparse.linalg import cg
from scipy.special import expit

from latgas.config import DiffusionConfig, get_settings
from latgas.disorder import DisorderLaw, sample_field, window_rng
from latgas.dynamics import RateFamily
from latgas.errors import NumericalError, ResourceCapError
from latgas.gibbs import all_configurations, annealed_lambda, compressibility
from latgas.lattice import cube_offsets, make_torus

logger = logging.getLogger(__name__)

MAX_TABLE_INDEX = 2**62
MAX_DISORDER_PATTERNS = 1_000_000


def _key(offset) -> tuple[int, ...]:
    return tuple(int(c) for c in offset)


def support_offsets(kind: str, d: int, radius: int = 1) -> np.ndarray:
    """Offsets of Delta_g: "empty", "site" ({0}), "bond" ({0} and the unit vectors) or "cube"."""
    if kind == "empty":
        return np.zeros((0, d), dtype=np.int64)
    if kind == "site":
        return np.zeros((1, d), dtype=np.int64)
    if kind == "bond":
        return np.vstack([np.zeros((1, d), dtype=np.int64), np.eye(d, dtype=np.int64)])
    if kind == "cube":
        return cube_offsets(radius, d)
    raise ValueError(f"unknown support {kind!r}")


def support_chain(kind: str, d: int, radius: int = 1) -> list[tuple[str, np.ndarray]]:
    """Increasing supports ending in the requested one: empty, site, bond, cubes up to ``radius``."""
    chain = [("empty", support_offsets("empty", d)), ("site", support_offsets("site", d))]
    chain.append(("bond", support_offsets("bond", d)))
    if kind == "cube":
        chain += [(f"cube{r}", support_offsets("cube", d, r)) for r in range(1, radius + 1)]
    elif kind != "bond":
        raise ValueError(f"unknown support {kind!r}")
    return chain


@dataclass(frozen=True, eq=False)
class _Layout:
    """Window of the bond (0, e_axis) for one support, with the positions of every translate."""

    axis: int
    window: np.ndarray  # offsets; window[0] = 0, window[1] = e
    translates: np.ndarray  # (|X|, |Delta|) positions within window


def _layout(support: np.ndarray, axis: int, d: int) -> _Layout:
    e = np.zeros(d, dtype=np.int64)
    e[axis] = 1
    window = [np.zeros(d, dtype=np.int64), e]
    position = {_key(window[0]): 0, _key(e): 1}
    shifts = sorted({_key(base - delta) for base in window for delta in support})
    translates = []
    for shift in shifts:
        row = []
        for delta in support:
            site = np.asarray(shift) + delta
            if _key(site) not in position:
                position[_key(site)] = len(window)
                window.append(site)
            row.append(position[_key(site)])
        translates.append(row)
    return _Layout(axis, np.asarray(window), np.asarray(translates, dtype=np.int64).reshape(len(shifts), len(support)))


def canvas_offsets(support: np.ndarray, d: int) -> np.ndarray:
    """Union of the bond windows over all axes, sorted; disorder is drawn on this set."""
    sites = {_key(site) for axis in range(d) for site in _layout(support, axis, d).window}
    return np.asarray(sorted(sites), dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True, eq=False)
class LocalFunctionTable:
    """Coefficients of g indexed by letter_code * 2^|Delta| + occupation_code.

    Codes are little-endian over the support order: letters in base K, occupations
    in base 2. Only the stored ``ids`` are nonzero.
    """

    support: np.ndarray
    alphabet: int
    ids: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.alphabet ** len(self.support) * 2 ** len(self.support)

    @classmethod
    def zeros(cls, support: np.ndarray, alphabet: int) -> "LocalFunctionTable":
        return cls(np.asarray(support), alphabet, np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def dense(cls, support: np.ndarray, alphabet: int, values) -> "LocalFunctionTable":
        values = np.asarray(values, dtype=float)
        table = cls(np.asarray(support), alphabet, np.arange(len(values), dtype=np.int64), values)
        if len(values) != table.size:
            raise ValueError(f"dense table needs {table.size} entries, got {len(values)}")
        return table

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if len(self.ids) == 0:
            return np.zeros(ids.shape)
        where = np.clip(np.searchsorted(self.ids, ids), 0, len(self.ids) - 1)
        return np.where(self.ids[where] == ids, self.values[where], 0.0)

    def __call__(self, letters: np.ndarray, eta_rows: np.ndarray) -> np.ndarray:
        """g at one window: ``letters`` over the support, ``eta_rows`` a batch of occupations."""
        k = len(self.support)
        letter_code = int(np.asarray(letters) @ (self.alphabet ** np.arange(k))) if k else 0
        codes = np.asarray(eta_rows) @ (1 << np.arange(k)) if k else np.zeros(len(eta_rows), dtype=np.int64)
        return self.lookup(letter_code * 2**k + codes)


@dataclass
class _Rows:
    """Design rows of one batch: Phi as triplets plus a weight, a drift and an axis per row."""

    row: list = field(default_factory=list)
    col: list = field(default_factory=list)
    val: list = field(default_factory=list)
    weight: list = field(default_factory=list)
    drift: list = field(default_factory=list)
    axis: list = field(default_factory=list)
    n_rows: int = 0

    def add(self, rows_phi, cols, vals, weight, drift, axis):
        self.row.append(rows_phi + self.n_rows)
        self.col.append(cols)
        self.val.append(vals)
        self.weight.append(weight)
        self.drift.append(drift)
        self.axis.append(np.full(len(weight), axis, dtype=np.int64))
        self.n_rows += len(weight)

    def arrays(self):
        def join(parts, dtype):
            return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)

        return (
            join(self.row, np.int64), join(self.col, np.int64), join(self.val, float),
            join(self.weight, float), join(self.drift, float), join(self.axis, np.int64),
        )


class _Assembler:
    """Builds design rows for one support against disorder samples on the shared canvas."""

    def __init__(self, support, canvas, d, law: DisorderLaw, family: RateFamily, lam, bins, eta_mode, n_eta):
        self.support = np.asarray(support, dtype=np.int64).reshape(-1, d)
        self.d = d
        self.law = law
        self.family = family
        self.lam = lam
        self.bins = bins
        self.alphabet = law.alphabet_size(bins)
        self.n_eta = n_eta
        k = len(self.support)
        if self.alphabet**k * 2**k >= MAX_TABLE_INDEX:
            raise ResourceCapError(f"table of {self.alphabet}^{k} x 2^{k} entries cannot be indexed")
        self.letter_powers = self.alphabet ** np.arange(k, dtype=np.int64)
        self.eta_powers = 1 << np.arange(k, dtype=np.int64)
        canvas_index = {_key(site): i for i, site in enumerate(canvas)}
        cap = get_settings().caps.window_sites
        self.layouts = []
        for axis in range(d):
            layout = _layout(self.support, axis, d)
            where = np.array([canvas_index[_key(site)] for site in layout.window], dtype=np.int64)
            size = len(layout.window)
            mode = eta_mode if eta_mode != "auto" else ("exact" if size <= cap else "sampled")
            if mode == "exact" and size > cap:
                raise ResourceCapError(f"window of {size} sites exceeds cap {cap}; use sampled occupations")
            configs = None
            if mode == "exact":
                configs = all_configurations(size)
                configs = configs[configs[:, 0] != configs[:, 1]]
            self.layouts.append((layout, where, mode, configs))

    def codes(self, configs: np.ndarray, layout: _Layout) -> np.ndarray:
        if layout.translates.size == 0:
            return np.zeros((len(configs), len(layout.translates)), dtype=np.int64)
        return configs[:, layout.translates] @ self.eta_powers

    def add_sample(self, rows: _Rows, alpha: np.ndarray, sample_weight: float, rng: np.random.Generator | None):
        letters = self.law.bin_index(alpha, self.bins)
        span = 2 ** len(self.support)
        for layout, where, mode, configs in self.layouts:
            a_w = alpha[where]
            p = expit(a_w + self.lam)
            if mode == "exact":
                weight = np.exp(configs @ np.log(p) + (1 - configs) @ np.log1p(-p))
            else:
                draws = (rng.random((self.n_eta, len(p))) < p).astype(np.int8)
                configs = np.concatenate([draws, draws])
                configs[: self.n_eta, 0], configs[: self.n_eta, 1] = 1, 0
                configs[self.n_eta :, 0], configs[self.n_eta :, 1] = 0, 1
                weight = np.concatenate(
                    [np.full(self.n_eta, p[0] * (1 - p[1])), np.full(self.n_eta, (1 - p[0]) * p[1])]
                ) / self.n_eta
            rate = self.family.rate(a_w[0], configs[:, 0], a_w[1], configs[:, 1], layout.axis)
            drift = (configs[:, 1] - configs[:, 0]).astype(float)
            n_shift = len(layout.translates)
            if n_shift:
                letter_codes = letters[where][layout.translates] @ self.letter_powers
                swapped = configs.copy()
                swapped[:, [0, 1]] = configs[:, [1, 0]]
                before = letter_codes * span + self.codes(configs, layout)
                after = letter_codes * span + self.codes(swapped, layout)
                index = np.repeat(np.arange(len(configs)), n_shift)
                cols = np.concatenate([after.ravel(), before.ravel()])
                vals = np.concatenate([np.ones(after.size), -np.ones(before.size)])
                phi_rows = np.concatenate([index, index])
            else:
                phi_rows = cols = np.zeros(0, dtype=np.int64)
                vals = np.zeros(0)
            rows.add(phi_rows, cols, vals, sample_weight * weight * rate, drift, layout.axis)


@dataclass
class _Moments:
    """M, b_e and C_e of a batch on the shared compact parameter set."""

    M: sparse.csr_matrix
    B: np.ndarray  # (d, n_params)
    C: np.ndarray  # (d,)

    def __add__(self, other: "_Moments") -> "_Moments":
        return _Moments(self.M + other.M, self.B + other.B, self.C + other.C)

    def __sub__(self, other: "_Moments") -> "_Moments":
        return _Moments(self.M - other.M, self.B - other.B, self.C - other.C)

    def scaled(self, factor: float) -> "_Moments":
        return _Moments(self.M * factor, self.B * factor, self.C * factor)


def _moments(arrays, inverse: np.ndarray, n_params: int, d: int) -> _Moments:
    row, _, val, weight, drift, axis = arrays
    n_rows = len(weight)
    phi = sparse.coo_matrix((val, (row, inverse)), shape=(n_rows, n_params)).tocsr()
    M = (phi.T @ sparse.diags(weight) @ phi).tocsr()
    B = np.zeros((d, n_params))
    C = np.zeros(d)
    for e in range(d):
        mask = axis == e
        B[e] = phi.T @ np.where(mask, weight * drift, 0.0)
        C[e] = float(np.sum(weight[mask] * drift[mask] ** 2))
    return _Moments(M, B, C)


def _minimize(moments: _Moments, a: np.ndarray, tol: float) -> tuple[np.ndarray, float, float]:
    """(theta, inf Q_a, Q_a(0)) for the quadratic theta^T M theta + 2 theta^T b + C."""
    b = a @ moments.B
    c = float(np.dot(a**2, moments.C))
    n = moments.M.shape[0]
    if n == 0 or np.linalg.norm(b) <= 1e-14 * max(c, 1.0):
        return np.zeros(n), c, c
    theta, info = cg(moments.M, -b, rtol=tol, atol=0.0, maxiter=20 * n + 200)
    if info != 0:
        residual = float(np.linalg.norm(moments.M @ theta + b) / np.linalg.norm(b))
        if residual > np.sqrt(tol):
            raise NumericalError(f"CG stagnated at relative residual {residual:.3e} (target {tol:.1e})")
        logger.warning(f"CG stopped at relative residual {residual:.3e} above target {tol:.1e}")
    theta = theta - theta.mean()
    value = float(theta @ (moments.M @ theta) + 2.0 * theta @ b + c)
    return theta, value, c


def _directions(d: int) -> list[tuple[str, np.ndarray]]:
    out = []
    for i in range(d):
        a = np.zeros(d)
        a[i] = 1.0
        out.append((f"e{i}", a))
    for i in range(d):
        for j in range(i + 1, d):
            a = np.zeros(d)
            a[[i, j]] = 1.0
            out.append((f"e{i}+e{j}", a))
    return out


def _polarize(values: dict[str, float], d: int, chi: float) -> np.ndarray:
    D = np.zeros((d, d))
    for i in range(d):
        D[i, i] = values[f"e{i}"] / (2.0 * chi)
    for i in range(d):
        for j in range(i + 1, d):
            D[i, j] = D[j, i] = (values[f"e{i}+e{j}"] - values[f"e{i}"] - values[f"e{j}"]) / (4.0 * chi)
    return D


# --- disorder samples -----------------------------------------------------


@dataclass
class _DisorderSamples:
    alphas: list[np.ndarray]
    weights: np.ndarray
    seed: int
    exact: bool


def _disorder_samples(law: DisorderLaw, canvas: np.ndarray, d: int, mode: str, n_dis: int, seed: int, bins: int) -> _DisorderSamples:
    n_sites = len(canvas)
    if mode == "exact":
        atomic = law.binned(bins)
        if len(atomic.atoms()[0]) ** n_sites > MAX_DISORDER_PATTERNS:
            raise ResourceCapError(f"{len(atomic.atoms()[0])}^{n_sites} disorder patterns exceed {MAX_DISORDER_PATTERNS}")
        patterns, probs = atomic.enumerate_patterns(n_sites)
        return _DisorderSamples(list(patterns), probs, seed, True)
    if mode == "translates":
        low = canvas.min(axis=0)
        extent = canvas.max(axis=0) - low + 1
        dims = [max(int(n_dis), int(extent[0]) + 1)] + [int(x) + 1 for x in extent[1:]]
        geometry = make_torus(dims)
        values = sample_field(law, geometry, seed).values
        alphas = []
        for i in range(n_dis):
            shift = np.zeros(d, dtype=np.int64)
            shift[0] = i
            alphas.append(values[geometry.index(canvas - low + shift)])
        return _DisorderSamples(alphas, np.full(n_dis, 1.0 / n_dis), seed, False)
    alphas = [law.sample(window_rng(seed, i), n_sites) for i in range(n_dis)]
    return _DisorderSamples(alphas, np.full(n_dis, 1.0 / n_dis), seed, False)


# --- public API -------------------------------------------------------------


@dataclass
class Minimization:
    """Minimizers and values of Q_a for the basis and pair directions of one support."""

    support: str
    tables: dict[str, LocalFunctionTable]
    values: dict[str, float]
    g0_values: dict[str, float]
    jackknife: dict[str, list[float]] = field(default_factory=dict)


def _groups(n: int, blocks: int) -> list[list[int]]:
    return [list(range(b * n // blocks, (b + 1) * n // blocks)) for b in range(blocks)]


def _assemble_blocks(assembler: _Assembler, samples: _DisorderSamples, blocks: int, threads: int) -> list[tuple]:
    groups = _groups(len(samples.alphas), blocks)

    def one(group: list[int]):
        rows = _Rows()
        for i in group:
            assembler.add_sample(rows, samples.alphas[i], float(samples.weights[i]), window_rng(samples.seed, i, 1))
        return rows.arrays()

    if threads <= 1:
        return [one(group) for group in groups]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, groups))


def minimize_supports(
    m: float,
    supports: list[tuple[str, np.ndarray]],
    law: DisorderLaw,
    family: RateFamily,
    d: int,
    n_dis: int = 200,
    seed: int = 0,
    bins: int = 5,
    disorder_mode: str = "iid",
    eta_mode: str = "auto",
    n_eta: int = 64,
    jackknife_blocks: int = 20,
    threads: int = 1,
) -> list[Minimization]:
    """Minimize Q_a over tables on each support, all against one set of disorder samples."""
    tol = get_settings().tolerances.cg
    lam = annealed_lambda(law, m)
    canvas = canvas_offsets(supports[-1][1], d)
    samples = _disorder_samples(law, canvas, d, disorder_mode, n_dis, seed, bins)
    blocks = 1 if samples.exact else max(1, min(jackknife_blocks, len(samples.alphas)))
    canvas_index = {_key(site): i for i, site in enumerate(canvas)}
    results = []
    for label, support in supports:
        sub = canvas_offsets(support, d)
        keep = np.array([canvas_index[_key(site)] for site in sub], dtype=np.int64)
        local = _DisorderSamples([alpha[keep] for alpha in samples.alphas], samples.weights, samples.seed, samples.exact)
        assembler = _Assembler(support, sub, d, law, family, lam, bins, eta_mode, n_eta)
        block_arrays = _assemble_blocks(assembler, local, blocks, threads)
        ids, inverse = np.unique(np.concatenate([arrays[1] for arrays in block_arrays]), return_inverse=True)
        offsets = np.cumsum([0] + [len(arrays[1]) for arrays in block_arrays])
        parts = [
            _moments(arrays, inverse[offsets[b] : offsets[b + 1]], len(ids), d)
            for b, arrays in enumerate(block_arrays)
        ]
        total = parts[0]
        for part in parts[1:]:
            total = total + part
        block_weights = [float(np.sum(local.weights[group])) for group in _groups(len(local.alphas), blocks)]
        minimization = Minimization(label, {}, {}, {})
        for name, a in _directions(d):
            theta, value, c = _minimize(total, a, tol)
            minimization.tables[name] = LocalFunctionTable(support, assembler.alphabet, ids, theta)
            minimization.values[name] = value
            minimization.g0_values[name] = c
            if blocks > 1:
                minimization.jackknife[name] = [
                    _minimize((total - part).scaled(1.0 / (1.0 - w)), a, tol)[1] for part, w in zip(parts, block_weights)
                ]
        logger.info(f"m={m:.4g} support {label}: " + ", ".join(f"{k}={v:.6g}" for k, v in minimization.values.items()))
        results.append(minimization)
    return results


def minimize_g(
    m: float,
    support: np.ndarray,
    law: DisorderLaw,
    family: RateFamily,
    d: int,
    n_dis: int = 200,
    seed: int = 0,
    **options,
) -> Minimization:
    """inf over tables on ``support`` of Q_a for every basis and pair direction."""
    return minimize_supports(m, [("custom", np.asarray(support))], law, family, d, n_dis, seed, **options)[0]


def quadratic_form(
    a,
    table: LocalFunctionTable,
    alpha: np.ndarray,
    m: float,
    law: DisorderLaw,
    family: RateFamily,
    bins: int = 5,
) -> float:
    """Q_a(g) for one disorder sample ``alpha`` on ``canvas_offsets(table.support, d)``, exact in eta."""
    a = np.asarray(a, dtype=float)
    d = len(a)
    canvas = canvas_offsets(table.support, d)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(canvas),):
        raise ValueError(f"disorder sample has shape {alpha.shape}, expected ({len(canvas)},)")
    lam = annealed_lambda(law, m)
    assembler = _Assembler(table.support, canvas, d, law, family, lam, bins, "exact", 1)
    rows = _Rows()
    assembler.add_sample(rows, alpha, 1.0, None)
    arrays = rows.arrays()
    ids, inverse = np.unique(arrays[1], return_inverse=True)
    moments = _moments(arrays, inverse, len(ids), d)
    theta = table.lookup(ids)
    return float(theta @ (moments.M @ theta) + 2.0 * theta @ (a @ moments.B) + np.dot(a**2, moments.C))


@dataclass
class DiffusionEstimate:
    """Truncated D(m) on one support, with jackknife errors over disorder blocks."""

    m: float
    D: np.ndarray
    stderr: np.ndarray
    support: str
    radius: int
    n_dis: int
    chi: float
    infimum: dict[str, float]
    g0_values: dict[str, float]
    bins: int
    disorder_mode: str

    @property
    def d(self) -> int:
        return self.D.shape[0]

    @property
    def formal(self) -> bool:
        """The variational formula is proved for d >= 3 only."""
        return self.d < 3

    def row(self) -> dict:
        out = {"m": self.m, "support": self.support, "R": self.radius, "n_dis": self.n_dis, "formal": self.formal}
        for i in range(self.d):
            for j in range(i, self.d):
                out[f"D{i}{j}"] = float(self.D[i, j])
                out[f"stderr{i}{j}"] = float(self.stderr[i, j])
        return out


def _jackknife_stderr(replicas: np.ndarray) -> np.ndarray:
    """Grouped jackknife error from leave-one-block-out replicas stacked on axis 0."""
    g = len(replicas)
    return np.sqrt((g - 1) / g * np.sum((replicas - replicas.mean(axis=0)) ** 2, axis=0))


def estimate_D(m: float, config: DiffusionConfig, family: RateFamily | None = None) -> list[DiffusionEstimate]:
    """D_R(m) for the configured support, preceded by every smaller support when ``nested``."""
    family = family or config.rates.build()
    chi = compressibility(config.law, m)
    if chi <= 0:
        raise ValueError(f"compressibility at m={m} is not positive")
    chain = support_chain(config.support, config.d, config.radius)
    if not config.nested:
        chain = chain[-1:]
    results = minimize_supports(
        m, chain, config.law, family, config.d, config.n_dis, config.seed, config.bins,
        config.disorder_mode, config.eta_mode, config.n_eta, config.jackknife_blocks, config.threads,
    )
    estimates = []
    for minimization in results:
        D = _polarize(minimization.values, config.d, chi)
        stderr = np.zeros_like(D)
        if minimization.jackknife:
            replicas = [
                _polarize({k: v[b] for k, v in minimization.jackknife.items()}, config.d, chi)
                for b in range(len(next(iter(minimization.jackknife.values()))))
            ]
            stderr = _jackknife_stderr(np.stack(replicas))
        radius = int(minimization.support[4:]) if minimization.support.startswith("cube") else 0
        estimates.append(
            DiffusionEstimate(
                m, D, stderr, minimization.support, radius, config.n_dis, chi,
                minimization.values, minimization.g0_values, config.bins, config.disorder_mode,
            )
        )
    return estimates


# --- tables -----------------------------------------------------------------


@dataclass
class DiffusionTable:
    """D(m) on a density grid with a monotone cubic interpolant per entry.

    Outside the tabulated range the end values are used and each such lookup is
    counted in ``clamped``.
    """

    m: np.ndarray
    D: np.ndarray  # (n, d, d)
    stderr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    clamped: int = 0

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        if len(self.m) < 2 or np.any(np.diff(self.m) <= 0):
            raise ValueError("density grid must be increasing with at least two nodes")
        if np.any(np.linalg.eigvalsh(self.D) <= 0):
            raise ValueError("diffusion matrices must be positive definite")
        self._interpolants = {
            (i, j): PchipInterpolator(self.m, self.D[:, i, j]) for i in range(self.d) for j in range(self.d)
        }

    @property
    def d(self) -> int:
        return self.D.shape[1]

    @classmethod
    def constant(cls, value: float, d: int = 1) -> "DiffusionTable":
        return cls(np.array([0.0, 1.0]), np.stack([value * np.eye(d)] * 2), meta={"source": "constant"})

    def _clip(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        clipped = np.clip(m, self.m[0], self.m[-1])
        self.clamped += int(np.count_nonzero(clipped != m))
        return clipped

    def entry(self, m, i: int = 0, j: int = 0) -> np.ndarray:
        return self._interpolants[(i, j)](self._clip(m))

    def diagonal(self, m) -> np.ndarray:
        """D_ii(m) stacked on a trailing axis."""
        clipped = self._clip(m)
        return np.stack([self._interpolants[(i, i)](clipped) for i in range(self.d)], axis=-1)

    def matrix(self, m) -> np.ndarray:
        clipped = self._clip(m)
        return np.stack(
            [np.stack([self._interpolants[(i, j)](clipped) for j in range(self.d)], axis=-1) for i in range(self.d)],
            axis=-2,
        )

    def antiderivative(self, m, axis: int = 0) -> np.ndarray:
        """A(m) = int_{m_0}^{m} D_aa, extended linearly beyond the grid."""
        m = np.asarray(m, dtype=float)
        inner = np.clip(m, self.m[0], self.m[-1])
        primitive = self._interpolants[(axis, axis)].antiderivative()
        edge = self._interpolants[(axis, axis)](inner)
        return primitive(inner) + edge * (m - inner)

    @property
    def continuity_modulus(self) -> float:
        """Largest entry change between adjacent grid nodes."""
        return float(np.max(np.abs(np.diff(self.D, axis=0)), initial=0.0))

    def to_csv(self, path: Path) -> None:
        d = self.d
        names = [f"D{i}{j}" for i in range(d) for j in range(d)]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["m", *names, *(f"stderr{i}{j}" for i in range(d) for j in range(d))])
            errors = self.stderr if self.stderr is not None else np.zeros_like(self.D)
            for k, m in enumerate(self.m):
                writer.writerow(
                    [f"{m:.17g}", *(f"{v:.17g}" for v in self.D[k].ravel()), *(f"{v:.17g}" for v in errors[k].ravel())]
                )

    @classmethod
    def from_csv(cls, path: Path) -> "DiffusionTable":
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        if not rows:
            raise ValueError(f"{path} holds no rows")
        names = sorted(key for key in rows[0] if key.startswith("D"))
        d = int(round(np.sqrt(len(names))))
        m = np.array([float(row["m"]) for row in rows])
        D = np.array([[float(row[f"D{i}{j}"]) for i in range(d) for j in range(d)] for row in rows]).reshape(-1, d, d)
        stderr = None
        if "stderr00" in rows[0]:
            stderr = np.array(
                [[float(row[f"stderr{i}{j}"]) for i in range(d) for j in range(d)] for row in rows]
            ).reshape(-1, d, d)
        return cls(m, D, stderr, meta={"source": str(path)})


def tabulate_D(densities, config: DiffusionConfig) -> tuple[DiffusionTable, list[DiffusionEstimate]]:
    """Estimate D on every density; the table uses the largest support."""
    family = config.rates.build()
    densities = sorted(float(m) for m in densities)
    estimates = []
    final = []
    for m in densities:
        chain = estimate_D(m, config, family)
        estimates.extend(chain)
        final.append(chain[-1])
    table = DiffusionTable(
        np.array(densities),
        np.stack([e.D for e in final]),
        np.stack([e.stderr for e in final]),
        meta={"support": final[-1].support, "n_dis": config.n_dis, "formal": final[-1].formal, "bins": config.bins},
    )
    logger.info(f"D table on {len(densities)} densities, continuity modulus {table.continuity_modulus:.4g}")
    return table, estimates
