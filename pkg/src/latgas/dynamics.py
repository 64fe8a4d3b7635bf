"""Exchange rates, detailed balance validation, generator and currents.

Rates are functions f_e(a, s, a', s') of the disorder and occupation at the two
ends of an oriented bond (x, x+e). Every function here is vectorized: arrays of
disorder values and occupations broadcast against each other.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from latgas.errors import ValidationFailure

logger = logging.getLogger(__name__)

RateKind = Literal["random_trap", "metropolis", "long_jump", "custom_table"]


@dataclass
class RateValidationReport:
    """Outcome of a grid check of symmetry, bounds and detailed balance."""

    passed: bool
    kind: str
    symmetry_error: float = 0.0
    detailed_balance_error: float = 0.0
    c_lo: float = 0.0
    c_hi: float = 0.0
    points: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def message(self) -> str:
        if self.passed:
            return (
                f"{self.kind}: passed on {self.points} points "
                f"(symmetry {self.symmetry_error:.2e}, detailed balance {self.detailed_balance_error:.2e}, "
                f"rates in [{self.c_lo:.6g}, {self.c_hi:.6g}])"
            )
        shown = "; ".join(self.violations[:10])
        more = f" (+{len(self.violations) - 10} more)" if len(self.violations) > 10 else ""
        return f"{self.kind}: {len(self.violations)} violations: {shown}{more}"


@dataclass(frozen=True, eq=False)
class RateFamily:
    """A bond-rate function.

    Custom tables are indexed ``table[i, s, j, t]`` (isotropic) or
    ``table[axis, i, s, j, t]`` (one table per direction) where ``i, j`` are letters
    of ``alphabet`` and ``s, t`` occupations.
    """

    kind: RateKind
    alphabet: np.ndarray | None = None
    table: np.ndarray | None = None

    @classmethod
    def builtin(cls, kind: str) -> "RateFamily":
        if kind not in ("random_trap", "metropolis", "long_jump"):
            raise ValueError(f"unknown rate family {kind!r}")
        return cls(kind)

    @classmethod
    def custom(cls, alphabet, table, validate: bool = True, tol: float = 1e-12) -> "RateFamily":
        """Build a table family; invalid tables are rejected unless ``validate`` is False.

        Raises:
            ValidationFailure: If the table breaks symmetry, positivity or detailed balance.
        """
        alphabet = np.asarray(alphabet, dtype=float)
        table = np.asarray(table, dtype=float)
        k = len(alphabet)
        if table.shape not in ((k, 2, k, 2),) and not (table.ndim == 5 and table.shape[1:] == (k, 2, k, 2)):
            raise ValueError(f"table shape {table.shape} does not match alphabet of size {k}")
        family = cls("custom_table", alphabet, table)
        if validate:
            report = family.validate(tol=tol)
            if not report.passed:
                raise ValidationFailure(report.message)
        return family

    @property
    def is_anisotropic(self) -> bool:
        return self.table is not None and self.table.ndim == 5

    def letters(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return np.abs(a[..., None] - self.alphabet).argmin(axis=-1)

    def rate(self, a, s, a2, s2, axis=0) -> np.ndarray:
        """f_e(a, s, a', s') for broadcastable inputs."""
        a = np.asarray(a, dtype=float)
        a2 = np.asarray(a2, dtype=float)
        s = np.asarray(s)
        s2 = np.asarray(s2)
        if self.kind == "long_jump":
            return 1.0 + np.exp(-(a - a2) * (s - s2))
        if self.kind == "custom_table":
            if self.is_anisotropic:
                return self.table[np.asarray(axis), self.letters(a), s, self.letters(a2), s2]
            return self.table[self.letters(a), s, self.letters(a2), s2]
        forward = (s == 1) & (s2 == 0)
        backward = (s == 0) & (s2 == 1)
        if self.kind == "random_trap":
            out = np.where(forward, np.exp(-a), np.where(backward, np.exp(-a2), 1.0))
        else:
            out = np.where(
                forward,
                np.minimum(1.0, np.exp(-(a - a2))),
                np.where(backward, np.minimum(1.0, np.exp(-(a2 - a))), 1.0),
            )
        return np.broadcast_to(out, np.broadcast_shapes(a.shape, a2.shape, s.shape, s2.shape)).astype(float)

    def bounds(self, bound: float = 1.0) -> tuple[float, float]:
        """Lower and upper rate bounds over disorder values in [-bound, bound]."""
        if self.kind == "custom_table":
            return float(self.table.min()), float(self.table.max())
        grid = np.array([-bound, bound])
        a, a2 = np.meshgrid(grid, grid, indexing="ij")
        values = [self.rate(a, s, a2, t) for s, t in itertools.product((0, 1), repeat=2)]
        return float(min(v.min() for v in values)), float(max(v.max() for v in values))

    def validate(self, bound: float = 1.0, grid: int = 200, tol: float = 1e-12) -> RateValidationReport:
        """Check symmetry, strict positivity and detailed balance on a grid.

        Built-in families are checked on a ``grid x grid`` lattice of (a, a') in
        [-bound, bound]; tables on their own alphabet.
        """
        values = self.alphabet if self.kind == "custom_table" else np.linspace(-bound, bound, grid)
        a, a2 = np.meshgrid(values, values, indexing="ij")
        axes = range(self.table.shape[0]) if self.is_anisotropic else [0]
        report = RateValidationReport(passed=True, kind=self.kind, c_lo=np.inf, c_hi=-np.inf)

        for axis, s, t in itertools.product(axes, (0, 1), (0, 1)):
            f = self.rate(a, s, a2, t, axis)
            mirrored = self.rate(a2, t, a, s, axis)
            balanced = self.rate(a, t, a2, s, axis) * np.exp(-(t - s) * (a2 - a))
            scale = np.maximum(np.abs(f), 1e-300)
            sym = np.abs(f - mirrored) / scale
            db = np.abs(f - balanced) / scale
            report.symmetry_error = max(report.symmetry_error, float(sym.max()))
            report.detailed_balance_error = max(report.detailed_balance_error, float(db.max()))
            report.c_lo = min(report.c_lo, float(f.min()))
            report.c_hi = max(report.c_hi, float(f.max()))
            report.points += f.size
            for name, errors in (("symmetry", sym), ("detailed balance", db)):
                for i, j in zip(*np.nonzero(errors > tol)):
                    report.violations.append(
                        f"{name} at (a={a[i, j]:.6g}, s={s}, a'={a2[i, j]:.6g}, s'={t}, axis={axis}): "
                        f"relative error {errors[i, j]:.3e}"
                    )
            for i, j in zip(*np.nonzero(~(f > 0) | ~np.isfinite(f))):
                report.violations.append(f"nonpositive rate {f[i, j]!r} at (a={a[i, j]:.6g}, s={s}, a'={a2[i, j]:.6g}, s'={t})")

        report.passed = not report.violations
        return report


def bond_rate(family: RateFamily, a_x, eta_x, a_y, eta_y, axis=0) -> np.ndarray | float:
    """c_{x,y}(eta) = f_e(alpha_x, eta_x, alpha_y, eta_y)."""
    out = family.rate(a_x, eta_x, a_y, eta_y, axis)
    return float(out) if np.ndim(out) == 0 else out


def exchange(eta: np.ndarray, x: int, y: int) -> np.ndarray:
    """Copy of ``eta`` with the occupations at x and y swapped (on the last axis)."""
    out = np.array(eta, copy=True)
    out[..., [x, y]] = out[..., [y, x]]
    return out


def current(eta: np.ndarray, alpha: np.ndarray, family: RateFamily, x: int, y: int, axis: int = 0):
    """Instantaneous current j_{x,y} = c_{x,y}(eta) (eta_x - eta_y); ``eta`` may be a batch."""
    eta = np.asarray(eta)
    ex, ey = eta[..., x], eta[..., y]
    return family.rate(alpha[x], ex, alpha[y], ey, axis) * (ex.astype(float) - ey)


def apply_generator(
    f: Callable[[np.ndarray], np.ndarray],
    eta: np.ndarray,
    alpha: np.ndarray,
    bonds: np.ndarray,
    family: RateFamily,
    bond_axes: np.ndarray | None = None,
):
    """(L f)(eta) = sum_b c_b(eta) (f(eta^b) - f(eta)) over the given bonds.

    ``f`` maps configurations (last axis = sites) to values and must accept a
    batch; ``eta`` may itself be a batch of configurations.
    """
    eta = np.asarray(eta)
    base = np.asarray(f(eta), dtype=float)
    total = np.zeros_like(base)
    axes = np.zeros(len(bonds), dtype=np.int64) if bond_axes is None else bond_axes
    for (x, y), axis in zip(bonds, axes):
        moved = eta[..., x] != eta[..., y]
        if not np.any(moved):
            continue
        rate = family.rate(alpha[x], eta[..., x], alpha[y], eta[..., y], axis)
        total = total + np.where(moved, rate * (np.asarray(f(exchange(eta, x, y)), dtype=float) - base), 0.0)
    return total


@dataclass
class GradientFit:
    """Least-squares fit of the currents of a ring by a lattice gradient."""

    residual: float
    current_norm: float
    coefficients: np.ndarray = field(repr=False)

    @property
    def relative_residual(self) -> float:
        return self.residual / self.current_norm if self.current_norm > 0 else 0.0


def gradient_residual(family: RateFamily, alpha, radius: int = 1) -> GradientFit:
    """Best fit of j_{x,x+1} by h_x - h_{x+1} on a ring, over all configurations.

    Each h_x is a combination, with site-dependent coefficients, of the monomials
    in the occupations of {x-radius, ..., x+radius}. The fit is exact (zero
    residual) for a constant field and strictly positive otherwise.
    """
    alpha = np.asarray(alpha, dtype=float)
    size = len(alpha)
    window = 2 * radius + 1
    if size < window + 1 or size > 12:
        raise ValueError(f"ring size {size} must be in [{window + 1}, 12]")
    configs = ((np.arange(2**size)[:, None] >> np.arange(size)) & 1).astype(np.int8)
    subsets = list(itertools.product((0, 1), repeat=window))
    n_basis = len(subsets)

    def monomials(x: int) -> np.ndarray:
        sites = [(x + k - radius) % size for k in range(window)]
        local = configs[:, sites]
        return np.stack([np.prod(np.where(np.asarray(mask) == 1, local, 1), axis=1) for mask in subsets], axis=1)

    design = np.zeros((size * len(configs), size * n_basis))
    target = np.zeros(size * len(configs))
    for x in range(size):
        y = (x + 1) % size
        rows = slice(x * len(configs), (x + 1) * len(configs))
        design[rows, x * n_basis : (x + 1) * n_basis] += monomials(x)
        design[rows, y * n_basis : (y + 1) * n_basis] -= monomials(y)
        target[rows] = current(configs, alpha, family, x, y)
    coefficients, *_ = np.linalg.lstsq(design, target, rcond=None)
    residual = float(np.linalg.norm(design @ coefficients - target))
    fit = GradientFit(residual, float(np.linalg.norm(target)), coefficients.reshape(size, n_basis))
    logger.debug(f"gradient fit on ring of {size}: relative residual {fit.relative_residual:.3e}")
    return fit
