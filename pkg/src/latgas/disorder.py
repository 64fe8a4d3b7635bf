"""Quenched disorder: laws and fields.

A field is a pure function of (law, geometry, seed): site ``i`` receives the
inverse-CDF image of the ``i``-th uniform of a Philox stream keyed by the seed.
"""

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate

from latgas.errors import NumericalError
from latgas.lattice import TorusGeometry, make_torus

logger = logging.getLogger(__name__)

DEFAULT_BINS = 5
PROB_SUM_TOL = 1e-12


class DisorderLaw(BaseModel):
    """Single-site law of the disorder, supported in [-bound, bound]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["constant", "uniform_continuous", "discrete"]
    bound: float = Field(default=1.0, gt=0)
    value: float = 0.0
    values: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    @model_validator(mode="after")
    def _check_support(self) -> "DisorderLaw":
        if self.kind == "constant" and abs(self.value) > self.bound:
            raise ValueError(f"constant {self.value} outside [-{self.bound}, {self.bound}]")
        if self.kind == "discrete":
            if not self.values or len(self.values) != len(self.probs):
                raise ValueError("discrete law needs matching, nonempty values and probs")
            if any(abs(v) > self.bound for v in self.values):
                raise ValueError(f"discrete support {list(self.values)} outside [-{self.bound}, {self.bound}]")
            if any(p < 0 for p in self.probs):
                raise ValueError("discrete probabilities must be nonnegative")
            if abs(sum(self.probs) - 1.0) > PROB_SUM_TOL:
                raise ValueError(f"discrete probabilities sum to {sum(self.probs)!r}, not 1")
        return self

    @classmethod
    def constant(cls, c: float = 0.0, bound: float = 1.0) -> "DisorderLaw":
        return cls(kind="constant", value=c, bound=bound)

    @classmethod
    def uniform(cls, bound: float = 1.0) -> "DisorderLaw":
        return cls(kind="uniform_continuous", bound=bound)

    @classmethod
    def discrete(cls, values, probs, bound: float = 1.0) -> "DisorderLaw":
        return cls(kind="discrete", values=tuple(map(float, values)), probs=tuple(map(float, probs)), bound=bound)

    @property
    def is_discrete(self) -> bool:
        return self.kind != "uniform_continuous"

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Support points and weights of a discrete or constant law."""
        if self.kind == "constant":
            return np.array([self.value]), np.array([1.0])
        if self.kind == "discrete":
            return np.asarray(self.values, dtype=float), np.asarray(self.probs, dtype=float)
        raise ValueError("continuous law has no atoms; use binned() first")

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF applied to uniforms in [0, 1)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full(u.shape, self.value)
        if self.kind == "uniform_continuous":
            return -self.bound + 2.0 * self.bound * u
        values, probs = self.atoms()
        cells = np.searchsorted(np.cumsum(probs), u, side="right")
        return values[np.minimum(cells, len(values) - 1)]

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.ppf(rng.random(size))

    def expectation(self, f: Callable, tol: float = 1e-10) -> float:
        """E[f(alpha)]: exact sum for atomic laws, adaptive quadrature otherwise.

        Args:
            f: Function of one disorder value; for atomic laws it is called on the
                array of atoms and must broadcast.
            tol: Absolute tolerance demanded from the quadrature.

        Raises:
            NumericalError: If quadrature reports an error estimate above ``tol``.
        """
        if self.is_discrete:
            values, probs = self.atoms()
            return float(np.dot(probs, np.broadcast_to(np.asarray(f(values), dtype=float), values.shape)))
        density = 1.0 / (2.0 * self.bound)
        value, abserr = integrate.quad(
            lambda a: float(f(a)) * density, -self.bound, self.bound, epsabs=tol * 1e-2, epsrel=1e-13, limit=200
        )
        if abserr > tol:
            raise NumericalError(f"law expectation did not converge: achieved {abserr:.3e} > {tol:.1e}")
        return float(value)

    def binned(self, bins: int = DEFAULT_BINS) -> "DisorderLaw":
        """Finite-alphabet version of the law; atomic laws are returned unchanged.

        A continuous law becomes ``bins`` equal-mass quantile cells represented by
        their conditional means.
        """
        if self.is_discrete:
            return self
        if bins < 1:
            raise ValueError(f"bin count must be >= 1, got {bins}")
        width = 2.0 * self.bound / bins
        mids = -self.bound + width * (np.arange(bins) + 0.5)
        return DisorderLaw.discrete(mids, np.full(bins, 1.0 / bins), bound=self.bound)

    def alphabet_size(self, bins: int = DEFAULT_BINS) -> int:
        return len(self.binned(bins).values) if self.kind != "constant" else 1

    def bin_index(self, alpha: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
        """Letter of the finite alphabet each disorder value belongs to."""
        alpha = np.asarray(alpha, dtype=float)
        if self.kind == "constant":
            return np.zeros(alpha.shape, dtype=np.int64)
        if self.kind == "discrete":
            values = np.asarray(self.values)
            return np.abs(alpha[..., None] - values).argmin(axis=-1).astype(np.int64)
        cells = np.floor((alpha + self.bound) / (2.0 * self.bound) * bins).astype(np.int64)
        return np.clip(cells, 0, bins - 1)

    def enumerate_patterns(self, n_sites: int) -> tuple[np.ndarray, np.ndarray]:
        """Every disorder pattern on ``n_sites`` sites with its probability."""
        values, probs = self.atoms()
        index = np.asarray(list(itertools.product(range(len(values)), repeat=n_sites)), dtype=np.int64)
        index = index.reshape(-1, n_sites)
        return values[index], np.prod(probs[index], axis=1)


def field_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def window_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent stream for the disorder window labelled ``index`` within a run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


@dataclass(frozen=True, eq=False)
class DisorderField:
    """Frozen disorder values on every site of a torus."""

    geometry: TorusGeometry
    law: DisorderLaw
    seed: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (self.geometry.n_sites,):
            raise ValueError(f"field has shape {self.values.shape}, expected ({self.geometry.n_sites},)")
        self.values.setflags(write=False)

    def restrict(self, sites) -> np.ndarray:
        return self.values[np.asarray(sites, dtype=np.int64)]

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["site", "alpha"])
            for site, value in enumerate(self.values):
                writer.writerow([site, f"{value:.17g}"])

    @classmethod
    def from_csv(cls, path: Path, geometry: TorusGeometry, law: DisorderLaw, seed: int = 0) -> "DisorderField":
        values = np.zeros(geometry.n_sites)
        with open(path, newline="") as handle:
            for row in csv.DictReader(handle):
                values[int(row["site"])] = float(row["alpha"])
        return cls(geometry, law, seed, values)

    def to_json(self) -> str:
        return json.dumps(
            {
                "geometry": self.geometry.to_dict(),
                "law": self.law.model_dump(),
                "seed": self.seed,
                "values": [float(v) for v in self.values],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DisorderField":
        data = json.loads(text)
        return cls(
            make_torus(data["geometry"]["dims"]),
            DisorderLaw.model_validate(data["law"]),
            int(data["seed"]),
            np.asarray(data["values"], dtype=float),
        )


def sample_field(law: DisorderLaw, geometry: TorusGeometry, seed: int) -> DisorderField:
    """Draw an i.i.d. field; identical (law, geometry, seed) gives identical values."""
    values = law.ppf(field_rng(seed).random(geometry.n_sites))
    logger.debug(f"sampled {law.kind} field on {geometry.dims} with seed {seed}")
    return DisorderField(geometry, law, int(seed), values)


def field_from_values(values, law: DisorderLaw | None = None) -> DisorderField:
    """Wrap explicit values on a ring; used for hand-made instances."""
    values = np.asarray(values, dtype=float)
    bound = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
    law = law or DisorderLaw.uniform(bound)
    return DisorderField(make_torus([len(values)]), law, 0, values)
