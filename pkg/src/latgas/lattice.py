"""Periodic lattice geometry.

Sites of a d-dimensional torus are addressed by a flat row-major index; every
other module works with flat indices. Boxes are returned as index arrays in
row-major order of their offsets, so that two boxes of the same shape line up
site by site after a translation.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_DIMENSION = 3


class GeometryError(ValueError):
    """Invalid torus, box or direction."""


Site = int | Sequence[int]


@dataclass(frozen=True)
class TorusGeometry:
    """Discrete torus with side lengths ``dims`` (sites per axis)."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.dims) <= MAX_DIMENSION:
            raise GeometryError(f"dimension must be in 1..{MAX_DIMENSION}, got {len(self.dims)}")
        if any(int(n) < 2 for n in self.dims):
            raise GeometryError(f"every side length must be >= 2, got {list(self.dims)}")

    @property
    def d(self) -> int:
        return len(self.dims)

    @cached_property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    @cached_property
    def strides(self) -> np.ndarray:
        strides = np.ones(self.d, dtype=np.int64)
        for axis in range(self.d - 2, -1, -1):
            strides[axis] = strides[axis + 1] * self.dims[axis + 1]
        return strides

    @cached_property
    def _dims_array(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.int64)

    def index(self, coords: Sequence[int] | np.ndarray) -> np.ndarray | int:
        """Flat index of (possibly unreduced) coordinates; accepts shape (..., d)."""
        coords = np.asarray(coords, dtype=np.int64)
        flat = (np.mod(coords, self._dims_array) * self.strides).sum(axis=-1)
        return int(flat) if flat.ndim == 0 else flat

    def coords(self, index: int | np.ndarray) -> np.ndarray:
        """Canonical coordinates of flat indices; result has shape (..., d)."""
        index = np.asarray(index, dtype=np.int64)
        return (index[..., None] // self.strides) % self._dims_array

    def site(self, site: Site) -> int:
        """Normalize a site given as flat index or coordinate tuple."""
        if isinstance(site, (int, np.integer)):
            if not 0 <= int(site) < self.n_sites:
                raise GeometryError(f"site index {site} outside [0, {self.n_sites})")
            return int(site)
        if len(site) != self.d:
            raise GeometryError(f"expected {self.d} coordinates, got {len(site)}")
        return self.index(site)

    def shift(self, sites: int | np.ndarray, offset: Sequence[int]) -> np.ndarray | int:
        """Translate flat indices by an integer offset vector."""
        return self.index(self.coords(sites) + np.asarray(offset, dtype=np.int64))

    def unit(self, axis: int, sign: int = 1) -> np.ndarray:
        if not 0 <= axis < self.d:
            raise GeometryError(f"axis {axis} outside 0..{self.d - 1}")
        vector = np.zeros(self.d, dtype=np.int64)
        vector[axis] = 1 if sign >= 0 else -1
        return vector

    def neighbor(self, sites: int | np.ndarray, axis: int, sign: int = 1) -> np.ndarray | int:
        return self.shift(sites, self.unit(axis, sign))

    @cached_property
    def directed_pairs(self) -> np.ndarray:
        """All (x, x+e) pairs, d * n_sites rows, before deduplication."""
        sites = np.arange(self.n_sites, dtype=np.int64)
        return np.concatenate(
            [np.stack([sites, self.neighbor(sites, axis)], axis=1) for axis in range(self.d)]
        )

    @cached_property
    def _bond_table(self) -> tuple[np.ndarray, np.ndarray]:
        seen: set[tuple[int, int]] = set()
        pairs: list[tuple[int, int]] = []
        axes: list[int] = []
        directed = self.directed_pairs
        for row, (x, y) in enumerate(directed):
            key = (min(x, y), max(x, y))
            if key in seen:
                continue
            seen.add(key)
            pairs.append((int(x), int(y)))
            axes.append(row // self.n_sites)
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2), np.asarray(axes, dtype=np.int64)

    @property
    def bonds(self) -> np.ndarray:
        """Distinct nearest-neighbour bonds as oriented (x, x+e) rows."""
        return self._bond_table[0]

    @property
    def bond_axes(self) -> np.ndarray:
        return self._bond_table[1]

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims)}


def make_torus(dims: Sequence[int]) -> TorusGeometry:
    """Build a torus; raises GeometryError for d outside 1..3 or sides < 2."""
    geometry = TorusGeometry(tuple(int(n) for n in dims))
    logger.debug(f"torus {geometry.dims}: {geometry.n_sites} sites, {geometry.n_bonds} bonds")
    return geometry


@dataclass(frozen=True)
class Box:
    """A set of torus sites; cubes keep their center and radius."""

    sites: np.ndarray = field(repr=False)
    center: int | None = None
    radius: int | None = None

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site: int) -> bool:
        return int(site) in set(self.sites.tolist())


def cube_offsets(radius: int, d: int) -> np.ndarray:
    """Offsets of the cube of side 2*radius+1 in row-major order, shape (n, d)."""
    span = range(-radius, radius + 1)
    return np.asarray(list(itertools.product(span, repeat=d)), dtype=np.int64).reshape(-1, d)


def box_sites(center: Site, ell: int, geometry: TorusGeometry) -> np.ndarray:
    """Sites of the cube of side 2*ell+1 centered at ``center``, wrap-reduced.

    Raises:
        GeometryError: if the cube does not fit in the torus without overlap.
    """
    if ell < 0:
        raise GeometryError(f"box radius must be >= 0, got {ell}")
    if 2 * ell + 1 > min(geometry.dims):
        raise GeometryError(f"box of side {2 * ell + 1} does not fit in torus {list(geometry.dims)}")
    origin = geometry.coords(geometry.site(center))
    return geometry.index(origin + cube_offsets(ell, geometry.d))


def cube(center: Site, ell: int, geometry: TorusGeometry) -> Box:
    return Box(box_sites(center, ell, geometry), center=geometry.site(center), radius=ell)


def paired_boxes(center: Site, n: int, axis: int, geometry: TorusGeometry, sign: int = 1) -> tuple[Box, Box]:
    """The two adjacent cubes of side ``n`` across the hyperplane through ``center``.

    With n = 2l'+1 the first cube is centered at center-(l'+1)e and the second at
    center+l'e, so for n=1 the pair is ({center-e}, {center}).

    Returns:
        (negative side, positive side) along e = sign * unit(axis).
    """
    if n < 1 or n % 2 == 0:
        raise GeometryError(f"paired boxes need an odd side, got {n}")
    if 2 * n > geometry.dims[axis]:
        raise GeometryError(f"two boxes of side {n} overlap on a torus side {geometry.dims[axis]}")
    if n > min(geometry.dims):
        raise GeometryError(f"box of side {n} does not fit in torus {list(geometry.dims)}")
    half = (n - 1) // 2
    e = geometry.unit(axis, sign)
    origin = geometry.coords(geometry.site(center))
    first_center = geometry.index(origin - (half + 1) * e)
    second_center = geometry.index(origin + half * e)
    return cube(first_center, half, geometry), cube(second_center, half, geometry)


def translate_sites(sites: np.ndarray, offset: Sequence[int], geometry: TorusGeometry) -> np.ndarray:
    return geometry.shift(np.asarray(sites, dtype=np.int64), offset)


def region_bonds(geometry: TorusGeometry, sites: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Bonds of the torus with both endpoints in ``sites``.

    Returns:
        (pairs, axes) where pairs holds positions *within* ``sites`` (local indices).
    """
    sites = np.asarray(sites, dtype=np.int64)
    local = {int(site): position for position, site in enumerate(sites)}
    pairs, axes = [], []
    for (x, y), axis in zip(geometry.bonds, geometry.bond_axes):
        if int(x) in local and int(y) in local:
            pairs.append((local[int(x)], local[int(y)]))
            axes.append(int(axis))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2), np.asarray(axes, dtype=np.int64)


def open_box(shape: Sequence[int]) -> tuple[TorusGeometry, np.ndarray]:
    """An open parallelepiped with the given side lengths.

    The box is embedded in a torus one site longer per axis so that no bond wraps
    around inside the region.
    """
    shape = [int(side) for side in shape]
    if any(side < 1 for side in shape):
        raise GeometryError(f"box sides must be >= 1, got {shape}")
    geometry = make_torus([side + 1 for side in shape])
    coords = np.asarray(list(itertools.product(*[range(side) for side in shape])), dtype=np.int64)
    return geometry, geometry.index(coords.reshape(-1, len(shape)))
