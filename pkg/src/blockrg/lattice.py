"""Periodic lattices, fields, and discrete calculus on them.

A lattice is a d-dimensional torus whose continuum side length is an integer
power of an odd block size L >= 3.  Sites carry integer multi-indices at the
current spacing L**-refine_exp and sit at cell centers, so block averages and
L-fold rescalings are exact integer reindexings (no floating point keys
anywhere).  Inner products weight site sums by spacing**dim, making them
Riemann sums over the torus.
"""

from __future__ import annotations

import base64
import itertools
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

# Dense operator matrices up to this many sites; compressed sparse rows beyond.
DENSE_SITE_CAP = 4096


@dataclass(frozen=True)
class TorusLattice:
    """Torus with side block**side_exp and site spacing block**-refine_exp."""

    dim: int
    block: int
    side_exp: int
    refine_exp: int = 0

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2, or 3")
        if self.block < 3 or self.block % 2 == 0:
            raise ValueError("block size must be odd and >= 3")
        if self.side_exp + self.refine_exp < 0:
            raise ValueError("spacing exceeds the torus side")

    @property
    def sites_per_side(self) -> int:
        return self.block ** (self.side_exp + self.refine_exp)

    @property
    def n_sites(self) -> int:
        return self.sites_per_side**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.sites_per_side,) * self.dim

    @property
    def spacing(self) -> float:
        return float(self.block) ** (-self.refine_exp)

    @property
    def side(self) -> float:
        return float(self.block) ** self.side_exp

    @property
    def volume(self) -> float:
        return self.side**self.dim

    @property
    def site_weight(self) -> float:
        """Weight of one site in inner products: spacing**dim."""
        return self.spacing**self.dim

    def coords(self, flat):
        """Multi-indices of flat site indices, shape (..., dim)."""
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def flat_index(self, multi):
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi[..., mu] % self.sites_per_side for mu in range(self.dim)), self.shape)

    def positions(self) -> np.ndarray:
        """Continuum cell-center positions of all sites, shape (n_sites, dim)."""
        idx = self.coords(np.arange(self.n_sites))
        return (idx + 0.5) * self.spacing

    def shift_perm(self, axis: int, step: int = 1) -> np.ndarray:
        """Permutation p with (shifted f)[i] = f[p[i]], shifting by +step cells along axis."""
        n = self.sites_per_side
        idx = self.coords(np.arange(self.n_sites))
        idx[:, axis] = (idx[:, axis] + step) % n
        return self.flat_index(idx)

    def coarsened(self, levels: int = 1) -> "TorusLattice":
        """Same torus, spacing multiplied by block**levels."""
        return TorusLattice(self.dim, self.block, self.side_exp, self.refine_exp - levels)

    def rescaled(self, up: bool = True) -> "TorusLattice":
        """Companion lattice under one field rescaling (same site count)."""
        s = 1 if up else -1
        return TorusLattice(self.dim, self.block, self.side_exp + s, self.refine_exp - s)


@dataclass(frozen=True, eq=False)
class Field:
    """Flat values attached to a lattice (row-major site order).

    Real input is stored as float64; complex input keeps complex128 so that
    contour evaluations can pass through field-level plumbing.
    """

    lattice: TorusLattice
    values: np.ndarray

    def __post_init__(self):
        dtype = np.complex128 if np.iscomplexobj(self.values) else np.float64
        v = np.asarray(self.values, dtype=dtype).reshape(-1)
        if v.size != self.lattice.n_sites:
            raise ValueError("value count does not match the lattice")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, lattice, c=1.0):
        return cls(lattice, np.full(lattice.n_sites, float(c)))

    @classmethod
    def random(cls, lattice, rng, scale=1.0):
        return cls(lattice, scale * rng.standard_normal(lattice.n_sites))

    @classmethod
    def delta(cls, lattice, site):
        v = np.zeros(lattice.n_sites)
        v[site] = 1.0
        return cls(lattice, v)


def inner_product(lattice: TorusLattice, u, v) -> float:
    """Riemann-sum pairing spacing**dim * sum_x u(x) v(x); bilinear, no conjugation."""
    u = np.asarray(u).reshape(-1)
    v = np.asarray(v).reshape(-1)
    return lattice.site_weight * float(u @ v)


def norm_sq(lattice: TorusLattice, u) -> float:
    return inner_product(lattice, u, u)


def shift_values(lattice: TorusLattice, values, axis: int, step: int = 1):
    grid = np.asarray(values).reshape(lattice.shape)
    return np.roll(grid, -step, axis=axis).reshape(-1)


def forward_derivative(lattice: TorusLattice, values, axis: int):
    """(f(x + spacing e_mu) - f(x)) / spacing with periodic wrap."""
    return (shift_values(lattice, values, axis) - np.asarray(values).reshape(-1)) / lattice.spacing


def gradient_norm_sq(lattice: TorusLattice, values) -> float:
    """sum_mu <d_mu f, d_mu f>."""
    return sum(norm_sq(lattice, forward_derivative(lattice, values, mu)) for mu in range(lattice.dim))


def _identity(n, dense):
    return np.eye(n) if dense else sp.eye_array(n, format="csr")


def shift_matrix(lattice: TorusLattice, axis: int, step: int = 1):
    """Matrix P with (P f)[i] = f at the site one step forward along axis."""
    n = lattice.n_sites
    perm = lattice.shift_perm(axis, step)
    if n <= DENSE_SITE_CAP:
        m = np.zeros((n, n))
        m[np.arange(n), perm] = 1.0
        return m
    return sp.csr_array((np.ones(n), (np.arange(n), perm)), shape=(n, n))


def derivative_matrix(lattice: TorusLattice, axis: int):
    dense = lattice.n_sites <= DENSE_SITE_CAP
    return (shift_matrix(lattice, axis) - _identity(lattice.n_sites, dense)) / lattice.spacing


def laplacian_matrix(lattice: TorusLattice):
    """Lattice Laplacian; symmetric negative semidefinite, kernel = constants."""
    acc = None
    for mu in range(lattice.dim):
        d = derivative_matrix(lattice, mu)
        term = -(d.T @ d)
        acc = term if acc is None else acc + term
    return acc


def laplacian_apply(lattice: TorusLattice, values):
    out = np.zeros(lattice.n_sites)
    s2 = lattice.spacing**2
    v = np.asarray(values).reshape(-1)
    for mu in range(lattice.dim):
        out += (shift_values(lattice, v, mu, 1) - 2.0 * v + shift_values(lattice, v, mu, -1)) / s2
    return out


def scale_field(field: Field, up: bool = True) -> Field:
    """One-step field rescaling, exact on indices.

    Scaling up maps a field on a lattice with side S and spacing s to the
    companion lattice with side L*S and spacing L*s, multiplying values by
    L**-((d-2)/2).  At d=3 this is the usual L**-(1/2).  Scaling down inverts
    it.  Site counts match, so values transfer by identity reindexing.
    """
    lat = field.lattice
    expo = -(lat.dim - 2) / 2.0
    factor = float(lat.block) ** (expo if up else -expo)
    return Field(lat.rescaled(up), field.values * factor)


# ===== regions and Neumann restrictions =====


@dataclass(frozen=True, eq=False)
class Region:
    """Subset of lattice sites with an explicit bond list.

    ``sites`` are torus flat indices (region-local order is their order in
    the tuple); ``bonds`` are region-local index pairs (p, q, axis) defining
    the Neumann quadratic form sum (f_p - f_q)^2 / spacing^2.
    """

    lattice: TorusLattice
    sites: tuple
    bonds: tuple

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def local_index(self):
        return {s: i for i, s in enumerate(self.sites)}


def box_region(lattice: TorusLattice, anchor, shape, wrap: bool = False) -> Region:
    """Axis-aligned box of sites, cut open at its faces (Neumann) unless wrap.

    The box may span the full torus side along an axis; without wrap the seam
    bonds are cut, which is how enlarged parametrix cubes are treated even
    when they cover the whole torus.
    """
    n = lattice.sites_per_side
    anchor = tuple(int(a) % n for a in anchor)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 or s > n for s in shape):
        raise ValueError("box shape must be within the torus side")
    if wrap and any(s != n for s in shape):
        raise ValueError("wrap requires the box to cover the torus")
    offsets = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).reshape(-1, lattice.dim)
    multis = (np.asarray(anchor) + offsets) % n
    sites = tuple(int(i) for i in lattice.flat_index(multis))
    local = np.arange(len(sites)).reshape(shape)
    bonds = []
    for mu in range(lattice.dim):
        if shape[mu] == 1 and not wrap:
            continue
        a = local
        b = np.roll(local, -1, axis=mu)
        take = [slice(None)] * lattice.dim
        if not wrap:
            take[mu] = slice(0, shape[mu] - 1)
        pa = a[tuple(take)].reshape(-1)
        pb = b[tuple(take)].reshape(-1)
        bonds.extend((int(p), int(q), mu) for p, q in zip(pa, pb))
    return Region(lattice, sites, tuple(bonds))


def whole_torus_region(lattice: TorusLattice) -> Region:
    return box_region(lattice, (0,) * lattice.dim, lattice.shape, wrap=True)


def site_union_region(lattice: TorusLattice, sites) -> Region:
    """Region on an arbitrary site set; bonds are torus-adjacent pairs inside it."""
    sites = tuple(sorted(int(s) for s in set(sites)))
    local = {s: i for i, s in enumerate(sites)}
    bonds = []
    for mu in range(lattice.dim):
        perm = lattice.shift_perm(mu)
        for s in sites:
            t = int(perm[s])
            if t in local and t != s:
                bonds.append((local[s], local[t], mu))
    return Region(lattice, sites, tuple(bonds))


def neumann_laplacian(region: Region):
    """Negative semidefinite Neumann Laplacian on the region's bond graph."""
    m = region.n_sites
    s2 = region.lattice.spacing**2
    a = np.zeros((m, m))
    for p, q, _mu in region.bonds:
        a[p, p] -= 1.0 / s2
        a[q, q] -= 1.0 / s2
        a[p, q] += 1.0 / s2
        a[q, p] += 1.0 / s2
    return a


# ===== torus metric =====


def torus_supdist(lattice: TorusLattice, i, j) -> float:
    """Periodic sup-metric distance between sites, in continuum units."""
    a = lattice.coords(i).astype(np.float64)
    b = lattice.coords(j).astype(np.float64)
    n = lattice.sites_per_side
    d = np.abs(a - b)
    d = np.minimum(d, n - d)
    return float(np.max(d)) * lattice.spacing


def pairwise_supdist(lattice: TorusLattice, sites_a, sites_b) -> np.ndarray:
    """Matrix of periodic sup distances between two site lists (continuum units)."""
    from blockrg import _kernels

    a = lattice.coords(np.asarray(sites_a))
    b = lattice.coords(np.asarray(sites_b))
    return _kernels.pairwise_torus_supdist(a, b, lattice.sites_per_side) * lattice.spacing


# ===== serialization =====


def save_field(field: Field, path, m: int, vol_exp: int, n_steps: int) -> None:
    """Write a field as a JSON descriptor plus little-endian float64 payload.

    The descriptor records (d, L, m, M, N, k) with side_exp = M + N - k and
    refine_exp = k; m is the cube-grid exponent carried for consumers.
    """
    lat = field.lattice
    k = lat.refine_exp
    if vol_exp + n_steps - k != lat.side_exp:
        raise ValueError("M + N - k must equal the lattice side exponent")
    doc = {
        "d": lat.dim,
        "L": lat.block,
        "m": int(m),
        "M": int(vol_exp),
        "N": int(n_steps),
        "k": int(k),
        "dtype": "<f8",
        "values": base64.b64encode(field.values.astype("<f8").tobytes()).decode("ascii"),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_field(path):
    """Inverse of save_field; returns (Field, metadata dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    needed = {"d", "L", "m", "M", "N", "k", "dtype", "values"}
    if set(doc) != needed:
        raise ValueError(f"bad field file: keys {sorted(doc)}")
    if doc["dtype"] != "<f8":
        raise ValueError("only little-endian float64 payloads are supported")
    lat = TorusLattice(doc["d"], doc["L"], doc["M"] + doc["N"] - doc["k"], doc["k"])
    values = np.frombuffer(base64.b64decode(doc["values"]), dtype="<f8").astype(np.float64)
    return Field(lat, values), {"m": doc["m"], "M": doc["M"], "N": doc["N"], "k": doc["k"]}


# ===== cube grids (shared by polymers, partitions of unity, functionals) =====


@dataclass(frozen=True)
class CubeGrid:
    """Grid of axis-aligned cubes of continuum side block**cube_exp."""

    lattice: TorusLattice
    cube_exp: int

    def __post_init__(self):
        if self.cube_exp < 0 or self.cube_exp > self.lattice.side_exp:
            raise ValueError("cube side must be between one unit and the torus side")
        if self.cube_exp + self.lattice.refine_exp < 0:
            raise ValueError("cube side must be at least one site")

    @property
    def cube_side(self) -> float:
        return float(self.lattice.block) ** self.cube_exp

    @property
    def cubes_per_side(self) -> int:
        return self.lattice.block ** (self.lattice.side_exp - self.cube_exp)

    @property
    def n_cubes(self) -> int:
        return self.cubes_per_side**self.lattice.dim

    @property
    def sites_per_cube_side(self) -> int:
        return self.lattice.block ** (self.cube_exp + self.lattice.refine_exp)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cubes_per_side,) * self.lattice.dim

    def cube_coords(self, flat):
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def cube_flat(self, multi):
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi[..., mu] % self.cubes_per_side for mu in range(self.lattice.dim)), self.shape)

    def cube_of_site(self, site_flat):
        m = self.lattice.coords(site_flat) // self.sites_per_cube_side
        return self.cube_flat(m)

    def sites_of_cube(self, cube_flat) -> np.ndarray:
        w = self.sites_per_cube_side
        base = self.cube_coords(cube_flat) * w
        offs = np.stack(np.meshgrid(*[np.arange(w)] * self.lattice.dim, indexing="ij"), axis=-1).reshape(-1, self.lattice.dim)
        return np.asarray(self.lattice.flat_index(base + offs)).reshape(-1)

    def cube_center(self, cube_flat) -> np.ndarray:
        """Continuum center of a cube."""
        return (self.cube_coords(cube_flat) + 0.5) * self.cube_side

    def coarsened(self, levels: int = 1) -> "CubeGrid":
        return CubeGrid(self.lattice, self.cube_exp + levels)
