"""Connected unions of blocking cubes and their tree-distance combinatorics.

Cubes are indexed on a small integer torus (the grid of cube positions, side
counted in cubes).  A polymer is a connected set of such indices, where
connected means joined through faces, not corners.  The tree distance is the
minimum-spanning-tree length over cube centers in the torus sup metric,
measured in cube units; all inequality checks in this module are stated and
verified for that definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

ENUM_CAP = 500_000


class PolymerCapError(RuntimeError):
    """Enumeration would exceed its configured hard cap."""


@dataclass(frozen=True)
class CubeTorus:
    """Integer torus of cube positions: side cubes per axis."""

    dim: int
    side: int

    def __post_init__(self):
        if self.dim < 1 or self.side < 1:
            raise ValueError("need dim >= 1 and side >= 1")

    @property
    def n_cubes(self) -> int:
        return self.side**self.dim

    def coords(self, flat: int) -> tuple:
        out = []
        for _ in range(self.dim):
            out.append(flat % self.side)
            flat //= self.side
        return tuple(reversed(out))

    def flat(self, coords) -> int:
        out = 0
        for c in coords:
            out = out * self.side + (int(c) % self.side)
        return out

    def neighbors(self, flat: int) -> tuple:
        c = self.coords(flat)
        out = []
        for ax in range(self.dim):
            for step in (-1, 1):
                n = list(c)
                n[ax] = (n[ax] + step) % self.side
                out.append(self.flat(n))
        return tuple(out)

    def distance(self, i: int, j: int) -> int:
        """Sup-metric distance between cube centers, in cube units."""
        a, b = self.coords(i), self.coords(j)
        best = 0
        for x, y in zip(a, b):
            d = abs(x - y)
            d = min(d, self.side - d)
            best = max(best, d)
        return best


def is_connected(torus: CubeTorus, cubes) -> bool:
    cubes = set(int(c) for c in cubes)
    if not cubes:
        raise ValueError("empty cube set")
    seen = set()
    stack = [next(iter(cubes))]
    while stack:
        c = stack.pop()
        if c in seen:
            continue
        seen.add(c)
        for nb in torus.neighbors(c):
            if nb in cubes and nb not in seen:
                stack.append(nb)
    return seen == cubes


@dataclass(frozen=True)
class Polymer:
    torus: CubeTorus
    cubes: tuple

    def __post_init__(self):
        cubes = tuple(sorted(set(int(c) for c in self.cubes)))
        object.__setattr__(self, "cubes", cubes)
        if not is_connected(self.torus, cubes):
            raise ValueError("cube set is not face-connected")

    @property
    def size(self) -> int:
        return len(self.cubes)

    def coords_array(self) -> np.ndarray:
        return np.array([self.torus.coords(c) for c in self.cubes], dtype=np.int64)


@lru_cache(maxsize=None)
def tree_distance(poly: Polymer) -> int:
    """MST length over cube centers (torus sup metric, cube units).

    Kruskal with lexicographic (weight, i, j) tie-breaking, so the result is
    deterministic; the total weight is unique in any case.
    """
    cubes = poly.cubes
    n = len(cubes)
    if n <= 1:
        return 0
    edges = sorted(
        (poly.torus.distance(cubes[i], cubes[j]), i, j)
        for i in range(n)
        for j in range(i + 1, n)
    )
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    total = 0
    picked = 0
    for w, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            total += w
            picked += 1
            if picked == n - 1:
                break
    return total


def is_small(poly: Polymer, block: int) -> bool:
    """Small means tree distance strictly below the blocking ratio."""
    return tree_distance(poly) < block


def enumerate_containing(torus: CubeTorus, base: int, max_size: int) -> list:
    """All polymers containing the base cube, grouped by growth, flat list.

    Exhaustive and duplicate-free; canonical order is (size, sorted cube
    tuple).  Raises PolymerCapError if the level sets exceed ENUM_CAP or if
    max_size reaches the torus volume.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    if max_size >= torus.n_cubes:
        raise PolymerCapError("max_size must stay below the torus volume")
    levels = [{(int(base),)}]
    for _ in range(max_size - 1):
        nxt = set()
        for cubes in levels[-1]:
            inside = set(cubes)
            for c in cubes:
                for nb in torus.neighbors(c):
                    if nb not in inside:
                        nxt.add(tuple(sorted(inside | {nb})))
            if len(nxt) > ENUM_CAP:
                raise PolymerCapError("enumeration exceeded ENUM_CAP")
        levels.append(nxt)
    out = []
    for lev in levels:
        for cubes in sorted(lev):
            out.append(Polymer(torus, cubes))
    return out


def path_count_bound(dim: int, n: int) -> int:
    """Walk-based majorant for the number of size-n polymers on a fixed cube."""
    return (2**dim) ** (2 * (n - 1))


def torus_for_free_counts(dim: int, max_size: int) -> CubeTorus:
    """Torus large enough that counts containing a fixed cube match the free lattice."""
    return CubeTorus(dim, 2 * max_size + 1)


def counting_bounds_report(dim: int, max_size: int, decay_a: float, kappa0: float) -> dict:
    """Partial polymer sums with size and tree-distance decay, plus tail bounds.

    Sums run over polymers containing a fixed cube up to max_size, on a torus
    wide enough to reproduce free-lattice counts.  Tail estimates come from
    the path-count majorant; they are +inf when the decay is too weak for
    that majorant to sum.
    """
    torus = torus_for_free_counts(dim, max_size)
    base = torus.flat([torus.side // 2] * dim)
    polys = enumerate_containing(torus, base, max_size)
    counts = [0] * (max_size + 1)
    sum_size = 0.0
    sum_tree = 0.0
    majorant_ok = True
    for p in polys:
        counts[p.size] += 1
        sum_size += math.exp(-decay_a * p.size)
        sum_tree += math.exp(-kappa0 * tree_distance(p))
    for n in range(1, max_size + 1):
        if counts[n] > path_count_bound(dim, n):
            majorant_ok = False

    growth = (2**dim) ** 2
    # geometric tails of the majorant series
    q_size = growth * math.exp(-decay_a)
    tail_size = math.inf
    if q_size < 1:
        first = math.exp(-decay_a * (max_size + 1)) * growth**max_size
        tail_size = first / (1.0 - q_size)
    # tree-distance tail via |X| <= 3^d (1 + d_M(X))
    q_tree = growth * math.exp(-kappa0 / 3**dim)
    tail_tree = math.inf
    if q_tree < 1:
        first = (
            math.exp(kappa0)
            * math.exp(-kappa0 * (max_size + 1) / 3**dim)
            * growth**max_size
        )
        tail_tree = first / (1.0 - q_tree)
    return {
        "dim": dim,
        "max_size": max_size,
        "counts": counts[1:],
        "sum_size_decay": sum_size,
        "sum_tree_decay": sum_tree,
        "majorant_ok": majorant_ok,
        "growth_rate": math.log(growth),
        "tail_size_decay": tail_size,
        "tail_tree_decay": tail_tree,
        "k0_estimate": sum_tree + tail_tree,
    }


def overlap_sum_check(torus: CubeTorus, target: Polymer, kappa0: float, max_size: int) -> dict:
    """Sum of e^{-kappa0 d_M} over polymers meeting the target vs the per-cube bound."""
    seen = set()
    lhs = 0.0
    per_cube = 0.0
    for base in target.cubes:
        for p in enumerate_containing(torus, base, max_size):
            if p.cubes in seen:
                continue
            seen.add(p.cubes)
            lhs += math.exp(-kappa0 * tree_distance(p))
    base0 = target.cubes[0]
    for p in enumerate_containing(torus, base0, max_size):
        per_cube += math.exp(-kappa0 * tree_distance(p))
    rhs = per_cube * target.size
    return {"lhs": lhs, "rhs": rhs, "ok": lhs <= rhs + 1e-12}


def reblock(poly: Polymer, block: int) -> Polymer:
    """Union of the coarser cubes (side multiplied by block) meeting the polymer."""
    if poly.torus.side % block != 0:
        raise ValueError("cube torus side is not divisible by the block")
    coarse = CubeTorus(poly.torus.dim, poly.torus.side // block)
    cubes = {coarse.flat([c // block for c in poly.torus.coords(q)]) for q in poly.cubes}
    return Polymer(coarse, tuple(sorted(cubes)))


def reblock_distance_check(poly: Polymer, block: int) -> dict:
    """Empirical check that fine tree distance dominates block * coarse distance."""
    fine = tree_distance(poly)
    coarse = tree_distance(reblock(poly, block))
    return {"fine": fine, "coarse": coarse, "ok": fine >= block * coarse}


def superadditivity_check(inner: Polymer, outer: Polymer) -> dict:
    """Tree-distance growth bound when passing to a superset polymer."""
    if inner.torus != outer.torus:
        raise ValueError("polymers live on different cube tori")
    if not set(inner.cubes) <= set(outer.cubes):
        raise ValueError("first polymer must be contained in the second")
    extra = len(set(outer.cubes) - set(inner.cubes))
    lhs = tree_distance(outer)
    rhs = extra + tree_distance(inner)
    return {"lhs": lhs, "rhs": rhs, "ok": lhs <= rhs}


def _parts_linked(parts) -> bool:
    """Overlap-or-touch graph connectivity over a list of polymers."""
    n = len(parts)
    sets = [set(p.cubes) for p in parts]
    torus = parts[0].torus

    def touches(i, j):
        if sets[i] & sets[j]:
            return True
        for a in sets[i]:
            for b in sets[j]:
                if torus.distance(a, b) <= 1:
                    return True
        return False

    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in range(n):
            if j not in seen and touches(i, j):
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def chain_bound_check(parts, whole: Polymer) -> dict:
    """Tree distance of a union against the summed parts plus junction count.

    Requires the parts to cover the whole polymer and to be linked (their
    overlap-or-touch graph connected), mirroring an indivisible cover.
    """
    union = set()
    for p in parts:
        if p.torus != whole.torus:
            raise ValueError("parts live on a different cube torus")
        union |= set(p.cubes)
    if union != set(whole.cubes):
        raise ValueError("parts do not cover the polymer")
    if not _parts_linked(parts):
        raise ValueError("parts are not an indivisible cover")
    lhs = tree_distance(whole)
    rhs = sum(tree_distance(p) for p in parts) + (len(parts) - 1)
    return {"lhs": lhs, "rhs": rhs, "ok": lhs <= rhs}


def transform_polymer(poly: Polymer, axis_perm, flips, shift) -> Polymer:
    """Apply an axis permutation, per-axis reflections, and a translation."""
    torus = poly.torus
    out = []
    for c in poly.cubes:
        coords = poly.torus.coords(c)
        moved = [coords[axis_perm[ax]] for ax in range(torus.dim)]
        moved = [(-m) % torus.side if flips[ax] else m for ax, m in enumerate(moved)]
        moved = [(m + shift[ax]) % torus.side for ax, m in enumerate(moved)]
        out.append(torus.flat(moved))
    return Polymer(torus, tuple(sorted(out)))
