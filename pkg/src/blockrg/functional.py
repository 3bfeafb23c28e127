"""Localized field functionals on cube polymers.

A functional stores, per polymer, a list of monomial terms in the field and
its forward derivative (plus optional opaque evaluators).  The module covers
evaluation, directional derivatives, analytic/sampled norm certificates,
field-domain membership, rescaling to the next-coarser lattice, reblocking
onto larger cubes, and extraction of the relevant (energy and mass) parts.

Gradient monomials sum over bonds internal to the polymer, so a term never
reads the field outside its own cubes.  For the same reason the gradient
extraction below divides by the summed internal-bond volume instead of the
continuum volume; this keeps the normalization conditions exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from blockrg.lattice import (
    CubeGrid,
    Field,
    TorusLattice,
    forward_derivative,
    scale_field,
)
from blockrg.polymer import CubeTorus, Polymer, is_small
from blockrg.polymer import reblock as reblock_polymer
from blockrg.polymer import transform_polymer, tree_distance

NORM_SAMPLE_FIELDS = 8


@dataclass(frozen=True)
class FieldDomainSpec:
    """Analyticity-domain data tied to the running quartic coupling.

    Field bounds scale as powers of the coupling; p_k and p0_k are the
    slowly growing logarithmic thresholds used by the large-field cutoffs.
    """

    coupling: float
    epsilon: float = 0.01
    alpha: float = 0.6
    p: int = 2
    p0: int = 1

    def __post_init__(self):
        if not 0.0 < self.coupling < 1.0:
            raise ValueError("coupling must lie in (0, 1)")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("Holder exponent must lie in (1/2, 1)")
        if not (isinstance(self.p0, int) and isinstance(self.p, int) and 0 < self.p0 < self.p):
            raise ValueError("need integer thresholds 0 < p0 < p")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def bound_field(self) -> float:
        return self.coupling ** (-0.25 - 3 * self.epsilon)

    @property
    def bound_grad(self) -> float:
        return self.coupling ** (-0.25 - 2 * self.epsilon)

    @property
    def bound_holder(self) -> float:
        return self.coupling ** (-0.25 - self.epsilon)

    @property
    def p_k(self) -> float:
        return (-math.log(self.coupling)) ** self.p

    @property
    def p0_k(self) -> float:
        return (-math.log(self.coupling)) ** self.p0

    def rescaled(self, block: int) -> "FieldDomainSpec":
        """Domain for the next level: the coupling grows by the block side."""
        return replace(self, coupling=self.coupling * block)


def holder_increment_max(lattice: TorusLattice, values: np.ndarray, alpha: float) -> float:
    """Largest |v(x)-v(x')| / d(x,x')^alpha over site pairs with d <= 1."""
    pos = lattice.positions()
    n = lattice.n_sites
    if n > 2048:
        raise ValueError("Holder increments need a dense pair table; lattice too large")
    diff = np.abs(pos[:, None, :] - pos[None, :, :])
    diff = np.minimum(diff, lattice.side - diff)
    dist = diff.max(axis=-1)
    mask = (dist > 0) & (dist <= 1.0)
    if not mask.any():
        return 0.0
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64).reshape(n, -1).T)
    best = 0.0
    for comp in vals:
        inc = np.abs(comp[:, None] - comp[None, :])[mask] / dist[mask] ** alpha
        best = max(best, float(inc.max()))
    return best


def gradient_stack(lattice: TorusLattice, values: np.ndarray) -> np.ndarray:
    """Forward derivative along every axis, stacked as (dim, sites)."""
    return np.stack([forward_derivative(lattice, values, ax) for ax in range(lattice.dim)])


def domain_membership(lattice: TorusLattice, values, spec: FieldDomainSpec, rho: float = 1.0) -> dict:
    """Test the three analyticity-domain bounds, scaled by rho."""
    values = np.asarray(values)
    grads = gradient_stack(lattice, values)
    sup_f = float(np.max(np.abs(values)))
    sup_g = float(np.max(np.abs(grads)))
    sup_h = holder_increment_max(lattice, grads.T, spec.alpha)
    checks = {
        "field": (sup_f, rho * spec.bound_field),
        "gradient": (sup_g, rho * spec.bound_grad),
        "holder": (sup_h, rho * spec.bound_holder),
    }
    failing = [name for name, (got, cap) in checks.items() if got >= cap]
    return {"member": not failing, "failing": failing, "checks": checks}


# ===== geometry =====


@dataclass(frozen=True)
class FunctionalGeometry:
    """Cube decomposition of a lattice plus the matching cube torus."""

    lattice: TorusLattice
    cube_exp: int

    @property
    def grid(self) -> CubeGrid:
        return CubeGrid(self.lattice, self.cube_exp)

    @property
    def cube_torus(self) -> CubeTorus:
        return CubeTorus(self.lattice.dim, self.grid.cubes_per_side)

    def polymer(self, cubes) -> Polymer:
        return Polymer(self.cube_torus, tuple(cubes))

    def sites_of(self, poly: Polymer) -> np.ndarray:
        return _polymer_sites(self.lattice, self.cube_exp, poly.cubes)

    def volume(self, poly: Polymer) -> float:
        return float(len(self.sites_of(poly))) * self.lattice.site_weight

    def rescaled_down(self) -> "FunctionalGeometry":
        """Same sites on the next-coarser lattice; cubes shrink by one level."""
        return FunctionalGeometry(self.lattice.rescaled(up=False), self.cube_exp - 1)

    def reblocked(self) -> "FunctionalGeometry":
        return FunctionalGeometry(self.lattice, self.cube_exp + 1)


@lru_cache(maxsize=None)
def _polymer_sites(lattice: TorusLattice, cube_exp: int, cubes: tuple) -> np.ndarray:
    grid = CubeGrid(lattice, cube_exp)
    out = np.concatenate([grid.sites_of_cube(c) for c in cubes])
    out = np.sort(out)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _bond_anchors(lattice: TorusLattice, cube_exp: int, cubes: tuple, direction: int) -> np.ndarray:
    """Sites of the polymer whose +direction neighbor is also inside it."""
    sites = _polymer_sites(lattice, cube_exp, cubes)
    inside = np.zeros(lattice.n_sites, dtype=bool)
    inside[sites] = True
    step = np.zeros(lattice.dim, dtype=int)
    step[direction] = 1
    nbr = np.asarray(lattice.flat_index(lattice.coords(sites) + step))
    out = sites[inside[nbr]]
    out.flags.writeable = False
    return out


# ===== terms =====


@dataclass(frozen=True)
class MonomialTerm:
    """coeff * sum over anchor sites of w * s^d * phi^p * (D_mu phi)^q.

    With sites=None the anchors are every site of the polymer (q = 0) or
    every internal bond start (q >= 1); an explicit site array freezes the
    anchors, which is how reblocked terms keep their original value.
    """

    coeff: float
    field_power: int
    grad_power: int = 0
    direction: int = 0
    sites: tuple | None = None
    weights: tuple | None = None

    def __post_init__(self):
        if self.field_power < 0 or self.grad_power < 0:
            raise ValueError("powers must be nonnegative")
        if self.weights is not None and self.sites is None:
            raise ValueError("per-site weights require explicit sites")
        if self.weights is not None and len(self.weights) != len(self.sites):
            raise ValueError("one weight per site required")

    def anchors(self, geometry: FunctionalGeometry, poly: Polymer) -> np.ndarray:
        if self.sites is not None:
            return np.asarray(self.sites, dtype=int)
        if self.grad_power >= 1:
            return _bond_anchors(geometry.lattice, geometry.cube_exp, poly.cubes, self.direction)
        return geometry.sites_of(poly)


@dataclass(frozen=True)
class OpaqueTerm:
    """Black-box evaluator fn(site_array, phi_values) -> scalar.

    domain_multiplier declares the analyticity-domain multiple the
    evaluator tolerates; derivatives fall back to finite differences.
    """

    fn: object
    domain_multiplier: float = 1.0


def local_term(coeff: float, field_power: int, grad_power: int = 0, direction: int = 0) -> MonomialTerm:
    return MonomialTerm(float(coeff), field_power, grad_power, direction)


@dataclass(frozen=True)
class LocalFunctional:
    """Map polymer -> term tuple over a fixed cube geometry."""

    geometry: FunctionalGeometry
    terms: tuple  # of (Polymer, (term, ...)) pairs, one per polymer
    even: bool = True
    symmetric: bool = False

    def __post_init__(self):
        seen = set()
        for poly, term_list in self.terms:
            if poly.torus != self.geometry.cube_torus:
                raise ValueError("polymer lives on a different cube torus")
            if poly in seen:
                raise ValueError("duplicate polymer entry")
            seen.add(poly)
            for t in term_list:
                if isinstance(t, MonomialTerm):
                    if self.even and (t.field_power + t.grad_power) % 2:
                        raise ValueError("odd monomial in an even functional")
                    if t.direction >= self.geometry.lattice.dim:
                        raise ValueError("gradient direction out of range")
                    if t.sites is not None:
                        own = set(self.geometry.sites_of(poly).tolist())
                        if not set(t.sites) <= own:
                            raise ValueError("explicit sites leave the polymer")

    @classmethod
    def from_dict(cls, geometry: FunctionalGeometry, term_map: dict, even: bool = True, symmetric: bool = False) -> "LocalFunctional":
        items = tuple(sorted(((p, tuple(ts)) for p, ts in term_map.items()), key=lambda kv: kv[0].cubes))
        return cls(geometry, items, even, symmetric)

    @property
    def term_map(self) -> dict:
        return dict(self.terms)

    def polymers(self) -> tuple:
        return tuple(p for p, _ in self.terms)


def evaluate(E: LocalFunctional, poly: Polymer, phi, spec: FieldDomainSpec | None = None, rho: float = 1.0):
    """E(X, phi); optionally enforces domain membership first."""
    lattice = E.geometry.lattice
    values = phi.values if isinstance(phi, Field) else np.asarray(phi)
    if spec is not None:
        report = domain_membership(lattice, values.real if np.iscomplexobj(values) else values, spec, rho)
        if not report["member"]:
            raise ValueError(f"field outside domain: {', '.join(report['failing'])} bound")
    term_list = E.term_map.get(poly)
    if term_list is None:
        return 0.0
    s_d = lattice.site_weight
    total = 0.0
    grads = {}
    for t in term_list:
        if isinstance(t, OpaqueTerm):
            total = total + t.fn(E.geometry.sites_of(poly), values)
            continue
        anchors = t.anchors(E.geometry, poly)
        acc = np.full(anchors.shape, t.coeff * s_d, dtype=values.dtype)
        if t.weights is not None:
            acc = acc * np.asarray(t.weights)
        if t.field_power:
            acc = acc * values[anchors] ** t.field_power
        if t.grad_power:
            if t.direction not in grads:
                grads[t.direction] = forward_derivative(lattice, values, t.direction)
            acc = acc * grads[t.direction][anchors] ** t.grad_power
        total = total + acc.sum()
    return total if np.iscomplexobj(values) else float(total)


def total_value(E: LocalFunctional, phi) -> float:
    return sum(evaluate(E, p, phi) for p, _ in E.terms)


def _falling(p: int, a: int) -> int:
    out = 1
    for i in range(a):
        out *= p - i
    return out


def derivative(E: LocalFunctional, poly: Polymer, phi0, directions) -> float:
    """n-th directional derivative at phi0; exact for monomial terms."""
    n = len(directions)
    if n > 4:
        raise ValueError("derivatives supported up to order four")
    lattice = E.geometry.lattice
    base = phi0.values if isinstance(phi0, Field) else np.asarray(phi0, dtype=np.float64)
    dirs = [f.values if isinstance(f, Field) else np.asarray(f, dtype=np.float64) for f in directions]
    term_list = E.term_map.get(poly)
    if term_list is None:
        return 0.0
    s_d = lattice.site_weight
    total = 0.0
    for t in term_list:
        if isinstance(t, OpaqueTerm):
            total += _fd_derivative(E, poly, t, base, dirs)
            continue
        anchors = t.anchors(E.geometry, poly)
        w = t.coeff * s_d * (np.asarray(t.weights) if t.weights is not None else 1.0)
        f0 = base[anchors]
        g0 = forward_derivative(lattice, base, t.direction)[anchors] if t.grad_power else None
        fd = [d[anchors] for d in dirs]
        gd = [forward_derivative(lattice, d, t.direction)[anchors] for d in dirs] if t.grad_power else None
        for mask in range(2**n):
            split = [mask >> i & 1 for i in range(n)]
            a = int(np.sum(split))
            b = n - a
            if a > t.field_power or b > t.grad_power:
                continue
            acc = np.full(anchors.shape, float(_falling(t.field_power, a) * _falling(t.grad_power, b)))
            if t.field_power - a:
                acc = acc * f0 ** (t.field_power - a)
            if t.grad_power and t.grad_power - b:
                acc = acc * g0 ** (t.grad_power - b)
            for i, side in enumerate(split):
                acc = acc * (fd[i] if side else gd[i])
            total += float(np.sum(w * acc))
    return total


CONTOUR_POINTS = 8
CONTOUR_RADIUS = 0.5


def _contour_derivative(fn, n_dirs: int, radius: float, points: int) -> float:
    """Mixed first derivative in each of n_dirs via nested circle averages.

    For analytic evaluators the circle average (1/m rho) sum_j w_j^-1 f(rho w_j)
    extracts d/dt exactly up to the m-th Taylor tail, with no step-size
    cancellation, so the radius can stay at order one.
    """
    roots = np.exp(2j * np.pi * np.arange(points) / points)

    def level(ts, depth):
        if depth == n_dirs:
            return fn(ts)
        acc = 0.0j
        for w in roots:
            acc += level(ts + [radius * w], depth + 1) / w
        return acc / (points * radius)

    return float(np.real(level([], 0)))


def _fd_derivative(E: LocalFunctional, poly: Polymer, term: OpaqueTerm, base, dirs) -> float:
    """Derivatives of opaque terms at a real base point.

    Evaluators that handle complex fields get the contour route, which has
    no step-size cancellation; the result is validated against a coarse
    real difference because a cast-to-real evaluator fails only silently.
    Everything else falls back to nested Richardson central differences.
    """
    sites = E.geometry.sites_of(poly)
    scale = max(float(np.max(np.abs(base))), 1.0)

    def g(ts):
        values = base
        for t, d in zip(ts, dirs):
            values = values + t * d
        return term.fn(sites, values)

    def g_real(ts):
        return float(np.real(g(ts)))

    def diff(fn, h_step):
        def inner(ts):
            return (fn(ts + [h_step]) - fn(ts + [-h_step])) / (2 * h_step)

        return inner

    def nth(h_step):
        fn = g_real
        for _ in dirs:
            fn = diff(fn, h_step)
        return fn([])

    with warnings.catch_warnings():
        # probing the evaluator with complex input; casts may warn
        warnings.simplefilter("ignore")
        try:
            out = _contour_derivative(g, len(dirs), CONTOUR_RADIUS * term.domain_multiplier * scale, CONTOUR_POINTS)
        except (TypeError, ValueError):
            out = math.nan
    if math.isfinite(out):
        probe = nth(1e-3 * scale)
        if abs(out - probe) <= 1e-3 * max(abs(out), abs(probe)) + 1e-9 * max(1.0, abs(g_real([]))):
            return out

    h = 1e-6 * scale
    coarse, fine = nth(h), nth(h / 2)
    return (4.0 * fine - coarse) / 3.0


# ===== norms =====


def _sample_family(lattice: TorusLattice, spec: FieldDomainSpec, seed: int = 7) -> list:
    """Extremal and random fields saturating the domain bounds from inside."""
    shrink = 1.0 - 1e-9
    fields = [np.full(lattice.n_sites, sign * shrink * spec.bound_field) for sign in (1.0, -1.0)]
    pos = lattice.positions()
    raw = []
    for mu in range(lattice.dim):
        raw.append(np.sin(2.0 * math.pi * pos[:, mu] / lattice.side))
    rng = np.random.default_rng(seed)
    for _ in range(NORM_SAMPLE_FIELDS):
        values = np.zeros(lattice.n_sites)
        for mu in range(lattice.dim):
            freq = int(rng.integers(1, 3))
            phase = rng.uniform(0, 2 * math.pi)
            values = values + rng.normal() * np.sin(2.0 * math.pi * freq * pos[:, mu] / lattice.side + phase)
        raw.append(values)
    for values in raw:
        grads = gradient_stack(lattice, values)
        margins = [
            np.max(np.abs(values)) / spec.bound_field,
            np.max(np.abs(grads)) / spec.bound_grad,
            holder_increment_max(lattice, grads.T, spec.alpha) / spec.bound_holder,
        ]
        top = max(margins)
        if top > 0:
            fields.append(values * (shrink / top))
    return fields


def norm_bound(E: LocalFunctional, poly: Polymer, spec: FieldDomainSpec, strategy: str = "analytic") -> dict:
    """Certified bound on sup over the domain of |E(X, phi)|.

    "analytic" returns a triangle-inequality upper bound (monomials only);
    "sampled" returns the max over an extremal family, a lower bound.
    """
    term_list = E.term_map.get(poly)
    if term_list is None:
        return {"value": 0.0, "certificate": "upper" if strategy == "analytic" else "lower"}
    lattice = E.geometry.lattice
    if strategy == "analytic":
        total = 0.0
        for t in term_list:
            if isinstance(t, OpaqueTerm):
                raise ValueError("analytic certificate needs monomial terms")
            anchors = t.anchors(E.geometry, poly)
            w = np.abs(np.asarray(t.weights)) if t.weights is not None else np.ones(anchors.shape)
            total += (
                abs(t.coeff)
                * lattice.site_weight
                * float(w.sum())
                * spec.bound_field**t.field_power
                * spec.bound_grad**t.grad_power
            )
        return {"value": total, "certificate": "upper"}
    if strategy != "sampled":
        raise ValueError("strategy must be analytic or sampled")
    best = 0.0
    for values in _sample_family(lattice, spec):
        best = max(best, abs(evaluate(E, poly, values)))
    return {"value": best, "certificate": "lower"}


def norm_global(E: LocalFunctional, spec: FieldDomainSpec, kappa: float, strategy: str = "analytic") -> dict:
    """sup over stored polymers of the local bound times e^{kappa d_M}."""
    best, best_poly = 0.0, None
    for poly, _ in E.terms:
        local = norm_bound(E, poly, spec, strategy)["value"] * math.exp(kappa * tree_distance(poly))
        if local > best:
            best, best_poly = local, poly
    return {
        "value": best,
        "polymer": best_poly,
        "certificate": "upper" if strategy == "analytic" else "lower",
    }


# ===== checks =====


def locality_check(E: LocalFunctional, poly: Polymer, rng) -> float:
    """Max value change under perturbations supported off the polymer."""
    lattice = E.geometry.lattice
    inside = set(E.geometry.sites_of(poly).tolist())
    outside = np.array([s for s in range(lattice.n_sites) if s not in inside], dtype=int)
    base = rng.normal(size=lattice.n_sites)
    ref = evaluate(E, poly, base)
    worst = 0.0
    for _ in range(4):
        bump = base.copy()
        bump[outside] += rng.normal(size=outside.size)
        worst = max(worst, abs(evaluate(E, poly, bump) - ref))
    return worst


def evenness_check(E: LocalFunctional, poly: Polymer, rng) -> float:
    base = rng.normal(size=E.geometry.lattice.n_sites)
    return abs(evaluate(E, poly, base) - evaluate(E, poly, -base))


def transform_field(geometry: FunctionalGeometry, values, axis_perm, flips, cube_shift) -> np.ndarray:
    """Push field values through a lattice symmetry (cube-granular shift)."""
    lattice = geometry.lattice
    values = np.asarray(values)
    n = lattice.sites_per_side
    w = geometry.grid.sites_per_cube_side
    coords = lattice.coords(np.arange(lattice.n_sites))
    out_coords = coords[:, list(axis_perm)]
    # cube-level flips negate cube indices, which at site granularity is a
    # reflection about the center of cube zero
    for ax, flip in enumerate(flips):
        if flip:
            out_coords[:, ax] = (w - 1 - out_coords[:, ax]) % n
    out_coords = out_coords + w * np.asarray(cube_shift, dtype=int)
    out = np.empty_like(values)
    out[np.asarray(lattice.flat_index(out_coords))] = values
    return out


def symmetry_check(E: LocalFunctional, poly: Polymer, rng, axis_perm, flips, cube_shift) -> float:
    """|E(gX, g phi) - E(X, phi)| for one lattice symmetry g."""
    values = rng.normal(size=E.geometry.lattice.n_sites)
    moved_poly = transform_polymer(poly, tuple(axis_perm), tuple(flips), tuple(cube_shift))
    moved_vals = transform_field(E.geometry, values, axis_perm, flips, cube_shift)
    return abs(evaluate(E, moved_poly, moved_vals) - evaluate(E, poly, values))


# ===== scaling and reblocking =====


def scale_down(F: LocalFunctional) -> LocalFunctional:
    """Reinterpret a block-scale functional on the next-coarser lattice.

    Values are preserved exactly: the new functional at (X, phi) equals the
    old one at the same cube set evaluated on the block-rescaled field.
    Monomial coefficients absorb the volume, field, and derivative factors.
    """
    geom = F.geometry
    if geom.cube_exp < 1:
        raise ValueError("already at unit cubes; nothing to scale down to")
    new_geom = geom.rescaled_down()
    d = geom.lattice.dim
    block = geom.lattice.block
    c_phi = float(block) ** (-(d - 2) / 2.0)
    new_terms = {}
    for poly, term_list in F.terms:
        new_poly = new_geom.polymer(poly.cubes)
        out = []
        for t in term_list:
            if isinstance(t, OpaqueTerm):
                fn = _scaled_opaque(t.fn, geom)
                out.append(OpaqueTerm(fn, t.domain_multiplier))
                continue
            factor = float(block) ** d * c_phi ** (t.field_power + t.grad_power) * float(block) ** (-t.grad_power)
            out.append(replace(t, coeff=t.coeff * factor))
        new_terms[new_poly] = tuple(out)
    return LocalFunctional.from_dict(new_geom, new_terms, even=F.even, symmetric=F.symmetric)


def _scaled_opaque(fn, old_geom: FunctionalGeometry):
    def wrapped(sites, values):
        lifted = scale_field(Field(old_geom.rescaled_down().lattice, values), up=True)
        return fn(sites, lifted.values)

    return wrapped


def reblock(E: LocalFunctional) -> LocalFunctional:
    """Group terms by the block-scale polymer their cubes land in.

    Every monomial keeps its original anchor sites, so the regrouped
    functional evaluates to exactly the same global sum.
    """
    geom = E.geometry
    new_geom = geom.reblocked()
    block = geom.lattice.block
    new_terms: dict = {}
    for poly, term_list in E.terms:
        target = reblock_polymer(poly, block)
        new_poly = new_geom.polymer(target.cubes)
        out = list(new_terms.get(new_poly, ()))
        for t in term_list:
            if isinstance(t, OpaqueTerm):
                out.append(t)
                continue
            anchors = t.anchors(geom, poly)
            weights = t.weights if t.weights is not None else tuple(1.0 for _ in anchors)
            out.append(replace(t, sites=tuple(int(s) for s in anchors), weights=weights))
        new_terms[new_poly] = tuple(out)
    return LocalFunctional.from_dict(new_geom, new_terms, even=E.even, symmetric=E.symmetric)


# ===== normalization =====


def _relative_coordinate(geometry: FunctionalGeometry, poly: Polymer, mu: int) -> np.ndarray:
    """x_mu minus the center of the polymer's least cube, minimal image."""
    lattice = geometry.lattice
    base = geometry.grid.cube_center(poly.cubes[0])[mu]
    rel = lattice.positions()[:, mu] - base
    side = lattice.side
    return (rel + side / 2.0) % side - side / 2.0


def normalize(E: LocalFunctional, tol: float = 1e-10) -> dict:
    """Split off the relevant part of every small polymer.

    Returns the normalized remainder plus the extracted energy and mass
    densities; gradient cross terms are extracted with the internal-bond
    volume so the remainder satisfies the three normalization conditions
    identically.
    """
    geom = E.geometry
    lattice = geom.lattice
    block = lattice.block
    zero = np.zeros(lattice.n_sites)
    one = np.ones(lattice.n_sites)
    s_d = lattice.site_weight
    new_terms: dict = {}
    alpha0: dict = {}
    alpha2: dict = {}
    alpha2_grad: dict = {}
    residuals: dict = {}
    for poly, term_list in E.terms:
        if not is_small(poly, block):
            new_terms[poly] = term_list
            continue
        vol = geom.volume(poly)
        a0 = evaluate(E, poly, zero) / vol
        a2 = derivative(E, poly, zero, [one, one]) / (2.0 * vol)
        extraction = [local_term(-a0, 0), local_term(-a2, 2)]
        a2g = []
        for mu in range(lattice.dim):
            rel = _relative_coordinate(geom, poly, mu)
            anchors = _bond_anchors(lattice, geom.cube_exp, poly.cubes, mu)
            bond_vol = float(forward_derivative(lattice, rel, mu)[anchors].sum()) * s_d
            num = derivative(E, poly, zero, [one, rel]) - 2.0 * a2 * float(rel[geom.sites_of(poly)].sum()) * s_d
            coeff = num / bond_vol if abs(bond_vol) > 1e-12 else 0.0
            a2g.append(coeff)
            if coeff:
                extraction.append(local_term(-coeff, 1, 1, mu))
        alpha0[poly], alpha2[poly], alpha2_grad[poly] = a0, a2, tuple(a2g)
        new_terms[poly] = tuple(term_list) + tuple(extraction)
    result = LocalFunctional.from_dict(geom, new_terms, even=E.even, symmetric=E.symmetric)
    for poly in alpha0:
        r0 = evaluate(result, poly, zero)
        r2 = derivative(result, poly, zero, [one, one])
        r2g = []
        for mu in range(lattice.dim):
            rel = _relative_coordinate(geom, poly, mu)
            r2g.append(derivative(result, poly, zero, [one, rel]))
        residuals[poly] = {"value": r0, "mass": r2, "gradient": tuple(r2g)}
    # per-cube sums over stored small polymers containing the cube
    covered = sorted({c for poly in alpha0 for c in poly.cubes})
    energy_by_cube = {}
    mass_by_cube = {}
    grad_by_cube = {}
    for c in covered:
        polys = [p for p in alpha0 if c in p.cubes]
        energy_by_cube[c] = -sum(alpha0[p] for p in polys)
        mass_by_cube[c] = -2.0 * sum(alpha2[p] for p in polys)
        grad_by_cube[c] = tuple(sum(alpha2_grad[p][mu] for p in polys) for mu in range(lattice.dim))
    eps_vals = list(energy_by_cube.values())
    mu_vals = list(mass_by_cube.values())
    scale0 = max(max((abs(v) for v in eps_vals), default=0.0), 1.0)
    scale2 = max(max((abs(v) for v in mu_vals), default=0.0), 1.0)
    cube_independent = all(abs(v - eps_vals[0]) <= tol * scale0 for v in eps_vals) and all(
        abs(v - mu_vals[0]) <= tol * scale2 for v in mu_vals
    )
    grad_sum_max = max((abs(g) for gs in grad_by_cube.values() for g in gs), default=0.0)
    return {
        "functional": result,
        "energy_out": eps_vals[0] if eps_vals else 0.0,
        "mass_out": mu_vals[0] if mu_vals else 0.0,
        "alpha0": alpha0,
        "alpha2": alpha2,
        "alpha2_grad": alpha2_grad,
        "residuals": residuals,
        "energy_by_cube": energy_by_cube,
        "mass_by_cube": mass_by_cube,
        "grad_by_cube": grad_by_cube,
        "cube_independent": cube_independent,
        "grad_sum_max": grad_sum_max,
        "symmetry_ok": (not E.symmetric) or grad_sum_max <= tol,
    }


# ===== the local potential =====


def make_potential(geometry: FunctionalGeometry, energy: float, mass: float, quartic: float) -> LocalFunctional:
    """Single-cube functional: energy density + mass/2 phi^2 + quartic/4 phi^4."""
    terms = {}
    for c in range(geometry.cube_torus.n_cubes):
        poly = geometry.polymer((c,))
        terms[poly] = (
            local_term(energy, 0),
            local_term(mass / 2.0, 2),
            local_term(quartic / 4.0, 4),
        )
    return LocalFunctional.from_dict(geometry, terms, even=True, symmetric=True)


# ===== large-field membership =====


def membership_sk(params, spec: FieldDomainSpec, coarse_values) -> dict:
    """Three-part small-field test for a block field, via its minimizer."""
    from blockrg.gaussian_flow import bm_k, minimizer_phi

    coarse_values = np.asarray(coarse_values, dtype=np.float64)
    phi = minimizer_phi(params, coarse_values)
    q_phi = bm_k(params).apply_q(phi)
    grads = gradient_stack(params.lattice, phi)
    p_k = spec.p_k
    checks = {
        "block_mismatch": (float(np.max(np.abs(coarse_values - q_phi))), p_k),
        "gradient": (float(np.max(np.abs(grads))), p_k),
        "field": (float(np.max(np.abs(phi))), spec.coupling**-0.25 * p_k),
    }
    failing = [name for name, (got, cap) in checks.items() if got > cap]
    return {"member": not failing, "failing": failing, "checks": checks, "minimizer": phi}


def strong_field_facts(params, spec: FieldDomainSpec, coarse_values) -> dict:
    """Consequences of membership: block-field bounds and domain membership."""
    report = membership_sk(params, spec, coarse_values)
    coarse_values = np.asarray(coarse_values, dtype=np.float64)
    unit = params.unit_lattice
    p_k = spec.p_k
    sup_phi = float(np.max(np.abs(coarse_values)))
    sup_grad = float(np.max(np.abs(gradient_stack(unit, coarse_values))))
    facts = {
        "member": report["member"],
        "block_bound": (sup_phi, 2.0 * p_k * spec.coupling**-0.25),
        "block_gradient_bound": (sup_grad, 3.0 * p_k),
    }
    facts["block_bound_ok"] = facts["block_bound"][0] <= facts["block_bound"][1]
    facts["block_gradient_ok"] = facts["block_gradient_bound"][0] <= facts["block_gradient_bound"][1]
    facts["minimizer_domain"] = domain_membership(params.lattice, report["minimizer"], spec)
    return facts


# ===== serialization =====


def functional_to_dict(E: LocalFunctional) -> dict:
    lattice = E.geometry.lattice
    entries = []
    for poly, term_list in E.terms:
        monos = []
        for t in term_list:
            if isinstance(t, OpaqueTerm):
                raise ValueError("opaque terms are not serializable")
            monos.append(
                {
                    "coeff": t.coeff,
                    "field_power": t.field_power,
                    "grad_power": t.grad_power,
                    "direction": t.direction,
                    "sites": list(t.sites) if t.sites is not None else None,
                    "weights": list(t.weights) if t.weights is not None else None,
                }
            )
        entries.append({"cubes": list(poly.cubes), "monomials": monos})
    return {
        "lattice": {
            "dim": lattice.dim,
            "block": lattice.block,
            "side_exp": lattice.side_exp,
            "refine_exp": lattice.refine_exp,
        },
        "cube_exp": E.geometry.cube_exp,
        "even": E.even,
        "symmetric": E.symmetric,
        "terms": entries,
    }


def functional_from_dict(data: dict) -> LocalFunctional:
    lat = TorusLattice(**data["lattice"])
    geom = FunctionalGeometry(lat, data["cube_exp"])
    term_map = {}
    for entry in data["terms"]:
        poly = geom.polymer(tuple(entry["cubes"]))
        terms = []
        for m in entry["monomials"]:
            terms.append(
                MonomialTerm(
                    float(m["coeff"]),
                    int(m["field_power"]),
                    int(m["grad_power"]),
                    int(m.get("direction", 0)),
                    tuple(m["sites"]) if m.get("sites") is not None else None,
                    tuple(m["weights"]) if m.get("weights") is not None else None,
                )
            )
        term_map[poly] = tuple(terms)
    return LocalFunctional.from_dict(geom, term_map, even=data.get("even", True), symmetric=data.get("symmetric", False))
