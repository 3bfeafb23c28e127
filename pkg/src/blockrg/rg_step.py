"""One small-field renormalization step for the quartic lattice model.

A step starts from a coupling triple (vacuum energy, mass coefficient,
quartic coupling) plus a remainder functional on block cubes.  It splits the
interacting Gibbs factor around the free minimizer, localizes the resulting
difference functional in cube weights, integrates the fluctuation with a
truncated product measure through the connected-cluster machinery, and
reassembles the next level's couplings and remainder.  Every analytic claim
the step relies on is replayed numerically: exact blocking identities,
substitution of the covariance square root, assembly of the truncated
integral, locality of the localized terms, and measured-constant envelope
checks on the extracted pieces.
"""

import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import logsumexp

from blockrg.cluster import (
    BRUTE_GRID_CAP,
    ClusterCapError,
    ClusterModel,
    UltralocalMeasure,
    connected_amplitudes,
    gaussian_truncation_cost,
)
from blockrg.functional import (
    FieldDomainSpec,
    FunctionalGeometry,
    LocalFunctional,
    MonomialTerm,
    OpaqueTerm,
    domain_membership,
    evaluate,
    functional_from_dict,
    functional_to_dict,
    make_potential,
    membership_sk,
    norm_global,
    normalize,
    reblock,
    scale_down,
)
from blockrg.gaussian_flow import (
    GaussParams,
    a_weight_matrix,
    bm_k,
    bm_unit,
    effective_quadratic_form,
    green_gk,
    j_action,
    phi0_next,
    psi_minimizer,
    s0_next_action,
    sqrt_covariance,
    zeta_from_z,
)
from blockrg.greens import walk_support_matrices
from blockrg.lattice import CubeGrid
from blockrg.polymer import Polymer, tree_distance
from blockrg.polymer import reblock as reblock_polymer


class StepHypothesisError(RuntimeError):
    """The state violates the smallness hypotheses the step needs."""


class LocalizationHaloError(RuntimeError):
    """The configured halo drops localized weight beyond tolerance."""


MAX_LOCALIZATION_CUBES = 12


@dataclass(frozen=True)
class StepControls:
    """Resolution knobs and tolerances for one step.

    measure_nodes sets the quadrature order of the truncated single-site
    measure, walk_orders and r_nodes the truncation of the weakened response
    kernel, halo the cube radius kept around each localization seed (None
    keeps the whole torus).  p0_override supplies the fluctuation cutoff when
    the quartic coupling vanishes and no domain data exists.
    """

    measure_nodes: int = 5
    cluster_orders: int = 12
    walk_orders: int = 60
    r_nodes: int = 240
    r_margin: float = 48.0
    halo: int | None = None
    quad_nodes: int = 6
    quad_step: float = 1e-3
    probes: int = 4
    seed: int = 0
    kappa: float = 0.5
    tol_identity: float = 1e-9
    tol_cross: float = 1e-7
    prefactor_cap: float = 25.0
    p0_override: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StepControls":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown control fields: {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class FlowState:
    """Couplings and remainder functional riding on one level's free measure.

    interaction is the remainder on block cubes of the current lattice (or
    None when absent); mass_coeff and energy are the quadratic and constant
    densities of the extracted local potential.
    """

    params: GaussParams
    cube_exp: int
    coupling: float
    mass_coeff: float = 0.0
    energy: float = 0.0
    interaction: LocalFunctional | None = None

    def __post_init__(self):
        if self.cube_exp < 0:
            raise ValueError("cube exponent must be nonnegative")
        if self.cube_exp + 1 > self.params.lattice.side_exp:
            raise ValueError("block cubes do not fit on the lattice")
        if self.coupling < 0:
            raise ValueError("quartic coupling must be nonnegative")
        if self.interaction is not None and self.interaction.geometry != self.geometry:
            raise ValueError("interaction lives on a different cube geometry")

    @property
    def lattice(self):
        return self.params.lattice

    @property
    def level(self) -> int:
        return self.params.level

    @property
    def block(self) -> int:
        return self.params.block

    @property
    def geometry(self) -> FunctionalGeometry:
        return FunctionalGeometry(self.params.lattice, self.cube_exp)

    @property
    def block_geometry(self) -> FunctionalGeometry:
        return FunctionalGeometry(self.params.lattice, self.cube_exp + 1)

    @property
    def spec(self) -> FieldDomainSpec | None:
        if self.coupling <= 0.0:
            return None
        return FieldDomainSpec(self.coupling)

    def cutoff_p0(self, controls: "StepControls") -> float:
        spec = self.spec
        if spec is not None:
            return spec.p0_k
        if controls.p0_override is None:
            raise ValueError("zero coupling needs p0_override to set the cutoff")
        if controls.p0_override <= 0:
            raise ValueError("p0_override must be positive")
        return controls.p0_override

    def to_dict(self) -> dict:
        """JSON-ready form; remainders must be monomial to serialize."""
        lattice = self.params.lattice
        out = {
            "lattice": {
                "dim": lattice.dim,
                "block": lattice.block,
                "side_exp": lattice.side_exp,
                "refine_exp": lattice.refine_exp,
            },
            "stiffness": self.params.stiffness,
            "mass0": self.params.mass0,
            "level": self.params.level,
            "cube_exp": self.cube_exp,
            "coupling": self.coupling,
            "mass_coeff": self.mass_coeff,
            "energy": self.energy,
            "interaction": None,
        }
        if self.interaction is not None:
            out["interaction"] = functional_to_dict(self.interaction)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FlowState":
        from blockrg.lattice import TorusLattice

        lattice = TorusLattice(**data["lattice"])
        params = GaussParams(lattice, data["stiffness"], data["mass0"], data["level"])
        interaction = None
        if data.get("interaction") is not None:
            interaction = functional_from_dict(data["interaction"])
        return cls(
            params=params,
            cube_exp=int(data["cube_exp"]),
            coupling=float(data["coupling"]),
            mass_coeff=float(data.get("mass_coeff", 0.0)),
            energy=float(data.get("energy", 0.0)),
            interaction=interaction,
        )

    def hypothesis_report(self, kappa: float = 0.5) -> dict:
        mass_cap = math.sqrt(self.coupling)
        out = {
            "mass_value": abs(self.mass_coeff),
            "mass_cap": mass_cap,
            "mass_ok": abs(self.mass_coeff) <= mass_cap,
            "interaction_norm": 0.0,
            "interaction_certificate": "exact",
            "interaction_ok": True,
        }
        if self.interaction is not None:
            spec = self.spec
            if spec is None:
                raise StepHypothesisError("remainder present but no coupling to set its domain")
            try:
                bound = norm_global(self.interaction, spec, kappa, strategy="analytic")
            except ValueError:
                bound = norm_global(self.interaction, spec, kappa, strategy="sampled")
            out["interaction_norm"] = bound["value"]
            out["interaction_certificate"] = bound["certificate"]
            out["interaction_ok"] = bound["value"] <= 1.0
        out["ok"] = out["mass_ok"] and out["interaction_ok"]
        return out


# ===== the local potential and the interacting difference =====


def potential_functional(state: FlowState) -> LocalFunctional:
    """Extracted local potential: energy + mass/2 phi^2 + coupling/4 phi^4."""
    return make_potential(state.geometry, state.energy, state.mass_coeff, state.coupling)


def potential_term(state: FlowState, poly: Polymer, phi) -> float:
    """Value of the local potential on one polymer."""
    return evaluate(potential_functional(state), poly, phi)


def _scaled_term_fn(fn, s: float):
    def scaled(sites, values, _fn=fn, _s=s):
        return _s * _fn(sites, values)

    return scaled


def combine_functionals(geometry: FunctionalGeometry, pieces) -> LocalFunctional:
    """Signed sum of functionals sharing one geometry, merged per polymer."""
    term_map: dict = {}
    even = True
    for F, s in pieces:
        if F is None:
            continue
        if F.geometry != geometry:
            raise ValueError("functional lives on a different geometry")
        even = even and F.even
        for poly, terms in F.terms:
            out = list(term_map.get(poly, ()))
            for t in terms:
                if isinstance(t, MonomialTerm):
                    if t.coeff * s != 0.0:
                        out.append(replace(t, coeff=t.coeff * s))
                else:
                    out.append(OpaqueTerm(_scaled_term_fn(t.fn, s), t.domain_multiplier))
            if out:
                term_map[poly] = tuple(out)
    return LocalFunctional.from_dict(geometry, term_map, even=even, symmetric=False)


def eplus_functional(state: FlowState) -> LocalFunctional:
    """Remainder minus extracted potential, the step's interacting functional."""
    return combine_functionals(state.geometry, [(state.interaction, 1.0), (potential_functional(state), -1.0)])


def _batch_eval(E: LocalFunctional, poly: Polymer, rows: np.ndarray) -> np.ndarray:
    """evaluate() over a (configs, sites) matrix of field rows at once."""
    rows = np.atleast_2d(np.asarray(rows))
    term_list = E.term_map.get(poly)
    out_dtype = np.complex128 if np.iscomplexobj(rows) else np.float64
    total = np.zeros(rows.shape[0], dtype=out_dtype)
    if term_list is None:
        return total
    lattice = E.geometry.lattice
    s_d = lattice.site_weight
    grads: dict = {}
    for t in term_list:
        if isinstance(t, OpaqueTerm):
            sites = E.geometry.sites_of(poly)
            total = total + np.array([t.fn(sites, row) for row in rows])
            continue
        anchors = t.anchors(E.geometry, poly)
        acc = np.full((rows.shape[0], anchors.size), t.coeff * s_d, dtype=out_dtype)
        if t.weights is not None:
            acc = acc * np.asarray(t.weights)[None, :]
        if t.field_power:
            acc = acc * rows[:, anchors] ** t.field_power
        if t.grad_power:
            if t.direction not in grads:
                perm = lattice.shift_perm(t.direction, 1)
                grads[t.direction] = (rows[:, perm] - rows) / lattice.spacing
            acc = acc * grads[t.direction][:, anchors] ** t.grad_power
        total = total + acc.sum(axis=1)
    return total


def delta_eplus(state: FlowState, poly: Polymer, phi, w_fine, kappa: float = 0.5) -> dict:
    """Change of the interacting functional on one polymer under a shift.

    phi must sit inside half the analyticity domain; w_fine is the already
    assembled fine-lattice response to the fluctuation.  The value is the
    exact difference; the report compares it against the decaying envelope
    with the measured prefactor.
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    w_fine = np.asarray(w_fine, dtype=np.float64).reshape(-1)
    spec = state.spec
    if spec is not None:
        report = domain_membership(state.lattice, phi, spec, rho=0.5)
        if not report["member"]:
            raise ValueError(f"field outside half the domain: {', '.join(report['failing'])} bound")
    ep = eplus_functional(state)
    value = float(_batch_eval(ep, poly, phi + w_fine)[0] - _batch_eval(ep, poly, phi)[0])
    envelope = None
    ratio = None
    if spec is not None:
        envelope = spec.coupling ** (0.25 - 10.0 * spec.epsilon) * math.exp(-kappa * tree_distance(poly))
        ratio = abs(value) / envelope if envelope > 0 else math.inf
    return {"value": value, "envelope": envelope, "prefactor": ratio}


# ===== weakened response kernel =====


class ResponseKernel:
    """Fluctuation response split by the cube support of its walk terms.

    The propagator and the covariance square root are both assembled as sums
    over cube sets S with matrices supported exactly on the sites of S; per
    cube weights then factor through the response with exact locality.  The
    square root keeps a weight-independent closed-form part plus one support
    sum accumulated over the shifted-resolvent quadrature.
    """

    def __init__(self, params, block_exp, g_supports, b_supports, d_matrix, diagnostics):
        self.params = params
        self.block_exp = block_exp
        self.g_supports = g_supports
        self.b_supports = b_supports
        self.d_matrix = d_matrix
        self.diagnostics = diagnostics
        self.qt = bm_k(params).qt_matrix()
        self.exact_m = params.a_k * (green_gk(params) @ self.qt @ sqrt_covariance(params))
        self.all_cubes = frozenset(range(CubeGrid(params.lattice, block_exp).n_cubes))
        self._corner_cache: dict = {}

    @classmethod
    def build(cls, params: GaussParams, block_exp: int, controls: StepControls | None = None) -> "ResponseKernel":
        controls = controls or StepControls()
        unshifted = walk_support_matrices(params, block_exp, controls.walk_orders)
        g_supports = unshifted["by_support"]
        a = params.stiffness
        lsq = float(params.block) ** 2
        bmu = bm_unit(params)
        proj = bmu.qt_matrix() @ bmu.q_matrix()
        n_u = params.unit_lattice.n_sites
        eye = np.eye(n_u)
        d_matrix = (eye - proj) / math.sqrt(params.a_k) + proj / math.sqrt(params.a_k + a / lsq)
        c_inv = effective_quadratic_form(params) + (a / lsq) * proj
        sigma = np.linalg.eigvalsh(c_inv)
        lo = math.log(float(sigma.min())) - controls.r_margin
        hi = math.log(float(sigma.max())) + controls.r_margin
        x, w = np.polynomial.legendre.leggauss(controls.r_nodes)
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * w
        q_k = bm_k(params).q_matrix()
        qt_k = bm_k(params).qt_matrix()
        b_supports: dict = {}
        shifted_ok = True
        for ti, wi in zip(t, w):
            r = math.exp(ti)
            shifted = walk_support_matrices(params, block_exp, controls.walk_orders, shift_r=r)
            shifted_ok = shifted_ok and shifted["converged"]
            aw = a_weight_matrix(params, r)
            pre = aw @ q_k
            post = qt_k @ aw
            coeff = wi * math.exp(ti / 2.0) * params.a_k**2 / math.pi
            for supp, mat in shifted["by_support"].items():
                add = coeff * (pre @ mat @ post)
                acc = b_supports.get(supp)
                b_supports[supp] = add if acc is None else acc + add
        kernel = cls(params, block_exp, g_supports, b_supports, d_matrix, {})
        g_total = sum(g_supports.values())
        c_half_total = d_matrix + sum(b_supports.values())
        kernel.diagnostics = {
            "walks_converged": bool(unshifted["converged"]) and bool(shifted_ok),
            "green_error": float(np.max(np.abs(g_total - green_gk(params)))),
            "sqrt_error": float(np.max(np.abs(c_half_total - sqrt_covariance(params)))),
            "response_error": float(np.max(np.abs(kernel.corner_matrix(kernel.all_cubes) - kernel.exact_m))),
            "n_supports": {"propagator": len(g_supports), "sqrt": len(b_supports)},
        }
        return kernel

    def weighted_matrix(self, svec) -> np.ndarray:
        """Response at arbitrary per-cube weights (complex weights allowed)."""
        svec = np.asarray(svec).reshape(-1)
        n = self.params.lattice.n_sites
        n_u = self.params.unit_lattice.n_sites
        dtype = np.complex128 if np.iscomplexobj(svec) else np.float64
        g = np.zeros((n, n), dtype=dtype)
        for supp, mat in self.g_supports.items():
            sigma = np.prod(svec[list(supp)])
            if sigma != 0.0:
                g = g + sigma * mat
        c_half = self.d_matrix.astype(dtype, copy=True)
        for supp, mat in self.b_supports.items():
            sigma = np.prod(svec[list(supp)])
            if sigma != 0.0:
                c_half = c_half + sigma * mat
        return self.params.a_k * (g @ self.qt @ c_half)

    def corner_matrix(self, ones: frozenset) -> np.ndarray:
        """Response with weights equal to one on the given cubes, zero off."""
        key = frozenset(ones)
        cached = self._corner_cache.get(key)
        if cached is not None:
            return cached
        n = self.params.lattice.n_sites
        g = np.zeros((n, n))
        for supp, mat in self.g_supports.items():
            if supp <= key:
                g += mat
        c_half = self.d_matrix.copy()
        for supp, mat in self.b_supports.items():
            if supp <= key:
                c_half += mat
        out = self.params.a_k * (g @ self.qt @ c_half)
        self._corner_cache[key] = out
        return out


# ===== localization in cube weights =====


def connected_supersets(torus, base_cubes, halo: int | None = None) -> list:
    """All connected cube sets containing the base, optionally halo-limited."""
    if torus.n_cubes > MAX_LOCALIZATION_CUBES:
        raise ValueError("too many cubes for superset enumeration")
    base = frozenset(int(c) for c in base_cubes)
    if halo is None:
        allowed = frozenset(range(torus.n_cubes))
    else:
        allowed = frozenset(
            c for c in range(torus.n_cubes) if any(torus.distance(c, b) <= halo for b in base)
        )
    out = set()
    frontier = {base}
    while frontier:
        nxt = set()
        for cur in frontier:
            if cur in out:
                continue
            out.add(cur)
            reach = set()
            for c in cur:
                reach.update(torus.neighbors(c))
            for c in (reach & allowed) - cur:
                nxt.add(cur | {c})
        frontier = nxt
    return sorted(tuple(sorted(s)) for s in out)


def _corner_coefficients(y_cubes: tuple, z_cubes: tuple) -> list:
    """Signed corner evaluations reducing a cube-set increment to its corners."""
    extra = [c for c in z_cubes if c not in y_cubes]
    out = []
    for mask in range(1 << len(extra)):
        chosen = [extra[i] for i in range(len(extra)) if mask >> i & 1]
        sign = (-1) ** (len(extra) - len(chosen))
        out.append((sign, frozenset(y_cubes) | frozenset(chosen)))
    return out


def _block_content(state: FlowState, eplus: LocalFunctional) -> dict:
    """Polymers of the interacting functional grouped by their block image."""
    out: dict = {}
    for poly, _ in eplus.terms:
        image = reblock_polymer(poly, state.block).cubes
        out.setdefault(image, []).append(poly)
    return out


def _weight_function(state: FlowState, eplus: LocalFunctional, content, kernel: ResponseKernel, phi, w_unit):
    """f(U) = interacting difference of the listed polymers at corner weights U."""
    phi = np.asarray(phi).reshape(-1)
    w_unit = np.asarray(w_unit).reshape(-1)
    base = {x: _batch_eval(eplus, x, phi)[0] for x in content}
    memo: dict = {}

    def f(ones: frozenset):
        key = frozenset(ones)
        if key in memo:
            return memo[key]
        shift = kernel.corner_matrix(key) @ w_unit
        rows = phi + shift
        val = 0.0
        for x in content:
            val += _batch_eval(eplus, x, rows)[0] - base[x]
        memo[key] = val
        return val

    return f


def localization_expansion(
    state: FlowState,
    y_cubes,
    phi,
    w_unit,
    kernel: ResponseKernel | None = None,
    controls: StepControls | None = None,
) -> dict:
    """Split one seed's interacting difference across localized cube sets.

    Production values come from iterated-corner sums of the weight function;
    the quadrature route integrates the mixed weight derivative over the unit
    cell with Gauss-Legendre nodes and Richardson-extrapolated differences,
    and both are checked against the telescoped total.
    """
    controls = controls or StepControls()
    if kernel is None:
        kernel = ResponseKernel.build(state.params, state.cube_exp + 1, controls)
    torus = state.block_geometry.cube_torus
    y_cubes = tuple(sorted(int(c) for c in y_cubes))
    eplus = eplus_functional(state)
    content = _block_content(state, eplus).get(y_cubes, [])
    f = _weight_function(state, eplus, content, kernel, phi, w_unit)
    supersets = connected_supersets(torus, y_cubes, controls.halo)
    terms = {}
    for z in supersets:
        terms[z] = sum(sign * f(ones) for sign, ones in _corner_coefficients(y_cubes, z))

    if controls.halo is None:
        allowed = frozenset(range(torus.n_cubes))
    else:
        allowed = frozenset(
            c for c in range(torus.n_cubes) if any(torus.distance(c, b) <= controls.halo for b in y_cubes)
        )
    telescoped = f(allowed)
    telescope_error = abs(sum(terms.values()) - telescoped)
    full = f(frozenset(range(torus.n_cubes)))
    halo_error = abs(full - telescoped)
    scale = max(1.0, abs(full))
    if controls.halo is not None and halo_error > controls.tol_cross * scale:
        raise LocalizationHaloError(
            f"halo {controls.halo} drops weight {halo_error:.3e} beyond tolerance"
        )

    quadrature = {}
    x, w = np.polynomial.legendre.leggauss(controls.quad_nodes)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    n_cubes = torus.n_cubes
    phi_arr = np.asarray(phi, dtype=np.float64).reshape(-1)
    w_arr0 = np.asarray(w_unit, dtype=np.float64).reshape(-1)
    base_vals = {x_p: _batch_eval(eplus, x_p, phi_arr)[0] for x_p in content}

    def f_svec(svec):
        rows = phi_arr + kernel.weighted_matrix(svec) @ w_arr0
        out = 0.0
        for x_p in content:
            out += _batch_eval(eplus, x_p, rows)[0] - base_vals[x_p]
        return out

    h = controls.quad_step

    def mixed_partial(svec, ids):
        fn = f_svec
        for i in ids:
            fn = _richardson_diff(fn, i, h)
        return fn(svec)

    for z in supersets:
        extra = [c for c in z if c not in y_cubes]
        svec = np.zeros(n_cubes)
        svec[list(y_cubes)] = 1.0
        if not extra:
            quadrature[z] = f_svec(svec)
            continue
        total = 0.0
        grid_idx = np.indices((len(nodes),) * len(extra)).reshape(len(extra), -1).T
        for multi in grid_idx:
            s_eval = svec.copy()
            wt = 1.0
            for pos, c in enumerate(extra):
                s_eval[c] = nodes[multi[pos]]
                wt *= weights[multi[pos]]
            total += wt * mixed_partial(s_eval, extra)
        quadrature[z] = total
    route_gap = max(abs(terms[z] - quadrature[z]) for z in supersets)

    rng = np.random.default_rng(controls.seed)
    w_arr = np.asarray(w_unit, dtype=np.float64).reshape(-1)
    unit_grid = CubeGrid(state.params.unit_lattice, state.cube_exp + 1)
    w_locality = 0.0
    disconnected = 0.0
    for z in supersets[: controls.probes]:
        inside = np.concatenate([unit_grid.sites_of_cube(c) for c in z])
        outside = np.setdiff1d(np.arange(state.params.unit_lattice.n_sites), inside)
        if outside.size:
            bumped = w_arr.copy()
            bumped[outside] += rng.normal(size=outside.size)
            f_b = _weight_function(state, eplus, content, kernel, phi, bumped)
            val = sum(sign * f_b(ones) for sign, ones in _corner_coefficients(y_cubes, z))
            w_locality = max(w_locality, abs(val - terms[z]))
    for z in supersets:
        for c in range(n_cubes):
            if c in z:
                continue
            if all(c not in torus.neighbors(b) for b in z):
                probe = tuple(sorted(z + (c,)))
                val = sum(sign * f(ones) for sign, ones in _corner_coefficients(y_cubes, probe))
                disconnected = max(disconnected, abs(val))
                break

    return {
        "terms": terms,
        "quadrature": quadrature,
        "route_gap": route_gap,
        "telescope_error": telescope_error,
        "telescoped_value": telescoped,
        "full_value": full,
        "halo_error": halo_error,
        "w_locality": w_locality,
        "disconnected_max": disconnected,
        "content_polymers": len(content),
    }


def _richardson_diff(fn, index: int, h: float):
    def inner(svec, _fn=fn, _i=index, _h=h):
        sp, sm = svec.copy(), svec.copy()
        sp[_i] += _h
        sm[_i] -= _h
        coarse = (_fn(sp) - _fn(sm)) / (2.0 * _h)
        sp2, sm2 = svec.copy(), svec.copy()
        sp2[_i] += 0.5 * _h
        sm2[_i] -= 0.5 * _h
        fine = (_fn(sp2) - _fn(sm2)) / _h
        return (4.0 * fine - coarse) / 3.0

    return inner


# ===== fluctuation integral =====


def _union_closure(cube_sets, torus) -> list:
    out = set(tuple(sorted(s)) for s in cube_sets)
    changed = True
    while changed:
        changed = False
        items = sorted(out)
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                if set(items[i]) & set(items[j]):
                    u = tuple(sorted(set(items[i]) | set(items[j])))
                    if u not in out:
                        out.add(u)
                        changed = True
        if len(out) > 4 * MAX_LOCALIZATION_CUBES**2:
            raise ClusterCapError("localization closure exceeds the polymer cap")
    return sorted(out)


def fluctuation_model(state: FlowState, phi, kernel: ResponseKernel, controls: StepControls) -> tuple:
    """Cluster model whose polymers carry the localized interacting difference.

    Each polymer Z sums, over contained seeds Y, the corner-localized terms;
    the evaluator reads the fluctuation only at Z's own unit sites, which the
    support-split response makes exact rather than approximate.
    """
    eplus = eplus_functional(state)
    content = _block_content(state, eplus)
    torus = state.block_geometry.cube_torus
    unit_grid = CubeGrid(state.params.unit_lattice, state.cube_exp + 1)
    cube_sites = tuple(tuple(int(s) for s in unit_grid.sites_of_cube(c)) for c in range(torus.n_cubes))
    z_set = set()
    for y in content:
        z_set.update(connected_supersets(torus, y, controls.halo))
    z_list = _union_closure(z_set, torus) if z_set else []
    phi = np.asarray(phi).reshape(-1)
    measure = UltralocalMeasure.truncated_gaussian(state.cutoff_p0(controls), nodes=controls.measure_nodes)

    evaluators = []
    polymers = []
    for z in z_list:
        zsites = np.concatenate([unit_grid.sites_of_cube(c) for c in sorted(z)])
        zsites = np.sort(zsites)
        pairs = []
        bases = []
        for y, xs in content.items():
            if not set(y) <= set(z):
                continue
            base = np.array([_batch_eval(eplus, x, phi)[0] for x in xs])
            for sign, ones in _corner_coefficients(y, z):
                m_slice = kernel.corner_matrix(ones)[:, zsites].copy()
                pairs.append((float(sign), m_slice, xs, base))
        if not pairs:
            continue

        def make_eval(pairs=pairs, phi=phi):
            def fn(vals):
                vals = np.asarray(vals)
                dtype = np.complex128 if np.iscomplexobj(vals) or np.iscomplexobj(phi) else np.float64
                total = np.zeros(vals.shape[0], dtype=dtype)
                for sign, m_slice, xs, base in pairs:
                    rows = phi[None, :] + vals @ m_slice.T
                    part = np.zeros(vals.shape[0], dtype=dtype)
                    for x, b in zip(xs, base):
                        part = part + _batch_eval(eplus, x, rows) - b
                    total = total + sign * part
                return total

            return fn

        evaluators.append(make_eval())
        polymers.append(Polymer(torus, tuple(sorted(z))))

    model = ClusterModel(
        torus=torus,
        cube_sites=cube_sites,
        measure=measure,
        polymers=tuple(polymers),
        values=tuple(evaluators),
    )
    info = {"n_polymers": len(polymers), "seeds": sorted(content), "halo": controls.halo}
    return model, info


def fluctuation_amplitudes(state: FlowState, phi, kernel: ResponseKernel, controls: StepControls) -> dict:
    """Connected localized amplitudes of the fluctuation integral at one field."""
    model, info = fluctuation_model(state, phi, kernel, controls)
    cluster = connected_amplitudes(model, n_max=controls.cluster_orders)
    return {
        "amplitudes": cluster["amplitudes"],
        "tail_bound": cluster["tail_bound"],
        "converged": cluster["converged"],
        "order_sums": cluster["order_sums"],
        "model_info": info,
    }


def _direct_log_integral(state: FlowState, phi, controls: StepControls) -> dict:
    """Brute-force route: exact quadrature of the shifted Gibbs factor.

    Runs over the full product atom grid with the exactly assembled response,
    with no localization, walk expansion, or cluster resummation involved.
    """
    params = state.params
    n_u = params.unit_lattice.n_sites
    nodes = controls.measure_nodes
    if float(nodes) ** n_u > BRUTE_GRID_CAP:
        raise ClusterCapError("direct fluctuation grid exceeds the exact-integration cap")
    p0 = state.cutoff_p0(controls)
    x, w = np.polynomial.legendre.leggauss(nodes)
    points = p0 * x
    raw_w = p0 * w * np.exp(-0.5 * points**2) / math.sqrt(2.0 * math.pi)
    log_raw = np.log(raw_w)
    log_norm = log_raw - math.log(float(raw_w.sum()))
    eps0_quad = -math.log(float(raw_w.sum()))
    eps0_closed = gaussian_truncation_cost(p0)

    exact_m = params.a_k * (green_gk(params) @ bm_k(params).qt_matrix() @ sqrt_covariance(params))
    eplus = eplus_functional(state)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    base = {x_p: _batch_eval(eplus, x_p, phi)[0] for x_p, _ in eplus.terms}

    total_rows = nodes**n_u
    chunk = 65536
    parts_norm = []
    parts_raw = []
    shape = (nodes,) * n_u
    for start in range(0, total_rows, chunk):
        stop = min(start + chunk, total_rows)
        digits = np.stack(np.unravel_index(np.arange(start, stop), shape), axis=-1)
        w_rows = points[digits]
        g = np.zeros(stop - start)
        fields = phi[None, :] + w_rows @ exact_m.T
        for x_p, _ in eplus.terms:
            g += _batch_eval(eplus, x_p, fields) - base[x_p]
        logw_norm = log_norm[digits].sum(axis=1)
        logw_raw = log_raw[digits].sum(axis=1)
        parts_norm.append(logsumexp(g + logw_norm))
        parts_raw.append(logsumexp(g + logw_raw))
    log_xi = float(logsumexp(np.array(parts_norm)))
    log_unnormalized = float(logsumexp(np.array(parts_raw)))
    return {
        "log_xi": log_xi,
        "log_unnormalized": log_unnormalized,
        "epsilon0": eps0_quad,
        "epsilon0_closed": eps0_closed,
        "n_unit_sites": n_u,
        "assembly_residual": abs(log_unnormalized - (-eps0_quad * n_u + log_xi)),
    }


def fluctuation_integral(
    state: FlowState,
    phi,
    kernel: ResponseKernel | None = None,
    controls: StepControls | None = None,
) -> dict:
    """Truncated fluctuation integral at one minimizer field.

    Returns the per-site truncation cost and the localized functional whose
    polymer sum is the log of the normalized integral, cross-checked against
    the brute-force quadrature route.
    """
    controls = controls or StepControls()
    if kernel is None:
        kernel = ResponseKernel.build(state.params, state.cube_exp + 1, controls)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    spec = state.spec
    if spec is not None:
        report = domain_membership(state.lattice, phi, spec, rho=0.5)
        if not report["member"]:
            raise ValueError(f"field outside half the domain: {', '.join(report['failing'])} bound")
    cluster = fluctuation_amplitudes(state, phi, kernel, controls)
    log_xi_cluster = float(np.real(sum(cluster["amplitudes"].values()))) if cluster["amplitudes"] else 0.0
    direct = _direct_log_integral(state, phi, controls)
    e_sharp, sharp_info = interaction_sharp(state, kernel, controls)
    return {
        "epsilon0": direct["epsilon0"],
        "epsilon0_closed": direct["epsilon0_closed"],
        "e_sharp": e_sharp,
        "amplitudes": cluster["amplitudes"],
        "log_xi_cluster": log_xi_cluster,
        "log_xi_direct": direct["log_xi"],
        "cross_error": abs(log_xi_cluster - direct["log_xi"]),
        "assembly_residual": direct["assembly_residual"],
        "cluster_tail": cluster["tail_bound"],
        "cluster_converged": cluster["converged"],
        "sharp_info": sharp_info,
        "n_unit_sites": direct["n_unit_sites"],
    }


def interaction_sharp(state: FlowState, kernel: ResponseKernel, controls: StepControls) -> tuple:
    """Localized functional of the fluctuation integral, one term per cube set.

    Evaluations at a given field run the full localized cluster pipeline and
    are memoized on the field bytes, so repeated derivative stencils reuse
    each amplitude map.  The returned diagnostics dict keeps growing as the
    functional is evaluated; inspect it after use.
    """
    eplus = eplus_functional(state)
    content = _block_content(state, eplus)
    torus = state.block_geometry.cube_torus
    z_set = set()
    for y in content:
        z_set.update(connected_supersets(torus, y, controls.halo))
    z_list = _union_closure(z_set, torus) if z_set else []
    geometry = state.block_geometry
    diag = {"runs": 0, "max_tail": 0.0, "all_converged": True}
    memo: dict = {}

    def amps_at(values):
        arr = np.asarray(values)
        key = (arr.dtype.kind, arr.tobytes())
        hit = memo.get(key)
        if hit is None:
            out = fluctuation_amplitudes(state, arr, kernel, controls)
            diag["runs"] += 1
            diag["max_tail"] = max(diag["max_tail"], out["tail_bound"])
            diag["all_converged"] = diag["all_converged"] and out["converged"]
            hit = out["amplitudes"]
            memo[key] = hit
        return hit

    term_map = {}
    for z in z_list:
        def make_fn(cubes=tuple(sorted(z))):
            def fn(sites, values):
                return amps_at(values).get(cubes, 0.0)

            return fn

        term_map[geometry.polymer(tuple(sorted(z)))] = (OpaqueTerm(make_fn(), domain_multiplier=2.0),)
    functional = LocalFunctional.from_dict(geometry, term_map, even=True, symmetric=False)
    return functional, diag


# ===== step audits =====


def blocking_identity_audit(state: FlowState, rng, controls: StepControls) -> dict:
    """Replay the exact identities behind the step's change of variables.

    Checks the quadratic split of the blocking exponent around the minimizer
    pair, the covariance-root substitution, and the response it induces.
    """
    params = state.params
    n_u = params.unit_lattice.n_sites
    n_c = params.coarse_lattice.n_sites
    a = params.stiffness
    lsq = float(params.block) ** 2
    bmu = bm_unit(params)
    c_inv = effective_quadratic_form(params) + (a / lsq) * (bmu.qt_matrix() @ bmu.q_matrix())
    sqrt_c = sqrt_covariance(params)
    exact_m = params.a_k * (green_gk(params) @ bm_k(params).qt_matrix() @ sqrt_c)
    out = {"blocking": 0.0, "substitution_form": 0.0, "substitution_response": 0.0}
    for _ in range(controls.probes):
        phi_next = rng.normal(scale=0.5, size=n_c)
        z = rng.normal(scale=0.5, size=n_u)
        p0f = phi0_next(params, phi_next)
        psi = psi_minimizer(params, phi_next, p0f)
        zeta = zeta_from_z(params, z)
        lhs = j_action(params, phi_next, psi + z, p0f + zeta)
        rhs = s0_next_action(params, phi_next, p0f) + 0.5 * float(z @ c_inv @ z)
        out["blocking"] = max(out["blocking"], abs(lhs - rhs) / max(1.0, abs(lhs)))
        w = rng.uniform(-1.0, 1.0, size=n_u)
        zw = sqrt_c @ w
        form = float(zw @ c_inv @ zw)
        out["substitution_form"] = max(out["substitution_form"], abs(form - float(w @ w)) / max(1.0, float(w @ w)))
        resp = zeta_from_z(params, zw) - exact_m @ w
        out["substitution_response"] = max(out["substitution_response"], float(np.max(np.abs(resp))))
    out["ok"] = max(out.values()) <= controls.tol_identity
    return out


def chi_drop_probes(state: FlowState, rng, controls: StepControls) -> dict:
    """Check that shifted small-field configurations stay inside the cutoff.

    Draws next-level block fields, forms the split minimizer, adds the
    covariance-root image of cutoff-bounded fluctuations, and verifies the
    current level's small-field membership still holds.
    """
    spec = state.spec
    if spec is None:
        return {"skipped": True, "ok": True}
    params = state.params
    p0 = spec.p0_k
    sqrt_c = sqrt_covariance(params)
    n_c = params.coarse_lattice.n_sites
    n_u = params.unit_lattice.n_sites
    all_member = True
    margins = []
    for _ in range(controls.probes):
        phi_next = rng.normal(scale=0.3, size=n_c)
        p0f = phi0_next(params, phi_next)
        psi = psi_minimizer(params, phi_next, p0f)
        w = rng.uniform(-0.9 * p0, 0.9 * p0, size=n_u)
        report = membership_sk(params, spec, psi + sqrt_c @ w)
        all_member = all_member and report["member"]
        worst = max(got / cap for got, cap in report["checks"].values())
        margins.append(worst)
    return {"skipped": False, "ok": all_member, "worst_margin": max(margins)}


# ===== completion: extract the next couplings =====


def _star_pieces(state: FlowState, kernel: ResponseKernel, controls: StepControls) -> dict:
    """Scale the localized fluctuation output and extract its relevant parts."""
    e_sharp, sharp_diag = interaction_sharp(state, kernel, controls)
    scaled = scale_down(e_sharp)
    normed = normalize(scaled)
    d = state.lattice.dim
    eps0 = gaussian_truncation_cost(state.cutoff_p0(controls), nodes=controls.measure_nodes)
    return {
        "eps0": eps0,
        "eps0_closed": gaussian_truncation_cost(state.cutoff_p0(controls)),
        "energy_star": float(state.block) ** d * eps0 + normed["energy_out"],
        "mass_star": normed["mass_out"],
        "functional_star": normed["functional"],
        "sharp_diag": sharp_diag,
        "normalized_cube_independent": normed["cube_independent"],
    }


def _reblocked_pieces(state: FlowState) -> dict:
    """Reblock, scale, and normalize the incoming remainder functional."""
    if state.interaction is None:
        return {"energy": 0.0, "mass": 0.0, "functional": None}
    normed = normalize(scale_down(reblock(state.interaction)))
    return {
        "energy": normed["energy_out"],
        "mass": normed["mass_out"],
        "functional": normed["functional"],
    }


def rg_step(state: FlowState, controls: StepControls | None = None) -> tuple:
    """One full small-field step: probes, fluctuation, extraction, envelopes.

    Returns the next state together with a report of every audit the step
    ran; raises StepHypothesisError when the input violates the smallness
    hypotheses instead of producing an unjustified output.
    """
    controls = controls or StepControls()
    t_start = time.perf_counter()
    timings = {}

    hypothesis = state.hypothesis_report(controls.kappa)
    if not hypothesis["ok"]:
        raise StepHypothesisError(
            f"state violates step hypotheses: mass {hypothesis['mass_value']:.3e} vs "
            f"{hypothesis['mass_cap']:.3e}, remainder norm {hypothesis['interaction_norm']:.3e}"
        )
    if state.interaction is not None and state.spec is None:
        raise StepHypothesisError("remainder present but no coupling to set its domain")
    timings["hypothesis"] = time.perf_counter() - t_start

    t0 = time.perf_counter()
    kernel = ResponseKernel.build(state.params, state.cube_exp + 1, controls)
    timings["kernel"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rng = np.random.default_rng(controls.seed)
    audits = blocking_identity_audit(state, rng, controls)
    chi = chi_drop_probes(state, rng, controls)
    timings["audits"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    probe_field = np.zeros(state.lattice.n_sites)
    fluct_zero = fluctuation_integral(state, probe_field, kernel, controls)
    n_c = state.params.coarse_lattice.n_sites
    phi_next_probe = rng.normal(scale=0.2, size=n_c)
    phi0_probe = phi0_next(state.params, phi_next_probe)
    fluct_probe = fluctuation_integral(state, phi0_probe, kernel, controls)
    timings["fluctuation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    reblocked = _reblocked_pieces(state)
    star = _star_pieces(state, kernel, controls)
    timings["completion"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params_next = state.params.rescaled_next()
    d = state.lattice.dim
    block = float(state.block)
    coupling_next = block * state.coupling
    mass_next = block**2 * state.mass_coeff + reblocked["mass"] + star["mass_star"]
    energy_next = block**d * state.energy + reblocked["energy"] + star["energy_star"]
    next_geometry = FunctionalGeometry(params_next.lattice, state.cube_exp)
    interaction_next = combine_functionals(
        next_geometry, [(reblocked["functional"], 1.0), (star["functional_star"], 1.0)]
    )
    if not interaction_next.terms:
        interaction_next = None
    state_next = FlowState(
        params=params_next,
        cube_exp=state.cube_exp,
        coupling=coupling_next,
        mass_coeff=mass_next,
        energy=energy_next,
        interaction=interaction_next,
    )
    timings["assembly"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bounds = {}
    spec = state.spec
    if spec is not None:
        lam = state.coupling
        eps = spec.epsilon
        if state.interaction is not None and hypothesis["interaction_norm"] > 0:
            env = block ** (-eps) * lam ** (0.5 + 6.0 * eps) * hypothesis["interaction_norm"]
            bounds["reblocked_mass"] = _bound_entry(reblocked["mass"], env, controls)
        bounds["mass_star"] = _bound_entry(star["mass_star"], block**3 * lam ** (0.75 - 4.0 * eps), controls)
        spec_next = state_next.spec
        if state_next.interaction is not None and spec_next is not None:
            star_norm = norm_global(state_next.interaction, spec_next, controls.kappa, strategy="sampled")
            bounds["interaction_next"] = _bound_entry(
                star_norm["value"], block**3 * lam ** (0.25 - 10.0 * eps), controls
            )
            bounds["interaction_next"]["certificate"] = star_norm["certificate"]
        margin = 10.0
        p0 = state.cutoff_p0(controls)
        bounds["truncation_cost"] = {
            "value": star["eps0_closed"],
            "envelope": margin * math.exp(-0.5 * p0**2),
            "ok": star["eps0_closed"] <= margin * math.exp(-0.5 * p0**2),
        }
    timings["bounds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    invariants = {
        "coupling_exact": state_next.coupling == block * state.coupling,
        "mass_parameter_residual": abs(
            params_next.mass_k - state.params.mass0 * float(state.block) ** (2 * (state.level + 1))
        ),
    }
    if state_next.interaction is not None:
        renorm = normalize(state_next.interaction)
        invariants["renormalized_energy"] = max(
            (abs(v) for v in renorm["energy_by_cube"].values()), default=0.0
        )
        invariants["renormalized_mass"] = max(
            (abs(v) for v in renorm["mass_by_cube"].values()), default=0.0
        )
        probe = np.random.default_rng(controls.seed + 1).normal(
            scale=0.3, size=params_next.lattice.n_sites
        )
        vals_p = sum(evaluate(state_next.interaction, p, probe) for p, _ in state_next.interaction.terms)
        vals_m = sum(evaluate(state_next.interaction, p, -probe) for p, _ in state_next.interaction.terms)
        invariants["evenness"] = abs(vals_p - vals_m) / max(1.0, abs(vals_p))
    timings["invariants"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start

    report = {
        "level": state.level,
        "dim": d,
        "block": state.block,
        "hypothesis": hypothesis,
        "kernel": kernel.diagnostics,
        "audits": audits,
        "chi_probes": chi,
        "fluctuation": {
            "epsilon0": fluct_zero["epsilon0"],
            "epsilon0_closed": fluct_zero["epsilon0_closed"],
            "cross_error_zero": fluct_zero["cross_error"],
            "cross_error_probe": fluct_probe["cross_error"],
            "assembly_residual": max(fluct_zero["assembly_residual"], fluct_probe["assembly_residual"]),
            "cluster_tail": max(fluct_zero["cluster_tail"], fluct_probe["cluster_tail"]),
            "cluster_converged": fluct_zero["cluster_converged"] and fluct_probe["cluster_converged"],
        },
        "pieces": {
            "reblocked_energy": reblocked["energy"],
            "reblocked_mass": reblocked["mass"],
            "energy_star": star["energy_star"],
            "mass_star": star["mass_star"],
            "epsilon0": star["eps0"],
        },
        "sharp_diag": star["sharp_diag"],
        "bounds": bounds,
        "invariants": invariants,
        "next": {
            "coupling": state_next.coupling,
            "mass_coeff": state_next.mass_coeff,
            "energy": state_next.energy,
            "has_interaction": state_next.interaction is not None,
        },
        "timings": timings,
    }
    return state_next, report


def _bound_entry(value: float, envelope: float, controls: StepControls) -> dict:
    prefactor = abs(value) / envelope if envelope > 0 else math.inf
    return {
        "value": float(value),
        "envelope": float(envelope),
        "prefactor": float(prefactor),
        "ok": prefactor <= controls.prefactor_cap,
    }


# ===== derivatives of the extraction map =====


def _interaction_direction(state: FlowState, controls: StepControls) -> LocalFunctional:
    """Unit-normalized even direction in remainder space (quartic density)."""
    geometry = state.geometry
    coeff = 1.0
    spec = state.spec
    if spec is not None:
        trial = {geometry.polymer((c,)): (MonomialTerm(1.0, 4),) for c in range(geometry.cube_torus.n_cubes)}
        probe = LocalFunctional.from_dict(geometry, trial, even=True, symmetric=True)
        scale = norm_global(probe, spec, 0.5, strategy="analytic")["value"]
        if scale > 0:
            coeff = 1.0 / scale
    else:
        # without a coupling there is no analyticity domain; size the
        # direction so a cube filled at the fluctuation cutoff has unit value
        p0 = state.cutoff_p0(controls)
        n_anchor = geometry.sites_of(geometry.polymer((0,))).size
        coeff = 1.0 / (geometry.lattice.site_weight * n_anchor * max(p0, 1.0) ** 4)
    term_map = {geometry.polymer((c,)): (MonomialTerm(coeff, 4),) for c in range(geometry.cube_torus.n_cubes)}
    return LocalFunctional.from_dict(geometry, term_map, even=True, symmetric=True)


def _functional_gap(a: LocalFunctional | None, b: LocalFunctional | None, rng, n_fields: int = 4) -> float:
    """Max absolute evaluation gap between two functionals on probe fields."""
    if a is None and b is None:
        return 0.0
    ref = a if a is not None else b
    polys = {p for p, _ in ref.terms}
    if a is not None and b is not None:
        polys = {p for p, _ in a.terms} | {p for p, _ in b.terms}
    worst = 0.0
    for _ in range(n_fields):
        values = rng.normal(scale=0.5, size=ref.geometry.lattice.n_sites)
        for p in polys:
            va = evaluate(a, p, values) if a is not None else 0.0
            vb = evaluate(b, p, values) if b is not None else 0.0
            worst = max(worst, abs(va - vb))
    return worst


def cauchy_derivatives(state: FlowState, controls: StepControls | None = None) -> dict:
    """Difference-quotient derivatives of the extraction map at the state.

    Requires an interior point (half the hypothesis bounds); differentiates
    the extracted mass and remainder outputs along the mass coefficient and
    along a normalized remainder direction, comparing extrapolated symmetric
    and forward quotients.
    """
    controls = controls or StepControls()
    mass_cap = 0.5 * math.sqrt(state.coupling)
    if abs(state.mass_coeff) > mass_cap:
        raise ValueError("mass coefficient is not interior to the hypothesis region")
    hypothesis = state.hypothesis_report(controls.kappa)
    if state.interaction is not None and hypothesis["interaction_norm"] > 0.5:
        raise ValueError("remainder norm is not interior to the hypothesis region")

    kernel = ResponseKernel.build(state.params, state.cube_exp + 1, controls)
    rng = np.random.default_rng(controls.seed)
    cache: dict = {}

    def star_at(st: FlowState, tag) -> dict:
        if tag not in cache:
            cache[tag] = _star_pieces(st, kernel, controls)
        return cache[tag]

    def mass_shifted(h: float) -> FlowState:
        return replace(state, mass_coeff=state.mass_coeff + h)

    out = {}
    h = 0.25 * math.sqrt(state.coupling) if state.coupling > 0 else 0.1
    base = star_at(state, ("mass", 0.0))
    f_p = star_at(mass_shifted(h), ("mass", h))
    f_m = star_at(mass_shifted(-h), ("mass", -h))
    f_p2 = star_at(mass_shifted(0.5 * h), ("mass", 0.5 * h))
    f_m2 = star_at(mass_shifted(-0.5 * h), ("mass", -0.5 * h))
    f_p4 = star_at(mass_shifted(0.25 * h), ("mass", 0.25 * h))

    def quotients(key: str) -> dict:
        sym_h = (f_p[key] - f_m[key]) / (2.0 * h)
        sym_h2 = (f_p2[key] - f_m2[key]) / h
        sym = (4.0 * sym_h2 - sym_h) / 3.0
        d1 = (f_p[key] - base[key]) / h
        d2 = (f_p2[key] - base[key]) / (0.5 * h)
        d4 = (f_p4[key] - base[key]) / (0.25 * h)
        fwd = (4.0 * (2.0 * d4 - d2) - (2.0 * d2 - d1)) / 3.0
        return {"value": sym, "forward": fwd, "agreement": abs(sym - fwd), "step": h}

    out["mass_star_by_mass"] = quotients("mass_star")
    out["energy_star_by_mass"] = quotients("energy_star")
    gap_p = _functional_gap(f_p["functional_star"], f_m["functional_star"], rng)
    out["functional_star_by_mass"] = {"difference_norm": gap_p / (2.0 * h), "step": h}

    direction = _interaction_direction(state, controls)
    t = 0.2
    base_int = state.interaction

    def interaction_shifted(s: float) -> FlowState:
        shifted = combine_functionals(state.geometry, [(base_int, 1.0), (direction, s)])
        return replace(state, interaction=shifted)

    g_p = star_at(interaction_shifted(t), ("dir", t))
    g_m = star_at(interaction_shifted(-t), ("dir", -t))
    g_p2 = star_at(interaction_shifted(0.5 * t), ("dir", 0.5 * t))
    g_m2 = star_at(interaction_shifted(-0.5 * t), ("dir", -0.5 * t))
    g_p4 = star_at(interaction_shifted(0.25 * t), ("dir", 0.25 * t))

    def dir_quotients(key: str) -> dict:
        sym_h = (g_p[key] - g_m[key]) / (2.0 * t)
        sym_h2 = (g_p2[key] - g_m2[key]) / t
        sym = (4.0 * sym_h2 - sym_h) / 3.0
        d1 = (g_p[key] - base[key]) / t
        d2 = (g_p2[key] - base[key]) / (0.5 * t)
        d4 = (g_p4[key] - base[key]) / (0.25 * t)
        fwd = (4.0 * (2.0 * d4 - d2) - (2.0 * d2 - d1)) / 3.0
        return {"value": sym, "forward": fwd, "agreement": abs(sym - fwd), "step": t}

    out["mass_star_by_interaction"] = dir_quotients("mass_star")
    gap_d = _functional_gap(g_p["functional_star"], g_m["functional_star"], rng)
    out["functional_star_by_interaction"] = {"difference_norm": gap_d / (2.0 * t), "step": t}
    return out
