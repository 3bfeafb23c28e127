"""Localized propagators and their random-walk reassembly.

Builds Neumann-restricted inverses of the constrained lattice operator on
enlarged cubes, glues them with a smooth partition of unity into a parametrix,
and expands the global inverse as a sum over walks on the cube-center grid.
Includes the shifted-resolvent variant, cube-weight decoupling, and empirical
decay profiling.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from blockrg.functional import holder_increment_max
from blockrg.gaussian_flow import (
    GaussParams,
    bm_k,
    bm_k1,
    constrained_op,
    gkr_matrix,
    green_gk,
)
from blockrg.lattice import (
    CubeGrid,
    Region,
    TorusLattice,
    box_region,
    forward_derivative,
    laplacian_matrix,
    neumann_laplacian,
    pairwise_supdist,
    whole_torus_region,
)

WALK_TERM_CAP = 2_000_000
PATH_STATE_CENTER_CAP = 12


def smoothstep(u):
    """C2 quintic ramp from 0 at u<=0 to 1 at u>=1."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    return u * u * u * (10.0 + u * (-15.0 + 6.0 * u))


def bump_profile(t):
    """Even C2 bump: 1 on |t|<=1/3, 0 on |t|>=2/3, squares summing to 1.

    On the shoulder the value is cos(pi/2 * smoothstep(3|t|-1)); the smoothstep
    symmetry S(u) + S(1-u) = 1 makes h^2(t) + h^2(1-t) = 1 on the overlap, so
    integer translates of h^2 tile the line exactly.
    """
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    out[t <= 1.0 / 3.0] = 1.0
    shoulder = (t > 1.0 / 3.0) & (t < 2.0 / 3.0)
    out[shoulder] = np.cos(0.5 * np.pi * smoothstep(3.0 * t[shoulder] - 1.0))
    return out


@dataclass(frozen=True)
class PartitionOfUnity:
    """Smooth bumps centered on a cube grid whose squares sum to one."""

    lattice: TorusLattice
    cube_exp: int
    grid: CubeGrid
    bumps: np.ndarray  # (n_centers, n_sites)

    @classmethod
    def build(cls, lattice: TorusLattice, cube_exp: int) -> "PartitionOfUnity":
        if cube_exp < 1 or cube_exp > lattice.side_exp:
            raise ValueError("cube exponent must be in [1, side_exp]")
        grid = CubeGrid(lattice, cube_exp)
        n_c = grid.cubes_per_side
        cube_side = grid.cube_side
        pos_axis = (np.arange(lattice.sites_per_side) + 0.5) * lattice.spacing
        centers_axis = (np.arange(n_c) + 0.5) * cube_side
        if n_c == 1:
            axis_table = np.ones((1, lattice.sites_per_side))
        else:
            delta = pos_axis[None, :] - centers_axis[:, None]
            delta = (delta + lattice.side / 2.0) % lattice.side - lattice.side / 2.0
            axis_table = bump_profile(delta / cube_side)
        coords = lattice.coords(np.arange(lattice.n_sites))
        bumps = np.empty((grid.n_cubes, lattice.n_sites))
        for c in range(grid.n_cubes):
            cc = grid.cube_coords(c)
            row = np.ones(lattice.n_sites)
            for mu in range(lattice.dim):
                row *= axis_table[cc[mu]][coords[:, mu]]
            bumps[c] = row
        return cls(lattice, cube_exp, grid, bumps)

    @property
    def n_centers(self) -> int:
        return self.grid.n_cubes

    def partition_residual(self) -> float:
        return float(np.max(np.abs(np.sum(self.bumps**2, axis=0) - 1.0)))

    def support_report(self) -> dict:
        """Check the flat-top and support windows against center distances."""
        cube_side = self.grid.cube_side
        sites = np.arange(self.lattice.n_sites)
        worst_flat = 0.0
        worst_supp = 0.0
        for c in range(self.n_centers):
            center = self.grid.cube_center(c)
            pos = self.lattice.positions()
            delta = np.abs(pos - center[None, :])
            delta = np.minimum(delta, self.lattice.side - delta)
            dist = np.max(delta, axis=1)
            if self.grid.cubes_per_side > 1:
                inside = dist <= cube_side / 3.0 + 1e-12
                outside = dist >= 2.0 * cube_side / 3.0 - 1e-12
                worst_flat = max(worst_flat, float(np.max(np.abs(self.bumps[c][inside] - 1.0))))
                if np.any(outside):
                    worst_supp = max(worst_supp, float(np.max(np.abs(self.bumps[c][outside]))))
        return {"flat_top_error": worst_flat, "support_leak": worst_supp, "n_sites": len(sites)}

    def derivative_report(self) -> dict:
        """Measured sup of first and second bump differences, scaled by M, M^2."""
        m_len = self.grid.cube_side
        sup1 = 0.0
        sup2 = 0.0
        for c in range(self.n_centers):
            for mu in range(self.lattice.dim):
                d1 = forward_derivative(self.lattice, self.bumps[c], mu)
                sup1 = max(sup1, float(np.max(np.abs(d1))))
                for nu in range(self.lattice.dim):
                    d2 = forward_derivative(self.lattice, d1, nu)
                    sup2 = max(sup2, float(np.max(np.abs(d2))))
        return {"c_first": sup1 * m_len, "c_second": sup2 * m_len**2}


# ===== Neumann-restricted operators =====


def enlarged_cube_region(pou: PartitionOfUnity, center: int) -> Region:
    """Region of the 3x-enlarged cube around a center, or the torus if it covers it."""
    lattice = pou.lattice
    w = pou.grid.sites_per_cube_side
    n = lattice.sites_per_side
    if 3 * w >= n:
        return whole_torus_region(lattice)
    anchor = (np.asarray(pou.grid.cube_coords(center)) - 1) * w
    return box_region(lattice, tuple(anchor), (3 * w,) * lattice.dim)


def region_operator(region: Region, params: GaussParams, shift_r: float | None = None) -> np.ndarray:
    """Constrained operator on a region with boundary-crossing bonds dropped.

    The averaging projector restricts by submatrix, which agrees with the
    intrinsic region form because regions here are unions of unit blocks.
    With shift_r the two-projector shifted-resolvent coefficients are used.
    """
    sites = np.asarray(region.sites)
    lap = neumann_laplacian(region)
    op = -lap + params.mass_k * np.eye(region.n_sites)
    ix = np.ix_(sites, sites)
    if shift_r is None:
        op += params.a_k * bm_k(params).projector_matrix()[ix]
        return op
    r = float(shift_r)
    ak, a, lsq = params.a_k, params.stiffness, float(params.block) ** 2
    c1 = ak * r / (ak + r)
    c2 = ak**2 * (a / lsq) / ((ak + r) * (ak + a / lsq + r))
    op += c1 * bm_k(params).projector_matrix()[ix]
    op += c2 * bm_k1(params).projector_matrix()[ix]
    return op


def neumann_green(region: Region, params: GaussParams, shift_r: float | None = None, check_embed: bool = True) -> np.ndarray:
    """Inverse of the Neumann-restricted operator, on region-local indices."""
    if check_embed and region.n_sites < region.lattice.n_sites:
        # unwrappable iff per axis the coordinates fit, after cutting the
        # largest circular gap, in a window shorter than half the side
        lat = region.lattice
        coords = lat.coords(np.asarray(region.sites))
        n = lat.sites_per_side
        for mu in range(lat.dim):
            occ = np.unique(coords[:, mu])
            gaps = np.diff(np.concatenate([occ, occ[:1] + n]))
            extent = n - int(np.max(gaps))
            if extent >= n / 2.0:
                raise ValueError("region cannot embed isometrically; diameter reaches half the torus side")
    op = region_operator(region, params, shift_r)
    evals = np.linalg.eigvalsh(op)
    if evals[0] <= 0.0:
        raise ValueError("restricted operator is not positive definite")
    return sla.inv(op)


def embed_region_matrix(region: Region, local: np.ndarray) -> np.ndarray:
    """Pad a region-local matrix with zeros to full-lattice indexing."""
    n = region.lattice.n_sites
    out = np.zeros((n, n), dtype=local.dtype)
    sites = np.asarray(region.sites)
    out[np.ix_(sites, sites)] = local
    return out


def effective_mass_lower_bound(region: Region, params: GaussParams) -> float:
    """Largest c with A_region >= c (-Laplacian + 1), by generalized eigensolve."""
    a = region_operator(region, params)
    b = -neumann_laplacian(region) + np.eye(region.n_sites)
    return float(sla.eigh(a, b, eigvals_only=True)[0])


# ===== parametrix =====


def _commutator_base(params: GaussParams, shift_r: float | None) -> np.ndarray:
    lap = laplacian_matrix(params.lattice)
    if shift_r is None:
        return -lap + params.a_k * bm_k(params).projector_matrix()
    r = float(shift_r)
    ak, a, lsq = params.a_k, params.stiffness, float(params.block) ** 2
    c1 = ak * r / (ak + r)
    c2 = ak**2 * (a / lsq) / ((ak + r) * (ak + a / lsq + r))
    return -lap + c1 * bm_k(params).projector_matrix() + c2 * bm_k1(params).projector_matrix()


@dataclass(frozen=True)
class ParametrixPieces:
    """Per-center local solves and commutators feeding the walk expansion."""

    pou: PartitionOfUnity
    term0: np.ndarray  # (n_centers, n, n): bump-sandwiched local inverses
    step: np.ndarray  # (n_centers, n, n): commutator times local inverse times bump
    g_star: np.ndarray
    defect: np.ndarray


def parametrix(pou: PartitionOfUnity, params: GaussParams, shift_r: float | None = None) -> ParametrixPieces:
    """Glued local inverses G* with defect K so that A G* = I - K."""
    if params.lattice != pou.lattice:
        raise ValueError("partition and parameters live on different lattices")
    n = pou.lattice.n_sites
    base = _commutator_base(params, shift_r)
    term0 = np.empty((pou.n_centers, n, n))
    step = np.empty((pou.n_centers, n, n))
    for c in range(pou.n_centers):
        region = enlarged_cube_region(pou, c)
        local = neumann_green(region, params, shift_r, check_embed=False)
        gt = embed_region_matrix(region, local)
        h = pou.bumps[c]
        # commutator K_c = -[base, diag(h)] written entrywise
        k_c = base * (h[:, None] - h[None, :])
        gt_h = gt * h[None, :]
        term0[c] = h[:, None] * gt_h
        step[c] = k_c @ gt_h
    g_star = term0.sum(axis=0)
    defect = step.sum(axis=0)
    return ParametrixPieces(pou, term0, step, g_star, defect)


def parametrix_identity_residual(pieces: ParametrixPieces, params: GaussParams, shift_r: float | None = None) -> float:
    """max |A G* - (I - K)|; exact up to solver precision by construction."""
    n = params.lattice.n_sites
    if shift_r is None:
        a_op = constrained_op(params)
    else:
        a_op = _commutator_base(params, shift_r) + params.mass_k * np.eye(n)
    lhs = a_op @ pieces.g_star
    rhs = np.eye(n) - pieces.defect
    return float(np.max(np.abs(lhs - rhs)))


def defect_norm(pieces: ParametrixPieces) -> float:
    return float(np.linalg.norm(pieces.defect, 2))


# ===== random-walk expansion =====


def center_neighbors(grid: CubeGrid) -> list[tuple[int, ...]]:
    """Adjacent centers (including self) for each cube-grid center."""
    n_c = grid.cubes_per_side
    out = []
    offsets = np.stack(np.meshgrid(*([np.arange(-1, 2)] * grid.lattice.dim), indexing="ij"), axis=-1).reshape(
        -1, grid.lattice.dim
    )
    for c in range(grid.n_cubes):
        cc = np.asarray(grid.cube_coords(c))
        nb = {int(grid.cube_flat(tuple((cc + off) % n_c))) for off in offsets}
        out.append(tuple(sorted(nb)))
    return out


def tilde_cube_set(grid: CubeGrid, center: int) -> frozenset:
    """Cubes composing the enlarged cube around a center."""
    return frozenset(center_neighbors(grid)[center])


@dataclass(frozen=True)
class WalkTerm:
    """One walk: its center path, assembled operator, and swept cube support."""

    path: tuple
    matrix: np.ndarray
    support: frozenset  # cubes of the union of enlarged cubes along path[1:]


def walk_terms(params: GaussParams, cube_exp: int, n_max: int, shift_r: float | None = None) -> list[WalkTerm]:
    """Exhaustive walk enumeration; exponential in n_max, for small checks."""
    pou = PartitionOfUnity.build(params.lattice, cube_exp)
    pieces = parametrix(pou, params, shift_r)
    nbrs = center_neighbors(pou.grid)
    total = pou.n_centers * sum(len(nbrs[0]) ** k for k in range(n_max + 1))
    if total * params.lattice.n_sites**2 > WALK_TERM_CAP * 100:
        raise ValueError("walk enumeration too large; lower n_max")
    frontier = [WalkTerm((c,), pieces.term0[c], frozenset()) for c in range(pou.n_centers)]
    out = list(frontier)
    for _ in range(n_max):
        nxt = []
        for wt in frontier:
            for c in nbrs[wt.path[-1]]:
                nxt.append(
                    WalkTerm(wt.path + (c,), wt.matrix @ pieces.step[c], wt.support | frozenset(nbrs[c]))
                )
        frontier = nxt
        out.extend(frontier)
    return out


def random_walk_expansion(
    params: GaussParams,
    cube_exp: int,
    n_max: int,
    s=None,
    shift_r: float | None = None,
    keep_orders: bool = False,
) -> dict:
    """Partial sums of the walk series with per-order norms and a convergence flag.

    With s omitted the series collapses to powers of the defect. With per-cube
    weights s (real or complex) each walk is weighted by the product of s over
    the cubes its enlarged-cube union sweeps; walks are grouped by endpoint and
    swept support, which keeps the weighting exact at polynomial cost.
    """
    pou = PartitionOfUnity.build(params.lattice, cube_exp)
    pieces = parametrix(pou, params, shift_r)
    n = params.lattice.n_sites
    orders = []
    order_norms = []
    if s is None:
        current = pieces.g_star.copy()
        total = np.zeros((n, n))
        for _ in range(n_max + 1):
            orders.append(current)
            order_norms.append(float(np.max(np.abs(current))))
            total = total + current
            current = current @ pieces.defect
    else:
        s = np.asarray(s)
        if pou.n_centers > PATH_STATE_CENTER_CAP**params.lattice.dim:
            raise ValueError("too many centers for weighted path accounting")
        nbrs = center_neighbors(pou.grid)
        sweep = [frozenset(nbrs[c]) for c in range(pou.n_centers)]
        dtype = np.complex128 if np.iscomplexobj(s) else np.float64
        total = np.zeros((n, n), dtype=dtype)

        def weight(support: frozenset):
            w = 1.0
            for cube in support:
                w = w * s[cube]
            return w

        states = {}
        order0 = np.zeros((n, n), dtype=dtype)
        for c in range(pou.n_centers):
            states[(c, frozenset())] = pieces.term0[c].astype(dtype)
            order0 += pieces.term0[c]
        orders.append(order0)
        order_norms.append(float(np.max(np.abs(order0))))
        total += order0
        for _ in range(n_max):
            nxt = {}
            for (end, supp), mat in states.items():
                for c in nbrs[end]:
                    new_supp = supp | sweep[c]
                    if weight(new_supp) == 0:
                        continue
                    key = (c, new_supp)
                    acc = nxt.get(key)
                    add = mat @ pieces.step[c]
                    nxt[key] = add if acc is None else acc + add
            states = nxt
            order_n = np.zeros((n, n), dtype=dtype)
            for (end, supp), mat in states.items():
                order_n += weight(supp) * mat
            orders.append(order_n)
            order_norms.append(float(np.max(np.abs(order_n))))
            total += order_n
            if not states:
                break
    ratios = [order_norms[i] / order_norms[i - 1] for i in range(1, len(order_norms)) if order_norms[i - 1] > 0]
    tail = ratios[1:] if len(ratios) > 1 else ratios
    converged = bool(tail) and all(r < 1.0 for r in tail)
    out = {
        "partial": total,
        "order_norms": order_norms,
        "ratios": ratios,
        "converged": converged,
        "n_centers": pou.n_centers,
    }
    if keep_orders:
        out["orders"] = orders
    return out


def gkr_random_walk(params: GaussParams, cube_exp: int, r: float, n_max: int, **kw) -> dict:
    """Walk expansion of the shifted resolvent; compare against gkr_matrix."""
    out = random_walk_expansion(params, cube_exp, n_max, shift_r=float(r), **kw)
    out["direct"] = gkr_matrix(params, float(r))
    out["final_error"] = float(np.max(np.abs(out["partial"] - out["direct"])))
    return out


def walk_support_matrices(params: GaussParams, cube_exp: int, n_max: int, shift_r: float | None = None) -> dict:
    """Walk partial sums grouped by the union of enlarged cubes along the path.

    Unlike the weighted expansion, the union here includes the starting
    center's enlarged cube, so each returned matrix has rows and columns
    supported on the sites of its own cube set; that is what makes per-cube
    weights factor through these matrices with exact locality.  Summing all
    matrices recovers the plain partial sum at the same truncation order.
    """
    pou = PartitionOfUnity.build(params.lattice, cube_exp)
    pieces = parametrix(pou, params, shift_r)
    if pou.n_centers > PATH_STATE_CENTER_CAP**params.lattice.dim:
        raise ValueError("too many centers for support accounting")
    nbrs = center_neighbors(pou.grid)
    sweep = [frozenset(nbrs[c]) for c in range(pou.n_centers)]
    n = params.lattice.n_sites
    by_support: dict = {}

    def accumulate(supp, mat):
        acc = by_support.get(supp)
        by_support[supp] = mat.copy() if acc is None else acc + mat

    states = {}
    order_norms = []
    order_sum = np.zeros((n, n))
    for c in range(pou.n_centers):
        key = (c, sweep[c])
        acc = states.get(key)
        states[key] = pieces.term0[c].copy() if acc is None else acc + pieces.term0[c]
        order_sum += pieces.term0[c]
    for (_, supp), mat in states.items():
        accumulate(supp, mat)
    order_norms.append(float(np.max(np.abs(order_sum))))
    for _ in range(n_max):
        nxt: dict = {}
        for (end, supp), mat in states.items():
            for c in nbrs[end]:
                key = (c, supp | sweep[c])
                add = mat @ pieces.step[c]
                acc = nxt.get(key)
                nxt[key] = add if acc is None else acc + add
        states = nxt
        order_sum = np.zeros((n, n))
        for (_, supp), mat in states.items():
            accumulate(supp, mat)
            order_sum += mat
        order_norms.append(float(np.max(np.abs(order_sum))))
        if not states or order_norms[-1] == 0.0:
            break
    ratios = [order_norms[i] / order_norms[i - 1] for i in range(1, len(order_norms)) if order_norms[i - 1] > 0]
    tail = ratios[1:] if len(ratios) > 1 else ratios
    return {
        "by_support": by_support,
        "order_norms": order_norms,
        "ratios": ratios,
        "converged": bool(tail) and all(r < 1.0 for r in tail),
        "n_centers": pou.n_centers,
        "grid": pou.grid,
    }


# ===== decay profiling =====


def block_decay_table(matrix: np.ndarray, lattice: TorusLattice, norm: str = "sup") -> list:
    """Worst block norm at each unit-cube separation, as (separation, value) rows."""
    grid = CubeGrid(lattice, 0)
    best = {}
    for y in range(grid.n_cubes):
        sy = grid.sites_of_cube(y)
        for yp in range(grid.n_cubes):
            syp = grid.sites_of_cube(yp)
            block = matrix[np.ix_(sy, syp)]
            if norm == "sup":
                val = float(np.max(np.sum(np.abs(block), axis=1)))
            elif norm == "l2":
                val = float(np.linalg.norm(block, 2))
            else:
                raise ValueError("norm must be 'sup' or 'l2'")
            sep = round(float(np.max(_center_gap(grid, y, yp))), 9)
            best[sep] = max(best.get(sep, 0.0), val)
    return sorted(best.items())


def _center_gap(grid: CubeGrid, y: int, yp: int) -> np.ndarray:
    a = grid.cube_center(y)
    b = grid.cube_center(yp)
    d = np.abs(a - b)
    return np.minimum(d, grid.lattice.side - d)


def fit_exponential_decay(table) -> dict:
    """Least-squares log-linear fit value ~ C exp(-gamma * separation)."""
    rows = [(sep, val) for sep, val in table if val > 1e-14]
    if len(rows) < 3:
        raise ValueError("need at least three separations with signal to fit")
    seps = np.array([r[0] for r in rows])
    logs = np.log(np.array([r[1] for r in rows]))
    slope, intercept = np.polyfit(seps, logs, 1)
    return {"gamma": float(-slope), "prefactor": float(np.exp(intercept)), "rows": rows}


def operator_decay_fit(matrix: np.ndarray, lattice: TorusLattice, norm: str = "sup") -> dict:
    return fit_exponential_decay(block_decay_table(matrix, lattice, norm))


def holder_seminorm(matrix: np.ndarray, lattice: TorusLattice, source, alpha: float) -> dict:
    """Largest ratio of gradient increments of the solve to distance^alpha."""
    if not 0.5 < alpha < 1.0:
        raise ValueError("alpha must be in (1/2, 1)")
    g = matrix @ np.asarray(source, dtype=np.float64)
    grads = np.stack([forward_derivative(lattice, g, mu) for mu in range(lattice.dim)], axis=1)
    return {
        "value": float(holder_increment_max(lattice, grads, alpha)),
        "gradient_sup": float(np.max(np.abs(grads))),
    }


def holder_decay_fit(matrix: np.ndarray, lattice: TorusLattice, alpha: float) -> dict:
    """Per-target-cube Holder seminorm of solves from single-cube sources, with decay fit."""
    if not 0.5 < alpha < 1.0:
        raise ValueError("alpha must be in (1/2, 1)")
    grid = CubeGrid(lattice, 0)
    best = {}
    for yp in range(grid.n_cubes):
        source = np.zeros(lattice.n_sites)
        source[grid.sites_of_cube(yp)] = 1.0
        g = matrix @ source
        grads = np.stack([forward_derivative(lattice, g, mu) for mu in range(lattice.dim)], axis=1)
        for y in range(grid.n_cubes):
            sy = grid.sites_of_cube(y)
            val = 0.0
            dists = pairwise_supdist(lattice, sy, sy)
            for i in range(len(sy)):
                for j in range(len(sy)):
                    dij = dists[i, j]
                    if 0.0 < dij <= 1.0:
                        val = max(val, float(np.max(np.abs(grads[sy[i]] - grads[sy[j]]))) / dij**alpha)
            sep = round(float(np.max(_center_gap(grid, y, yp))), 9)
            best[sep] = max(best.get(sep, 0.0), val)
    return fit_exponential_decay(sorted(best.items()))


def complex_weight_probe(params: GaussParams, cube_exp: int, n_max: int, magnitude: float | None = None) -> dict:
    """Per-order norms with constant complex cube weights of the given magnitude."""
    grid = CubeGrid(params.lattice, cube_exp)
    if magnitude is None:
        magnitude = float(grid.cube_side) ** 0.5
    s = np.full(grid.n_cubes, magnitude * np.exp(1j * 0.37))
    out = random_walk_expansion(params, cube_exp, n_max, s=s)
    out["magnitude"] = magnitude
    return out
