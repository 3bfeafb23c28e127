"""The Gaussian (free-field) side of the block-spin flow.

Everything here is exact finite-dimensional linear algebra: the recursion of
the blocking stiffness, constrained propagators, minimizers of the free
action given a coarse field, the effective coarse quadratic form, the
fluctuation covariance with its square root, and the resolvent identity that
expresses shifted covariances through shifted propagators.  All operators
act on flat value vectors; adjoints are always taken with respect to the
weighted (Riemann sum) inner products, so the adjoint of a block average is
the piecewise constant extension.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from blockrg.averaging import BlockMap
from blockrg.lattice import (
    Field,
    TorusLattice,
    gradient_norm_sq,
    inner_product,
    laplacian_matrix,
    norm_sq,
    scale_field,
)


def stiffness_closed(a: float, block: int, k: int) -> float:
    """Blocking stiffness after k averaging steps, closed form."""
    if k < 1:
        raise ValueError("defined for k >= 1")
    r = float(block) ** -2
    return a * (1.0 - r) / (1.0 - r**k)


def stiffness_recursive(a: float, block: int, k: int) -> float:
    """Same sequence by the one-step recursion a' = a_k a / (a_k + a L^-2)."""
    if k < 1:
        raise ValueError("defined for k >= 1")
    r = float(block) ** -2
    ak = a
    for _ in range(k - 1):
        ak = ak * a / (ak + a * r)
    return ak


@dataclass(frozen=True)
class GaussParams:
    """Free-flow parameters at level k on the matching fine lattice.

    lattice: the fine lattice, refine_exp == level;
    stiffness: the bare blocking stiffness a;
    mass0: the bare mass term; the level-k mass is mass0 * L**(2k).
    """

    lattice: TorusLattice
    stiffness: float
    mass0: float
    level: int

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level must be >= 1")
        if self.lattice.refine_exp != self.level:
            raise ValueError("lattice refine_exp must equal the level")
        if self.stiffness <= 0 or self.mass0 < 0:
            raise ValueError("need stiffness > 0 and mass0 >= 0")

    @property
    def block(self) -> int:
        return self.lattice.block

    @property
    def a_k(self) -> float:
        return stiffness_closed(self.stiffness, self.block, self.level)

    @property
    def a_next(self) -> float:
        return stiffness_closed(self.stiffness, self.block, self.level + 1)

    @property
    def mass_k(self) -> float:
        return self.mass0 * float(self.block) ** (2 * self.level)

    @property
    def unit_lattice(self) -> TorusLattice:
        """Where the coarse field lives: spacing one."""
        return self.lattice.coarsened(self.level)

    @property
    def coarse_lattice(self) -> TorusLattice:
        """One blocking past the unit lattice: spacing L."""
        return self.lattice.coarsened(self.level + 1)

    def rescaled_next(self) -> "GaussParams":
        """Parameters after one more averaging plus the rescaling."""
        return GaussParams(self.lattice.rescaled(up=False), self.stiffness, self.mass0, self.level + 1)


@lru_cache(maxsize=None)
def bm_k(params: GaussParams) -> BlockMap:
    return BlockMap(params.lattice, params.level)


@lru_cache(maxsize=None)
def bm_unit(params: GaussParams) -> BlockMap:
    return BlockMap(params.unit_lattice, 1)


@lru_cache(maxsize=None)
def bm_k1(params: GaussParams) -> BlockMap:
    return BlockMap(params.lattice, params.level + 1)


@lru_cache(maxsize=None)
def constrained_op(params: GaussParams) -> np.ndarray:
    """-laplacian + mass_k + a_k (extension o average), the inverse of green_gk."""
    lap = laplacian_matrix(params.lattice)
    proj = bm_k(params).projector_matrix()
    n = params.lattice.n_sites
    return -lap + params.mass_k * np.eye(n) + params.a_k * proj


@lru_cache(maxsize=None)
def green_gk(params: GaussParams) -> np.ndarray:
    """Propagator with the level-k averaging constraint term."""
    return sla.inv(constrained_op(params))


@lru_cache(maxsize=None)
def green_g0_next(params: GaussParams) -> np.ndarray:
    """Propagator whose constraint couples to the next averaging, weight a_{k+1} L^-2."""
    lap = laplacian_matrix(params.lattice)
    proj = bm_k1(params).projector_matrix()
    n = params.lattice.n_sites
    coeff = params.a_next / params.block**2
    return sla.inv(-lap + params.mass_k * np.eye(n) + coeff * proj)


def minimizer_phi(params: GaussParams, coarse_values) -> np.ndarray:
    """Fine minimizer of the free action at a given coarse field."""
    ext = bm_k(params).apply_qt(coarse_values)
    return params.a_k * (green_gk(params) @ ext)


def phi0_next(params: GaussParams, next_values) -> np.ndarray:
    """Fine minimizer constrained by the (k+1)-level coarse field."""
    ext = bm_k1(params).apply_qt(next_values)
    return (params.a_next / params.block**2) * (green_g0_next(params) @ ext)


def minimizer_phi_next_scaled(params: GaussParams, next_unit_values) -> np.ndarray:
    """Level-(k+1) minimizer on the rescaled lattice (for scaling checks)."""
    return minimizer_phi(params.rescaled_next(), next_unit_values)


def psi_minimizer(params: GaussParams, next_values, phi_values) -> np.ndarray:
    """Unit-lattice field that splits one blocking step optimally.

    Minimizes (a/2L^2)|PhiNext - Q psi|^2 + (a_k/2)|psi - Q_k phi|^2 over psi
    at fixed PhiNext (spacing-L field) and fine phi.
    """
    c = (params.stiffness / params.block**2) / (params.a_k + params.stiffness / params.block**2)
    unit_avg = bm_unit(params)
    qk_phi = bm_k(params).apply_q(phi_values)
    qk1_phi = bm_k1(params).apply_q(phi_values)
    return qk_phi - c * unit_avg.apply_qt(qk1_phi) + c * unit_avg.apply_qt(next_values)


def zeta_from_z(params: GaussParams, z_values) -> np.ndarray:
    """Fine response to a unit-lattice fluctuation: a_k G_k (extension of z)."""
    return params.a_k * (green_gk(params) @ bm_k(params).apply_qt(z_values))


def free_action(params: GaussParams, coarse_values, fine_values) -> float:
    """(a_k/2)|Phi - Q_k phi|^2 + (1/2)|grad phi|^2 + (mass_k/2)|phi|^2."""
    unit = params.unit_lattice
    r = np.asarray(coarse_values).reshape(-1) - bm_k(params).apply_q(fine_values)
    out = 0.5 * params.a_k * norm_sq(unit, r)
    out += 0.5 * gradient_norm_sq(params.lattice, fine_values)
    out += 0.5 * params.mass_k * norm_sq(params.lattice, fine_values)
    return out


def s0_next_action(params: GaussParams, next_values, fine_values) -> float:
    """Pre-rescaling form of the next free action, on the current lattices."""
    coarse = params.coarse_lattice
    r = np.asarray(next_values).reshape(-1) - bm_k1(params).apply_q(fine_values)
    out = 0.5 * (params.a_next / params.block**2) * norm_sq(coarse, r)
    out += 0.5 * gradient_norm_sq(params.lattice, fine_values)
    out += 0.5 * params.mass_k * norm_sq(params.lattice, fine_values)
    return out


def j_action(params: GaussParams, next_values, coarse_values, fine_values) -> float:
    """One blocking exponent plus the current free action."""
    coarse = params.coarse_lattice
    r = np.asarray(next_values).reshape(-1) - bm_unit(params).apply_q(coarse_values)
    return 0.5 * (params.stiffness / params.block**2) * norm_sq(coarse, r) + free_action(params, coarse_values, fine_values)


@lru_cache(maxsize=None)
def effective_quadratic_form(params: GaussParams) -> np.ndarray:
    """Coarse form whose value at Phi is twice the minimal free action."""
    bm = bm_k(params)
    g = green_gk(params)
    n = params.unit_lattice.n_sites
    return params.a_k * np.eye(n) - params.a_k**2 * (bm.q_matrix() @ g @ bm.qt_matrix())


@lru_cache(maxsize=None)
def fluctuation_covariance(params: GaussParams) -> np.ndarray:
    """Covariance of the unit-lattice fluctuation in one blocking step."""
    bmu = bm_unit(params)
    proj = bmu.qt_matrix() @ bmu.q_matrix()
    coeff = params.stiffness / params.block**2
    return sla.inv(effective_quadratic_form(params) + coeff * proj)


@lru_cache(maxsize=None)
def sqrt_covariance(params: GaussParams) -> np.ndarray:
    """Symmetric square root of the fluctuation covariance (eigen route)."""
    c = fluctuation_covariance(params)
    w, v = sla.eigh(c)
    if w.min() <= 0:
        raise RuntimeError("fluctuation covariance is not positive definite")
    return (v * np.sqrt(w)) @ v.T


# ===== resolvent identity =====


def _unit_projector(params: GaussParams) -> np.ndarray:
    bmu = bm_unit(params)
    return bmu.qt_matrix() @ bmu.q_matrix()


def a_weight_matrix(params: GaussParams, r: float) -> np.ndarray:
    """Diagonal-in-blocks part of the shifted covariance."""
    p = _unit_projector(params)
    n = params.unit_lattice.n_sites
    alow = params.a_k + r
    ahigh = params.a_k + params.stiffness / params.block**2 + r
    return (np.eye(n) - p) / alow + p / ahigh


def gkr_matrix(params: GaussParams, r: float, form: str = "direct") -> np.ndarray:
    """Shifted constrained propagator on the fine lattice.

    form="direct" assembles the two-projector representation; form="schur"
    assembles the equivalent expression through the block-diagonal weight.
    Both are kept so tests can pit them against each other.
    """
    lap = laplacian_matrix(params.lattice)
    n = params.lattice.n_sites
    ak, a, lsq = params.a_k, params.stiffness, float(params.block) ** 2
    if form == "direct":
        c1 = ak * r / (ak + r)
        c2 = ak**2 * (a / lsq) / ((ak + r) * (ak + a / lsq + r))
        pk = bm_k(params).projector_matrix()
        pk1 = bm_k1(params).projector_matrix()
        op = -lap + params.mass_k * np.eye(n) + c1 * pk + c2 * pk1
        return sla.inv(op)
    if form == "schur":
        bmk = bm_k(params)
        aw = a_weight_matrix(params, r)
        op = constrained_op(params) - ak**2 * (bmk.qt_matrix() @ aw @ bmk.q_matrix())
        return sla.inv(op)
    raise ValueError("unknown form")


def shifted_covariance_direct(params: GaussParams, r: float) -> np.ndarray:
    c_inv = effective_quadratic_form(params) + (params.stiffness / params.block**2) * _unit_projector(params)
    return sla.inv(c_inv + r * np.eye(params.unit_lattice.n_sites))


def shifted_covariance_composite(params: GaussParams, r: float, form: str = "direct") -> np.ndarray:
    aw = a_weight_matrix(params, r)
    bmk = bm_k(params)
    mid = bmk.q_matrix() @ gkr_matrix(params, r, form) @ bmk.qt_matrix()
    return aw + params.a_k**2 * (aw @ mid @ aw)


def resolvent_identity_check(params: GaussParams, r_values) -> dict:
    """Max relative error of the composite covariance against the direct inverse."""
    worst = 0.0
    per_r = {}
    for r in r_values:
        direct = shifted_covariance_direct(params, r)
        comp = shifted_covariance_composite(params, r)
        err = float(np.max(np.abs(direct - comp))) / float(np.max(np.abs(direct)))
        per_r[float(r)] = err
        worst = max(worst, err)
    return {"max_rel_error": worst, "per_r": per_r}


def sqrt_covariance_quadrature_check(params: GaussParams, nodes: int = 400, margin: float = 28.0) -> float:
    """Max abs error of the r-integral route to the covariance square root.

    Substituting r = exp(t) turns (1/pi) int dr/sqrt(r) C(r) into a smooth
    integral over t, truncated a fixed margin beyond the spectrum of the
    inverse covariance and evaluated with Gauss-Legendre nodes.
    """
    c_inv = effective_quadratic_form(params) + (params.stiffness / params.block**2) * _unit_projector(params)
    sigma = np.linalg.eigvalsh(c_inv)
    lo, hi = np.log(sigma.min()) - margin, np.log(sigma.max()) + margin
    x, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * w
    n = params.unit_lattice.n_sites
    acc = np.zeros((n, n))
    for ti, wi in zip(t, w):
        r = np.exp(ti)
        acc += wi * np.exp(ti / 2.0) * sla.inv(c_inv + r * np.eye(n))
    acc /= np.pi
    return float(np.max(np.abs(acc - sqrt_covariance(params))))


# ===== one free blocking step at the density level =====


def _logdet(m: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(m)
    if sign <= 0:
        raise RuntimeError("matrix is not positive definite")
    return val


def free_step_density_check(params: GaussParams) -> dict:
    """Exact Gaussian bookkeeping for one free blocking step.

    Integrates the normalized blocking kernel against the effective coarse
    Gaussian and verifies (a) the resulting quadratic form equals the
    next-level effective form assembled from first principles, and (b) the
    total integral is preserved.  Returns the two residuals.
    """
    lsq = float(params.block) ** 2
    a = params.stiffness
    unit = params.unit_lattice
    coarse = params.coarse_lattice
    w_l = coarse.site_weight
    n_u, n_l = unit.n_sites, coarse.n_sites
    bmu = bm_unit(params)
    q = bmu.q_matrix()

    delta_k = effective_quadratic_form(params)
    m = delta_k + (a / lsq) * w_l * (q.T @ q)  # plain-matrix form of the inverse covariance
    m_inv = sla.inv(m)
    form_integrated = (a / lsq) * np.eye(n_l) - (a / lsq) ** 2 * w_l * (q @ m_inv @ q.T)

    anext = params.a_next
    g0 = green_g0_next(params)
    bm1 = bm_k1(params)
    form_first_principles = (anext / lsq) * np.eye(n_l) - (anext / lsq) ** 2 * (
        bm1.q_matrix() @ g0 @ bm1.qt_matrix()
    )
    form_residual = float(np.max(np.abs(form_integrated - form_first_principles)))

    # total-integral preservation, all pieces by explicit Gaussian formulas
    log_norm_kernel = 0.5 * n_l * np.log(a * w_l / (2.0 * np.pi * lsq))
    log_int_rho_k = 0.5 * n_u * np.log(2.0 * np.pi) - 0.5 * _logdet(delta_k)
    log_int_joint = (
        log_norm_kernel
        + 0.5 * (n_u + n_l) * np.log(2.0 * np.pi)
        - 0.5 * _logdet(m)
        - 0.5 * _logdet(w_l * form_integrated)
    )
    norm_residual = abs(log_int_joint - log_int_rho_k)
    return {"next_form": form_residual, "normalization": norm_residual}


def free_step_identity_check(params: GaussParams, rng, samples: int = 20) -> dict:
    """Residuals of the exact identities tying one blocking step together.

    Random coarse data and fine fields are drawn from rng; each entry is the
    worst absolute residual over the samples.
    """
    out = {
        "overlap_mean": 0.0,
        "intermediate_minimizer": 0.0,
        "minimum_assembly": 0.0,
        "expansion": 0.0,
        "effective_form": 0.0,
        "scale_action": 0.0,
        "scale_minimizer": 0.0,
    }
    lsq = float(params.block) ** 2
    a = params.stiffness
    unit = params.unit_lattice
    coarse = params.coarse_lattice
    nxt = params.rescaled_next()
    bmu = bm_unit(params)
    for _ in range(samples):
        phi = rng.standard_normal(params.lattice.n_sites)
        phi_next_unit = rng.standard_normal(nxt.unit_lattice.n_sites)
        z = rng.standard_normal(unit.n_sites)
        phi_next = scale_field(Field(nxt.unit_lattice, phi_next_unit), up=True).values

        p0 = phi0_next(params, phi_next)
        psi = psi_minimizer(params, phi_next, p0)

        # averaged overlap identity
        lhs = phi_next - bmu.apply_q(psi)
        rhs = (params.a_k / (params.a_k + a / lsq)) * (phi_next - bm_k1(params).apply_q(p0))
        out["overlap_mean"] = max(out["overlap_mean"], float(np.max(np.abs(lhs - rhs))))

        # the split minimizer reproduces the next constrained minimizer
        out["intermediate_minimizer"] = max(
            out["intermediate_minimizer"], float(np.max(np.abs(minimizer_phi(params, psi) - p0)))
        )

        # two-stage minimum assembles the next blocking form (any fine phi)
        psi_g = psi_minimizer(params, phi_next, phi)
        lhs_v = (a / (2 * lsq)) * norm_sq(coarse, phi_next - bmu.apply_q(psi_g)) + (params.a_k / 2) * norm_sq(
            unit, psi_g - bm_k(params).apply_q(phi)
        )
        rhs_v = (params.a_next / (2 * lsq)) * norm_sq(coarse, phi_next - bm_k1(params).apply_q(phi))
        out["minimum_assembly"] = max(out["minimum_assembly"], abs(lhs_v - rhs_v))

        # shifted expansion of the blocking exponent around the minimizer pair
        zeta = zeta_from_z(params, z)
        lhs_j = j_action(params, phi_next, psi + z, p0 + zeta)
        rhs_j = (
            s0_next_action(params, phi_next, p0)
            + (a / (2 * lsq)) * norm_sq(coarse, bmu.apply_q(z))
            + free_action(params, z, zeta)
        )
        out["expansion"] = max(out["expansion"], abs(lhs_j - rhs_j))

        # minimal action equals half the effective coarse form
        smin = free_action(params, z, minimizer_phi(params, z))
        form = 0.5 * inner_product(unit, z, effective_quadratic_form(params) @ z)
        out["effective_form"] = max(out["effective_form"], abs(smin - form))

        # rescaling invariance of the next action and its minimizer
        phi_new = rng.standard_normal(nxt.lattice.n_sites)
        phi_l = scale_field(Field(nxt.lattice, phi_new), up=True).values
        s_pre = s0_next_action(params, phi_next, phi_l)
        s_post = free_action(nxt, phi_next_unit, phi_new)
        out["scale_action"] = max(out["scale_action"], abs(s_pre - s_post))

        min_next = minimizer_phi(nxt, phi_next_unit)
        min_next_l = scale_field(Field(nxt.lattice, min_next), up=True).values
        out["scale_minimizer"] = max(out["scale_minimizer"], float(np.max(np.abs(phi0_next(params, phi_next) - min_next_l))))
    return out
