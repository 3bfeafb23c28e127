import numpy as np
import pytest

from blockrg.gaussian_flow import (
    GaussParams,
    a_weight_matrix,
    bm_k,
    constrained_op,
    effective_quadratic_form,
    fluctuation_covariance,
    free_action,
    free_step_density_check,
    free_step_identity_check,
    gkr_matrix,
    green_g0_next,
    green_gk,
    minimizer_phi,
    resolvent_identity_check,
    shifted_covariance_direct,
    shifted_covariance_composite,
    sqrt_covariance,
    sqrt_covariance_quadrature_check,
    stiffness_closed,
    stiffness_recursive,
)
from blockrg.lattice import TorusLattice, inner_product


def params_1d(side_exp=2, level=1, a=1.0, mass0=0.5):
    lat = TorusLattice(1, 3, side_exp, level)
    return GaussParams(lat, a, mass0, level)


def params_2d(side_exp=1, level=1, a=1.0, mass0=0.5):
    lat = TorusLattice(2, 3, side_exp, level)
    return GaussParams(lat, a, mass0, level)


def test_stiffness_second_step_value():
    # a = 1, L = 3: one step gives 0.9 exactly
    assert abs(stiffness_closed(1.0, 3, 2) - 0.9) < 1e-15


def test_stiffness_closed_matches_recursion():
    for a in (1.0, 0.37, 5.0):
        for block in (3, 5):
            for k in range(1, 65):
                c = stiffness_closed(a, block, k)
                r = stiffness_recursive(a, block, k)
                assert abs(c - r) <= 1e-13 * max(1.0, abs(c))


def test_stiffness_monotone_with_positive_limit():
    vals = [stiffness_closed(2.0, 3, k) for k in range(1, 40)]
    # strictly decreasing until the geometric tail underflows, then flat
    assert all(x > y for x, y in zip(vals[:12], vals[1:12]))
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    limit = 2.0 * (1 - 3.0**-2)
    assert abs(vals[-1] - limit) < 1e-15


def test_params_validation():
    lat = TorusLattice(1, 3, 2, 1)
    with pytest.raises(ValueError):
        GaussParams(lat, 1.0, 0.5, 2)  # refine mismatch
    with pytest.raises(ValueError):
        GaussParams(lat, -1.0, 0.5, 1)
    with pytest.raises(ValueError):
        GaussParams(TorusLattice(1, 3, 2, 0), 1.0, 0.5, 0)


def test_green_is_inverse_and_symmetric():
    for p in (params_1d(), params_2d()):
        g = green_gk(p)
        n = p.lattice.n_sites
        assert np.max(np.abs(constrained_op(p) @ g - np.eye(n))) < 1e-11
        assert np.max(np.abs(g - g.T)) < 1e-12
        assert np.linalg.eigvalsh(g).min() > 0


def test_minimizer_stationarity():
    p = params_1d()
    rng = np.random.default_rng(7)
    coarse = rng.standard_normal(p.unit_lattice.n_sites)
    phi = minimizer_phi(p, coarse)
    # Euler-Lagrange residual: (-lap + mass + a_k ext o avg) phi = a_k ext(coarse)
    resid = constrained_op(p) @ phi - p.a_k * bm_k(p).apply_qt(coarse)
    assert np.max(np.abs(resid)) < 1e-12
    # any perturbation raises the action
    base = free_action(p, coarse, phi)
    for _ in range(5):
        h = rng.standard_normal(p.lattice.n_sites)
        assert free_action(p, coarse, phi + 1e-3 * h) >= base - 1e-15


def test_effective_form_single_coarse_site():
    # one coarse site: the form collapses to a_k m / (m + a_k)
    for dim in (1, 2):
        lat = TorusLattice(dim, 3, 0, 1)
        p = GaussParams(lat, 1.3, 0.7, 1)
        form = effective_quadratic_form(p)
        assert form.shape == (1, 1)
        m = p.mass_k
        expected = p.a_k * m / (m + p.a_k)
        assert abs(form[0, 0] - expected) < 1e-13


def test_blocking_identities_1d_and_2d():
    rng = np.random.default_rng(11)
    for p in (params_1d(), params_2d()):
        res = free_step_identity_check(p, rng, samples=10)
        for name, val in res.items():
            assert val < 1e-9, (name, val)


def test_fluctuation_covariance_and_sqrt():
    p = params_1d()
    c = fluctuation_covariance(p)
    assert np.max(np.abs(c - c.T)) < 1e-12
    s = sqrt_covariance(p)
    assert np.max(np.abs(s @ s - c)) < 1e-12


def test_sqrt_covariance_by_resolvent_quadrature():
    p = params_1d()
    assert sqrt_covariance_quadrature_check(p, nodes=400) < 1e-4


def test_shifted_green_limits():
    p = params_1d()
    # r = 0 reduces to the next-constraint propagator
    assert np.max(np.abs(gkr_matrix(p, 0.0) - green_g0_next(p))) < 1e-12
    # r -> infinity approaches the level-k propagator
    big = 1e9
    assert np.max(np.abs(gkr_matrix(p, big) - green_gk(p))) < 1e-6


def test_shifted_green_two_assemblies_agree():
    p = params_2d()
    for r in (0.0, 0.3, 7.0, 250.0):
        d = gkr_matrix(p, r, form="direct")
        s = gkr_matrix(p, r, form="schur")
        assert np.max(np.abs(d - s)) < 1e-10


def test_block_weight_matrix_is_resolvent_without_coupling():
    # with the green coupling dropped the shifted covariance is block diagonal
    p = params_1d()
    r = 0.8
    aw = a_weight_matrix(p, r)
    coeff = p.stiffness / p.block**2
    bmu_proj = shifted_covariance_direct(p, r)  # smoke: shapes agree
    assert aw.shape == bmu_proj.shape
    # aw inverts (a_k + r) I + coeff * projector
    from blockrg.averaging import BlockMap

    bmu = BlockMap(p.unit_lattice, 1)
    proj = bmu.qt_matrix() @ bmu.q_matrix()
    n = p.unit_lattice.n_sites
    op = (p.a_k + r) * np.eye(n) + coeff * proj
    assert np.max(np.abs(aw @ op - np.eye(n))) < 1e-12


def test_resolvent_identity_small_instances():
    rs = np.geomspace(1e-3, 1e3, 20)
    for p in (params_1d(side_exp=1), params_2d()):
        rep = resolvent_identity_check(p, rs)
        assert rep["max_rel_error"] < 1e-8


def test_free_step_density_bookkeeping():
    for p in (params_1d(), params_2d()):
        res = free_step_density_check(p)
        assert res["next_form"] < 1e-9
        assert res["normalization"] < 1e-8


def test_minimal_action_equals_half_form():
    p = params_2d()
    rng = np.random.default_rng(3)
    z = rng.standard_normal(p.unit_lattice.n_sites)
    smin = free_action(p, z, minimizer_phi(p, z))
    form = 0.5 * inner_product(p.unit_lattice, z, effective_quadratic_form(p) @ z)
    assert abs(smin - form) < 1e-10
