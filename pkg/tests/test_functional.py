import math

import numpy as np
import pytest

from blockrg.functional import (
    FieldDomainSpec,
    FunctionalGeometry,
    LocalFunctional,
    MonomialTerm,
    OpaqueTerm,
    derivative,
    domain_membership,
    evaluate,
    evenness_check,
    functional_from_dict,
    functional_to_dict,
    holder_increment_max,
    local_term,
    locality_check,
    make_potential,
    membership_sk,
    norm_bound,
    norm_global,
    normalize,
    reblock,
    scale_down,
    strong_field_facts,
    symmetry_check,
    total_value,
)
from blockrg.gaussian_flow import GaussParams
from blockrg.lattice import Field, TorusLattice, scale_field


def geometry_1d(refine=1, side_exp=2, cube_exp=0):
    return FunctionalGeometry(TorusLattice(1, 3, side_exp, refine), cube_exp)


def single_term_functional(geom, cubes, *terms, even=True, symmetric=False):
    poly = geom.polymer(cubes)
    return LocalFunctional.from_dict(geom, {poly: terms}, even=even, symmetric=symmetric), poly


# ===== domain specs =====


def test_domain_spec_bounds_and_thresholds():
    spec = FieldDomainSpec(1e-4)
    assert spec.bound_field > spec.bound_grad > spec.bound_holder > 1.0
    assert abs(spec.p_k - math.log(1e4) ** 2) < 1e-12
    assert abs(spec.p0_k - math.log(1e4)) < 1e-12
    nxt = spec.rescaled(3)
    assert abs(nxt.coupling - 3e-4) < 1e-19
    with pytest.raises(ValueError):
        FieldDomainSpec(2.0)
    with pytest.raises(ValueError):
        FieldDomainSpec(1e-4, alpha=0.4)
    with pytest.raises(ValueError):
        FieldDomainSpec(1e-4, p=1, p0=1)


def test_domain_membership_reports_failing_bound():
    lat = TorusLattice(1, 3, 2, 0)
    spec = FieldDomainSpec(1e-2)
    ok = domain_membership(lat, np.zeros(lat.n_sites), spec)
    assert ok["member"] and not ok["failing"]
    spike = np.zeros(lat.n_sites)
    spike[4] = 10 * spec.bound_field
    bad = domain_membership(lat, spike, spec)
    assert not bad["member"] and "field" in bad["failing"]
    # a steep sawtooth violates the gradient bound while staying under the field bound
    saw = np.resize([-0.55 * spec.bound_field, 0.55 * spec.bound_field], lat.n_sites)
    rep = domain_membership(lat, saw, spec)
    assert "gradient" in rep["failing"] and "field" not in rep["failing"]


def test_holder_increment_matches_pairwise_oracle():
    lat = TorusLattice(1, 3, 1, 1)
    vals = np.sin(2 * math.pi * lat.positions()[:, 0] / lat.side)
    alpha = 0.6
    best = 0.0
    for i in range(lat.n_sites):
        for j in range(lat.n_sites):
            delta = abs(lat.positions()[i, 0] - lat.positions()[j, 0])
            dist = min(delta, lat.side - delta)
            if 0.0 < dist <= 1.0:
                best = max(best, abs(vals[i] - vals[j]) / dist**alpha)
    got = holder_increment_max(lat, vals, alpha)
    assert abs(got - best) < 1e-12


# ===== evaluation =====


def test_quadratic_on_constant_field():
    geom = geometry_1d(refine=0, cube_exp=1)  # unit spacing, 3-site cubes
    E, poly = single_term_functional(geom, (0,), local_term(1.0, 2))
    c = 1.7
    val = evaluate(E, poly, np.full(geom.lattice.n_sites, c))
    assert abs(val - c * c * 3) < 1e-12


def test_locality_probe():
    geom = geometry_1d()
    E, poly = single_term_functional(geom, (1, 2), local_term(0.8, 2), local_term(0.3, 1, 1))
    rng = np.random.default_rng(5)
    assert locality_check(E, poly, rng) == 0.0
    assert evenness_check(E, poly, rng) == 0.0


def test_potential_matches_direct_sum():
    geom = geometry_1d()
    eps_k, mu_k, lam_k = 0.2, 0.05, 1e-3
    V = make_potential(geom, eps_k, mu_k, lam_k)
    rng = np.random.default_rng(11)
    phi = rng.normal(size=geom.lattice.n_sites)
    s_d = geom.lattice.site_weight
    direct = float(np.sum(s_d * (eps_k + 0.5 * mu_k * phi**2 + 0.25 * lam_k * phi**4)))
    assert abs(total_value(V, phi) - direct) < 1e-12
    # single-cube value
    poly = V.polymers()[0]
    sites = geom.sites_of(poly)
    direct_cube = float(np.sum(s_d * (eps_k + 0.5 * mu_k * phi[sites] ** 2 + 0.25 * lam_k * phi[sites] ** 4)))
    assert abs(evaluate(V, poly, phi) - direct_cube) < 1e-13


def test_evaluate_rejects_out_of_domain_field():
    geom = geometry_1d()
    spec = FieldDomainSpec(1e-2)
    E, poly = single_term_functional(geom, (0,), local_term(1.0, 2))
    with pytest.raises(ValueError):
        evaluate(E, poly, np.full(geom.lattice.n_sites, 2 * spec.bound_field), spec=spec)


# ===== derivatives =====


def test_derivative_quadratic_and_quartic():
    geom = geometry_1d()
    E2, poly = single_term_functional(geom, (1, 2), local_term(1.0, 2))
    lat = geom.lattice
    one = np.ones(lat.n_sites)
    vol = geom.volume(poly)
    assert abs(derivative(E2, poly, np.zeros(lat.n_sites), [one, one]) - 2.0 * vol) < 1e-12
    # odd derivatives of an even functional vanish at zero
    assert derivative(E2, poly, np.zeros(lat.n_sites), [one]) == 0.0
    E4, poly4 = single_term_functional(geom, (1,), local_term(1.0, 4))
    rng = np.random.default_rng(3)
    f = rng.normal(size=lat.n_sites)
    zero = np.zeros(lat.n_sites)
    assert derivative(E4, poly4, zero, [f, f]) == 0.0
    sites = geom.sites_of(poly4)
    expect = 24.0 * lat.site_weight * float(np.sum(f[sites] ** 4))
    assert abs(derivative(E4, poly4, zero, [f, f, f, f]) - expect) < 1e-10


def test_symbolic_vs_finite_difference_cross_check():
    geom = geometry_1d()
    lat = geom.lattice
    poly = geom.polymer((1,))
    sites_of = geom.sites_of(poly)

    def quartic(sites, values):
        return lat.site_weight * float(np.sum(np.asarray(values)[sites_of] ** 4))

    exact = LocalFunctional.from_dict(geom, {poly: (local_term(1.0, 4),)})
    opaque = LocalFunctional.from_dict(geom, {poly: (OpaqueTerm(quartic),)})
    rng = np.random.default_rng(8)
    phi0 = 0.3 * rng.normal(size=lat.n_sites)
    f = rng.normal(size=lat.n_sites)
    g = rng.normal(size=lat.n_sites)
    a = derivative(exact, poly, phi0, [f, g])
    b = derivative(opaque, poly, phi0, [f, g])
    assert abs(a - b) < 1e-5 * max(1.0, abs(a))


def test_complex_capable_opaque_gets_contour_accuracy():
    # an evaluator that never casts to real should beat finite differences
    # by several orders; 1e-12 here is out of reach for the Richardson path
    geom = geometry_1d()
    lat = geom.lattice
    poly = geom.polymer((1,))
    sites_of = geom.sites_of(poly)

    def quartic(sites, values):
        return lat.site_weight * np.sum(np.asarray(values)[sites_of] ** 4)

    exact = LocalFunctional.from_dict(geom, {poly: (local_term(1.0, 4),)})
    opaque = LocalFunctional.from_dict(geom, {poly: (OpaqueTerm(quartic),)})
    rng = np.random.default_rng(8)
    phi0 = 0.3 * rng.normal(size=lat.n_sites)
    f = rng.normal(size=lat.n_sites)
    g = rng.normal(size=lat.n_sites)
    a = derivative(exact, poly, phi0, [f, g])
    b = derivative(opaque, poly, phi0, [f, g])
    assert abs(a - b) < 1e-12 * max(1.0, abs(a))


def test_contour_derivative_is_exact_for_polynomials():
    geom = geometry_1d()
    E, poly = single_term_functional(geom, (1,), local_term(1.0, 4))
    lat = geom.lattice
    rng = np.random.default_rng(4)
    f = rng.normal(size=lat.n_sites)
    radius, n_pts = 0.7, 8
    acc = 0.0 + 0.0j
    for j in range(n_pts):
        theta = 2.0 * math.pi * j / n_pts
        t = radius * complex(math.cos(theta), math.sin(theta))
        acc += evaluate(E, poly, t * f.astype(complex)) * complex(math.cos(-4 * theta), math.sin(-4 * theta))
    coeff = acc.real / (n_pts * radius**4)
    expect = derivative(E, poly, np.zeros(lat.n_sites), [f, f, f, f])
    assert abs(math.factorial(4) * coeff - expect) < 1e-9 * max(1.0, abs(expect))


# ===== norms =====


def test_norm_constant_term_both_strategies():
    geom = geometry_1d()
    spec = FieldDomainSpec(1e-2)
    E, poly = single_term_functional(geom, (0, 1), local_term(-2.5, 0))
    vol = geom.volume(poly)
    up = norm_bound(E, poly, spec, "analytic")
    lo = norm_bound(E, poly, spec, "sampled")
    assert up["certificate"] == "upper" and lo["certificate"] == "lower"
    assert abs(up["value"] - 2.5 * vol) < 1e-12
    assert abs(lo["value"] - 2.5 * vol) < 1e-12


def test_norm_quadratic_extremal_field_attains_bound():
    geom = geometry_1d()
    spec = FieldDomainSpec(1e-2)
    E, poly = single_term_functional(geom, (0,), local_term(1.0, 2))
    up = norm_bound(E, poly, spec, "analytic")["value"]
    lo = norm_bound(E, poly, spec, "sampled")["value"]
    vol = geom.volume(poly)
    assert abs(up - spec.bound_field**2 * vol) < 1e-9
    assert lo <= up and lo > 0.999 * up


def test_global_norm_hand_computation():
    geom = geometry_1d()
    spec = FieldDomainSpec(1e-2)
    p1 = geom.polymer((0,))
    p2 = geom.polymer((3, 4))
    E = LocalFunctional.from_dict(geom, {p1: (local_term(1.0, 0),), p2: (local_term(2.0, 0),)})
    kappa = 1.25
    v1 = geom.volume(p1)
    v2 = 2.0 * geom.volume(p2)
    expect = max(v1, v2 * math.exp(kappa))
    got = norm_global(E, spec, kappa)
    assert abs(got["value"] - expect) < 1e-12
    assert got["polymer"] == p2


def test_norm_rejects_opaque_analytic():
    geom = geometry_1d()
    E, poly = single_term_functional(geom, (0,), OpaqueTerm(lambda s, v: 0.0))
    with pytest.raises(ValueError):
        norm_bound(E, poly, FieldDomainSpec(1e-2), "analytic")


# ===== scaling =====


def test_scale_down_two_evaluation_paths_agree():
    fine = FunctionalGeometry(TorusLattice(1, 3, 2, 1), 1)  # block-scale cubes
    poly = fine.polymer((0, 1))
    F = LocalFunctional.from_dict(
        fine, {poly: (local_term(0.7, 2), local_term(-0.2, 3, 1), local_term(0.05, 4))}
    )
    scaled = scale_down(F)
    coarse_lat = scaled.geometry.lattice
    rng = np.random.default_rng(13)
    phi = rng.normal(size=coarse_lat.n_sites)
    lifted = scale_field(Field(coarse_lat, phi), up=True)
    want = evaluate(F, poly, lifted.values)
    got = evaluate(scaled, scaled.geometry.polymer((0, 1)), phi)
    assert abs(got - want) < 1e-12 * max(1.0, abs(want))


def test_scale_down_opaque_path_agrees():
    fine = FunctionalGeometry(TorusLattice(1, 3, 2, 1), 1)
    poly = fine.polymer((1,))
    sites = fine.sites_of(poly)

    def h(site_array, values):
        return float(np.sum(np.asarray(values)[sites] ** 2)) * fine.lattice.site_weight

    F = LocalFunctional.from_dict(fine, {poly: (OpaqueTerm(h),)})
    scaled = scale_down(F)
    rng = np.random.default_rng(14)
    phi = rng.normal(size=scaled.geometry.lattice.n_sites)
    lifted = scale_field(Field(scaled.geometry.lattice, phi), up=True)
    assert abs(evaluate(scaled, scaled.geometry.polymer((1,)), phi) - evaluate(F, poly, lifted.values)) < 1e-12


def test_scale_down_coefficient_factors():
    for dim, side_exp in ((1, 2), (2, 2), (3, 1)):
        fine = FunctionalGeometry(TorusLattice(dim, 3, side_exp, 1), 1)
        poly = fine.polymer((0,))
        F = LocalFunctional.from_dict(
            fine, {poly: (local_term(1.0, 0), local_term(1.0, 2), local_term(1.0, 4))}
        )
        scaled = scale_down(F)
        coeffs = [t.coeff for t in scaled.term_map[scaled.geometry.polymer((0,))]]
        L = 3.0
        assert abs(coeffs[0] - L**dim) < 1e-12
        assert abs(coeffs[1] - L**2) < 1e-12
        assert abs(coeffs[2] - L ** (4 - dim)) < 1e-12


def test_rescaled_field_stays_in_shrunk_domain():
    # three-dimensional bound arithmetic for one rescaling step
    coarse = TorusLattice(3, 3, 0, 2)
    spec_next = FieldDomainSpec(1e-3).rescaled(3)
    spec = FieldDomainSpec(1e-3)
    rng = np.random.default_rng(9)
    pos = coarse.positions()
    raw = np.sin(2 * math.pi * pos[:, 0] / coarse.side) + 0.5 * rng.normal() * np.sin(
        2 * math.pi * pos[:, 1] / coarse.side
    )
    from blockrg.functional import gradient_stack

    grads = gradient_stack(coarse, raw)
    margin = max(
        np.max(np.abs(raw)) / spec_next.bound_field,
        np.max(np.abs(grads)) / spec_next.bound_grad,
        holder_increment_max(coarse, grads.T, spec_next.alpha) / spec_next.bound_holder,
    )
    phi = raw * (1 - 1e-9) / margin
    assert domain_membership(coarse, phi, spec_next)["member"]
    lifted = scale_field(Field(coarse, phi), up=True)
    rho = 3.0 ** (-0.75 - 3 * spec.epsilon)
    rep = domain_membership(lifted.lattice, lifted.values, spec, rho=rho * (1 + 1e-9))
    assert rep["member"]


# ===== reblocking =====


def test_reblock_preserves_values_and_groups():
    geom = geometry_1d(cube_exp=0)  # 9 unit cubes, reblock to 3 triple cubes
    pa = geom.polymer((0, 1))
    pb = geom.polymer((2,))
    pc = geom.polymer((4, 5, 6))
    E = LocalFunctional.from_dict(
        geom,
        {
            pa: (local_term(0.5, 2), local_term(0.1, 1, 1)),
            pb: (local_term(-0.3, 2),),
            pc: (local_term(0.2, 4),),
        },
    )
    B = reblock(E)
    rng = np.random.default_rng(21)
    phi = rng.normal(size=geom.lattice.n_sites)
    # both X=(0,1) and X=(2,) land in block cube 0; values add
    y0 = B.geometry.polymer((0,))
    want = evaluate(E, pa, phi) + evaluate(E, pb, phi)
    assert abs(evaluate(B, y0, phi) - want) < 1e-13
    # pc straddles block cubes 1 and 2
    y12 = B.geometry.polymer((1, 2))
    assert abs(evaluate(B, y12, phi) - evaluate(E, pc, phi)) < 1e-13
    assert abs(total_value(B, phi) - total_value(E, phi)) < 1e-12


def test_reblock_single_cube_passthrough():
    geom = geometry_1d(cube_exp=0)
    E, poly = single_term_functional(geom, (3, 4), local_term(0.9, 2))
    B = reblock(E)
    rng = np.random.default_rng(2)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(B, B.geometry.polymer((1,)), phi) - evaluate(E, poly, phi)) < 1e-13


# ===== normalization =====


def test_normalize_quadratic_extracts_everything():
    geom = geometry_1d()
    E, poly = single_term_functional(geom, (1, 2), local_term(1.0, 2))
    res = normalize(E)
    assert abs(res["alpha0"][poly]) < 1e-14
    assert abs(res["alpha2"][poly] - 1.0) < 1e-12
    assert max(abs(a) for a in res["alpha2_grad"][poly]) < 1e-12
    rng = np.random.default_rng(6)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(res["functional"], poly, phi)) < 1e-12


def test_normalize_constant_and_quartic():
    geom = geometry_1d()
    Ec, pc = single_term_functional(geom, (0,), local_term(2.2, 0))
    res = normalize(Ec)
    assert abs(res["alpha0"][pc] - 2.2) < 1e-12
    assert abs(res["alpha2"][pc]) < 1e-14
    rng = np.random.default_rng(7)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(res["functional"], pc, phi)) < 1e-12
    E4, p4 = single_term_functional(geom, (2,), local_term(0.7, 4))
    res4 = normalize(E4)
    assert abs(res4["alpha0"][p4]) < 1e-14
    assert abs(res4["alpha2"][p4]) < 1e-14
    assert abs(evaluate(res4["functional"], p4, phi) - evaluate(E4, p4, phi)) < 1e-12


def test_normalize_gradient_cross_term_recovery():
    geom = geometry_1d()
    c = 0.42
    E, poly = single_term_functional(geom, (1, 2), local_term(c, 1, 1))
    res = normalize(E)
    assert abs(res["alpha2_grad"][poly][0] - c) < 1e-12
    rng = np.random.default_rng(8)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(res["functional"], poly, phi)) < 1e-12


def test_normalize_conditions_and_idempotence():
    geom = geometry_1d()
    poly = geom.polymer((1, 2))
    E = LocalFunctional.from_dict(
        geom, {poly: (local_term(0.3, 0), local_term(0.5, 2), local_term(-0.2, 1, 1), local_term(0.1, 4))}
    )
    res = normalize(E)
    r = res["residuals"][poly]
    assert abs(r["value"]) < 1e-12
    assert abs(r["mass"]) < 1e-12
    assert max(abs(g) for g in r["gradient"]) < 1e-12
    again = normalize(res["functional"])
    assert abs(again["alpha0"][poly]) < 1e-10
    assert abs(again["alpha2"][poly]) < 1e-10
    assert max(abs(a) for a in again["alpha2_grad"][poly]) < 1e-10


def test_normalize_linearity():
    geom = geometry_1d()
    poly = geom.polymer((0, 1))
    E1 = LocalFunctional.from_dict(geom, {poly: (local_term(0.4, 2),)})
    E2 = LocalFunctional.from_dict(geom, {poly: (local_term(0.1, 0), local_term(0.3, 4))})
    Es = LocalFunctional.from_dict(
        geom, {poly: (local_term(2.0 * 0.4, 2), local_term(-1.0 * 0.1, 0), local_term(-1.0 * 0.3, 4))}
    )
    r1, r2, rs = normalize(E1), normalize(E2), normalize(Es)
    assert abs(rs["alpha0"][poly] - (2 * r1["alpha0"][poly] - r2["alpha0"][poly])) < 1e-13
    assert abs(rs["alpha2"][poly] - (2 * r1["alpha2"][poly] - r2["alpha2"][poly])) < 1e-13


def test_normalize_potential_energy_mass_and_cube_independence():
    geom = geometry_1d()
    V = make_potential(geom, 0.25, 0.1, 1e-3)
    res = normalize(V)
    assert res["cube_independent"]
    assert res["symmetry_ok"]
    assert abs(res["energy_out"] + 0.25) < 1e-12
    assert abs(res["mass_out"] + 0.1) < 1e-12
    # quartic part survives normalization
    rng = np.random.default_rng(10)
    phi = rng.normal(size=geom.lattice.n_sites)
    s_d = geom.lattice.site_weight
    quartic = float(np.sum(s_d * 0.25e-3 * phi**4))
    assert abs(total_value(res["functional"], phi) - quartic) < 1e-12


def test_normalize_passes_large_polymers_through():
    geom = geometry_1d(side_exp=2)  # 9 unit cubes; tree distance >= 3 is large
    big = geom.polymer((0, 1, 2, 3))
    E = LocalFunctional.from_dict(geom, {big: (local_term(0.6, 2),)})
    res = normalize(E)
    assert big not in res["alpha0"]
    rng = np.random.default_rng(3)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(res["functional"], big, phi) - evaluate(E, big, phi)) < 1e-13


# ===== symmetry =====


def test_symmetry_check_potential():
    geom = FunctionalGeometry(TorusLattice(2, 3, 1, 1), 0)
    V = make_potential(geom, 0.1, 0.2, 1e-2)
    rng = np.random.default_rng(12)
    poly = V.polymers()[0]
    assert symmetry_check(V, poly, rng, (1, 0), (False, True), (1, 2)) < 1e-12


# ===== serialization =====


def test_serialization_roundtrip():
    geom = geometry_1d()
    poly = geom.polymer((1, 2))
    E = LocalFunctional.from_dict(
        geom,
        {poly: (local_term(0.5, 2), MonomialTerm(0.2, 1, 1, 0, sites=(3, 4), weights=(1.0, 2.0)))},
    )
    data = functional_to_dict(E)
    back = functional_from_dict(data)
    rng = np.random.default_rng(15)
    phi = rng.normal(size=geom.lattice.n_sites)
    assert abs(evaluate(back, poly, phi) - evaluate(E, poly, phi)) < 1e-14
    E_opaque, p0 = single_term_functional(geom, (0,), OpaqueTerm(lambda s, v: 0.0))
    with pytest.raises(ValueError):
        functional_to_dict(E_opaque)


# ===== block-field membership =====


def micro_params():
    lat = TorusLattice(1, 3, 1, 1)
    return GaussParams(lat, 1.0, 0.1, 1)


def test_membership_sk_zero_and_spike():
    params = micro_params()
    spec = FieldDomainSpec(1e-3)
    zero = np.zeros(params.unit_lattice.n_sites)
    rep = membership_sk(params, spec, zero)
    assert rep["member"]
    spike = zero.copy()
    spike[0] = 1e9
    bad = membership_sk(params, spec, spike)
    assert not bad["member"] and bad["failing"]


def test_strong_field_facts_random_small_field():
    params = micro_params()
    spec = FieldDomainSpec(1e-3)
    rng = np.random.default_rng(30)
    phi = 0.5 * rng.normal(size=params.unit_lattice.n_sites)
    facts = strong_field_facts(params, spec, phi)
    assert facts["member"]
    assert facts["block_bound_ok"] and facts["block_gradient_ok"]
    assert facts["minimizer_domain"]["member"]
