import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockrg.lattice import (
    CubeGrid,
    Field,
    TorusLattice,
    box_region,
    forward_derivative,
    gradient_norm_sq,
    inner_product,
    laplacian_apply,
    laplacian_matrix,
    derivative_matrix,
    neumann_laplacian,
    norm_sq,
    pairwise_supdist,
    save_field,
    load_field,
    scale_field,
    site_union_region,
    torus_supdist,
    whole_torus_region,
)


def test_lattice_counts_invariant_under_refinement():
    # same torus described at three refinement levels: side fixed, sites grow
    for k in range(3):
        lat = TorusLattice(2, 3, 2, k)
        assert lat.side == 9.0
        assert lat.sites_per_side == 3 ** (2 + k)
        assert lat.spacing == 3.0**-k
        assert lat.spacing == pytest.approx(3.0**-k)


def test_lattice_rejects_bad_parameters():
    with pytest.raises(ValueError):
        TorusLattice(4, 3, 1)
    with pytest.raises(ValueError):
        TorusLattice(1, 4, 1)
    with pytest.raises(ValueError):
        TorusLattice(1, 3, 1, -2)


def test_inner_product_is_riemann_sum():
    lat = TorusLattice(1, 3, 1, 1)  # side 3, spacing 1/3, 9 sites
    ones = np.ones(lat.n_sites)
    assert inner_product(lat, ones, ones) == pytest.approx(lat.volume)
    # against an explicit loop
    rng = np.random.default_rng(0)
    u = rng.standard_normal(lat.n_sites)
    v = rng.standard_normal(lat.n_sites)
    manual = sum(lat.site_weight * u[i] * v[i] for i in range(lat.n_sites))
    assert inner_product(lat, u, v) == pytest.approx(manual, rel=1e-14)


def test_forward_derivative_constant_and_linear():
    lat = TorusLattice(1, 3, 2, 0)  # 9 sites, spacing 1
    c = np.full(lat.n_sites, 4.25)
    assert np.allclose(forward_derivative(lat, c, 0), 0.0)
    x = lat.positions()[:, 0]
    d = forward_derivative(lat, x, 0)
    # slope 1 everywhere except the wrap seam
    assert np.allclose(d[:-1], 1.0)
    assert d[-1] == pytest.approx(1.0 - lat.sites_per_side)


def test_derivative_adjoint_identity():
    lat = TorusLattice(2, 3, 1, 0)
    rng = np.random.default_rng(1)
    f = rng.standard_normal(lat.n_sites)
    g = rng.standard_normal(lat.n_sites)
    for mu in range(lat.dim):
        d = derivative_matrix(lat, mu)
        assert inner_product(lat, d @ f, g) == pytest.approx(inner_product(lat, f, d.T @ g), rel=1e-12)


def test_laplacian_matrix_matches_apply_and_is_nsd():
    lat = TorusLattice(2, 3, 1, 1)
    rng = np.random.default_rng(2)
    f = rng.standard_normal(lat.n_sites)
    m = laplacian_matrix(lat)
    assert np.allclose(m @ f, laplacian_apply(lat, f), atol=1e-10)
    assert np.allclose(m, m.T)
    w = np.linalg.eigvalsh(m)
    assert w.max() <= 1e-10
    # kernel is exactly the constants
    assert np.sum(w > -1e-10) == 1
    assert np.allclose(m @ np.ones(lat.n_sites), 0.0, atol=1e-12)


def test_laplacian_d1_spectrum_closed_form():
    # eigenvalues -(2/a^2)(1 - cos(2 pi j / n)) at spacing a
    lat = TorusLattice(1, 3, 1, 1)
    n, a = lat.sites_per_side, lat.spacing
    got = np.sort(np.linalg.eigvalsh(laplacian_matrix(lat)))
    want = np.sort([-(2.0 / a**2) * (1.0 - np.cos(2.0 * np.pi * j / n)) for j in range(n)])
    assert np.allclose(got, want, atol=1e-10)


def test_gradient_identity():
    lat = TorusLattice(3, 3, 1, 0)
    rng = np.random.default_rng(3)
    f = rng.standard_normal(lat.n_sites)
    assert inner_product(lat, f, -(laplacian_matrix(lat) @ f)) == pytest.approx(gradient_norm_sq(lat, f), rel=1e-12)


def test_neumann_two_site_bond():
    lat = TorusLattice(1, 3, 1, 0)
    reg = box_region(lat, (0,), (2,))
    a = neumann_laplacian(reg)
    f = np.array([2.0, -1.0])
    form = lat.site_weight * float(f @ (-a) @ f)
    assert form == pytest.approx((2.0 - (-1.0)) ** 2)


def test_neumann_whole_torus_equals_periodic():
    lat = TorusLattice(2, 3, 1, 0)
    reg = whole_torus_region(lat)
    full = neumann_laplacian(reg)
    per = laplacian_matrix(lat)
    order = np.argsort(np.asarray(reg.sites))
    # region site order is already flat row-major for the whole torus
    assert list(reg.sites) == list(range(lat.n_sites))
    assert np.allclose(full, per, atol=1e-12)
    del order


def test_neumann_single_site_is_zero():
    lat = TorusLattice(1, 3, 1, 0)
    reg = box_region(lat, (1,), (1,))
    assert np.allclose(neumann_laplacian(reg), 0.0)


def test_neumann_form_monotone_in_bonds():
    # cutting the box open only removes bond terms, so the form decreases
    lat = TorusLattice(1, 3, 1, 0)
    rng = np.random.default_rng(4)
    f = rng.standard_normal(lat.n_sites)
    cut = neumann_laplacian(box_region(lat, (0,), (lat.sites_per_side,)))
    wrap = neumann_laplacian(whole_torus_region(lat))
    q_cut = float(f @ (-cut) @ f)
    q_wrap = float(f @ (-wrap) @ f)
    assert q_cut <= q_wrap + 1e-12


def test_site_union_region_bonds():
    lat = TorusLattice(2, 3, 1, 0)
    grid = CubeGrid(lat, 0)
    sites = np.concatenate([grid.sites_of_cube(0), grid.sites_of_cube(1)])
    reg = site_union_region(lat, sites)
    assert reg.n_sites == 2 * grid.sites_per_cube_side ** 2
    # Neumann form still negative semidefinite with constant kernel
    a = neumann_laplacian(reg)
    w = np.linalg.eigvalsh(a)
    assert w.max() <= 1e-10
    assert np.allclose(a @ np.ones(reg.n_sites), 0.0, atol=1e-12)


def test_scale_field_round_trip_and_factor():
    lat = TorusLattice(3, 3, 1, 1)
    rng = np.random.default_rng(5)
    f = Field.random(lat, rng)
    up = scale_field(f, up=True)
    assert up.lattice.side == pytest.approx(3 * lat.side)
    assert up.lattice.n_sites == lat.n_sites
    # d=3 factor is L**-(1/2)
    assert np.allclose(up.values, f.values / np.sqrt(3.0))
    back = scale_field(up, up=False)
    assert back.lattice == lat
    assert np.allclose(back.values, f.values)


def test_scale_field_d3_gradient_sup_scaling():
    # sup |d(f_L)| = L**-(3/2) sup |df| at d=3
    lat = TorusLattice(3, 3, 1, 0)
    rng = np.random.default_rng(6)
    f = Field.random(lat, rng)
    up = scale_field(f, up=True)
    for mu in range(3):
        a = np.max(np.abs(forward_derivative(up.lattice, up.values, mu)))
        b = np.max(np.abs(forward_derivative(lat, f.values, mu)))
        assert a == pytest.approx(3.0 ** (-1.5) * b, rel=1e-12)


def test_torus_distance_wraps():
    lat = TorusLattice(1, 3, 2, 0)  # 9 sites spacing 1
    assert torus_supdist(lat, 0, 1) == pytest.approx(1.0)
    assert torus_supdist(lat, 0, 8) == pytest.approx(1.0)
    assert torus_supdist(lat, 0, 4) == pytest.approx(4.0)
    m = pairwise_supdist(lat, [0, 1], [8])
    assert m.shape == (2, 1)
    assert m[0, 0] == pytest.approx(1.0)
    assert m[1, 0] == pytest.approx(2.0)


def test_cube_grid_basics():
    lat = TorusLattice(2, 3, 2, 0)  # side 9, 81 sites
    grid = CubeGrid(lat, 1)  # cubes of side 3
    assert grid.n_cubes == 9
    assert grid.sites_per_cube_side == 3
    s = grid.sites_of_cube(0)
    assert len(s) == 9
    assert sorted(grid.cube_of_site(x) for x in s) == [0] * 9
    # cube centers at (multi + 1/2) * side
    assert np.allclose(grid.cube_center(0), [1.5, 1.5])


def test_field_serialization_round_trip(tmp_path):
    lat = TorusLattice(2, 3, 1, 1)
    rng = np.random.default_rng(7)
    f = Field.random(lat, rng)
    p = tmp_path / "field.json"
    save_field(f, p, m=1, vol_exp=1, n_steps=1)
    g, meta = load_field(p)
    assert g.lattice == lat
    assert np.array_equal(g.values, f.values)
    assert meta == {"m": 1, "M": 1, "N": 1, "k": 1}


def test_field_serialization_rejects_bad_keys(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"d": 1}')
    with pytest.raises(ValueError):
        load_field(p)


@settings(max_examples=25, deadline=None)
@given(
    dim=st.integers(min_value=1, max_value=2),
    k=st.integers(min_value=0, max_value=1),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_derivative_adjoint_property(dim, k, seed):
    lat = TorusLattice(dim, 3, 1, k)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(lat.n_sites)
    g = rng.standard_normal(lat.n_sites)
    for mu in range(dim):
        d = derivative_matrix(lat, mu)
        lhs = inner_product(lat, d @ f, g)
        rhs = inner_product(lat, f, d.T @ g)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_volume_and_weight_bookkeeping():
    lat = TorusLattice(2, 5, 1, 1)
    assert lat.sites_per_side == 25
    assert lat.site_weight == pytest.approx(lat.spacing**2)
    assert norm_sq(lat, np.ones(lat.n_sites)) == pytest.approx(lat.volume)
