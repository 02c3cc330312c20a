"""Gauss-quadrature assembly of the bilinear forms and their helpers."""

import numpy as np
import pytest

from surriga.assembly import (
    FormKind,
    apply_dirichlet,
    assemble,
    assemble_divergence,
    assemble_load,
    boundary_values,
    dirichlet_dofs,
    evaluate_field,
    gauss_rule,
    interior_dofs,
    interpolate_field,
    is_bitwise_symmetric,
    load_matrix_market,
    make_discretization,
    matrices_bitwise_equal,
    pressure_mean_vector,
    save_matrix_market,
    stokes_subgrid_spaces,
)
from surriga.geometry import (
    builtin_domain,
    quarter_annulus,
    unit_cube,
    unit_square,
)
from surriga.solvers import solve_spd


def test_gauss_rule_integrates_monomials():
    for g in range(1, 8):
        rule = gauss_rule(g)
        assert rule.nodes.shape == (g,)
        assert np.all((rule.nodes > -1) & (rule.nodes < 1))
        for k in range(2 * g):
            val = rule.weights @ rule.nodes**k
            exact = 2.0 / (k + 1) if k % 2 == 0 else 0.0
            assert abs(val - exact) < 1e-13
    with pytest.raises(ValueError):
        gauss_rule(0)


def test_1d_factor_stencils_via_tensor_identity():
    # row of the 2D mass matrix factors into 1D stencils; freeze the 1D values
    disc = make_discretization(unit_square(), 1, (4, 4))
    h = 0.25
    M = assemble(FormKind.MASS, disc).mat.toarray()
    K = assemble(FormKind.POISSON, disc).mat.toarray()
    m1 = np.array([h / 6, 2 * h / 3, h / 6])
    k1 = np.array([-1 / h, 2 / h, -1 / h])
    mid = 2 + 2 * 5
    row_m = M[mid].reshape(5, 5, order="F")
    row_k = K[mid].reshape(5, 5, order="F")
    m_expect = np.zeros((5, 5))
    k_expect = np.zeros((5, 5))
    m_expect[1:4, 1:4] = np.outer(m1, m1)
    k_expect[1:4, 1:4] = np.outer(k1, m1) + np.outer(m1, k1)
    assert np.max(np.abs(row_m - m_expect)) < 1e-15
    assert np.max(np.abs(row_k - k_expect)) < 1e-13


def test_load_vector_constant_rhs():
    disc = make_discretization(unit_square(), 1, (4, 4))
    b = assemble_load(disc, lambda x: np.ones(x.shape[:-1]))
    h = 0.25
    b1 = np.array([h / 2, h, h, h, h / 2])
    assert np.max(np.abs(b - np.outer(b1, b1).reshape(-1, order="F"))) < 1e-15
    assert abs(b.sum() - 1.0) < 1e-14


def test_mass_sum_is_area():
    disc = make_discretization(unit_square(), 2, (9, 9))
    M = assemble(FormKind.MASS, disc)
    assert abs(M.mat.sum() - 1.0) < 1e-13
    assert is_bitwise_symmetric(M)


def test_annulus_area_and_quadrature_refinement():
    geom = quarter_annulus(1.0, 2.0)
    area = np.pi * 3 / 4
    disc = make_discretization(geom, 2, (12, 12))
    err_default = abs(assemble(FormKind.MASS, disc).mat.sum() - area)
    assert err_default < 5e-9
    disc6 = make_discretization(geom, 2, (12, 12), gauss=6)
    err6 = abs(assemble(FormKind.MASS, disc6).mat.sum() - area)
    assert err6 < err_default / 100


def test_row_restriction_is_bitwise():
    disc = make_discretization(builtin_domain("coons_quadratic"), 2, (8, 8))
    full = assemble(FormKind.POISSON, disc)
    rows = np.array([0, 7, 33, 64, 99])
    part = assemble(FormKind.POISSON, disc, rows=rows)
    assert matrices_bitwise_equal(full, part, rows=rows)
    assert np.array_equal(np.sort(part.populated_rows), rows)


def test_gauss_order_invariance_on_affine_maps():
    # polynomial integrands are integrated exactly for every sufficient order
    disc3 = make_discretization(unit_square(), 2, (6, 6), gauss=3)
    disc5 = make_discretization(unit_square(), 2, (6, 6), gauss=5)
    A3 = assemble(FormKind.POISSON, disc3).mat.toarray()
    A5 = assemble(FormKind.POISSON, disc5).mat.toarray()
    assert np.max(np.abs(A3 - A5)) < 1e-13


def test_poisson_solution_matches_interpolant_rate():
    geom = unit_square()
    u = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    f = lambda x: 2 * np.pi**2 * u(x)
    errs = []
    for spans in (8, 16):
        disc = make_discretization(geom, 2, (spans, spans))
        A = assemble(FormKind.POISSON, disc)
        b = assemble_load(disc, f)
        dofs = dirichlet_dofs(disc.space)
        red = apply_dirichlet(A, b, dofs, np.zeros(len(dofs)))
        coefs = red.expand(solve_spd(red.A, red.b))
        axes = (np.linspace(0, 1, 33), np.linspace(0, 1, 33))
        uh = evaluate_field(disc, coefs, axes)
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        errs.append(np.max(np.abs(uh - u(X))))
    assert errs[1] < errs[0] / 6


def test_biharmonic_energy_of_quadratic():
    # u = x^2 has Laplacian 2, so the plate form gives 4 * area
    disc = make_discretization(unit_square(), 3, (8, 8))
    A = assemble(FormKind.BIHARMONIC, disc)
    c = interpolate_field(disc, lambda x: x[..., 0] ** 2)
    val = c @ (A.mat @ c)
    assert abs(val - 4.0) < 1e-11
    geom = quarter_annulus(1.0, 2.0)
    disc_a = make_discretization(geom, 3, (10, 10))
    A_a = assemble(FormKind.BIHARMONIC, disc_a)
    c_a = interpolate_field(disc_a, lambda x: x[..., 0] ** 2 + x[..., 1] ** 2)
    area = np.pi * 3 / 4
    assert abs(c_a @ (A_a.mat @ c_a) - 16 * area) < 2e-6


def test_stokes_spaces_velocity_subgrid():
    st = stokes_subgrid_spaces(builtin_domain("coons_cubic"), 2, (4, 4))
    assert st.pressure.space.p == 2
    assert st.velocity.space.p == 3
    assert st.pressure.space.kvs[0].spans == 4
    assert st.velocity.space.kvs[0].spans == 8


def test_divergence_of_constant_field_vanishes():
    st = stokes_subgrid_spaces(builtin_domain("coons_quadratic"), 2, (6, 6))
    D = assemble_divergence(st)
    ones = np.ones(st.velocity.space.N)
    for Dc in D:
        assert np.max(np.abs(Dc.mat @ ones)) < 1e-13


def test_divergence_of_linear_field_is_mean_vector():
    # div(x, 0) = 1, so the divergence rows integrate the pressure basis
    st = stokes_subgrid_spaces(builtin_domain("coons_quadratic"), 2, (6, 6))
    D = assemble_divergence(st)
    vx = interpolate_field(st.velocity, lambda x: x[..., 0])
    mean = pressure_mean_vector(st)
    assert np.max(np.abs(D[0].mat @ vx - mean)) < 1e-12
    area = assemble(FormKind.MASS, st.pressure).mat.sum()
    assert abs(mean.sum() - area) < 1e-12


def test_divergence_row_restriction_bitwise():
    st = stokes_subgrid_spaces(builtin_domain("coons_quadratic"), 2, (6, 6))
    rows = np.array([0, 5, 17, 40])
    full = assemble_divergence(st)
    part = assemble_divergence(st, rows=rows)
    for Df, Dp in zip(full, part):
        assert matrices_bitwise_equal(Df, Dp, rows=rows)


def test_matrix_market_round_trip(tmp_path):
    disc = make_discretization(builtin_domain("coons_quadratic"), 2, (6, 6))
    A = assemble(FormKind.POISSON, disc)
    path = tmp_path / "poisson.mtx"
    save_matrix_market(path, A)
    B = load_matrix_market(path)
    assert matrices_bitwise_equal(A, B)
    text = path.read_text()
    assert text.startswith("%%MatrixMarket")


def test_dirichlet_reduction():
    disc = make_discretization(unit_square(), 2, (6, 6))
    A = assemble(FormKind.POISSON, disc)
    b = assemble_load(disc, lambda x: np.ones(x.shape[:-1]))
    dofs = dirichlet_dofs(disc.space)
    interior = interior_dofs(disc.space)
    assert len(dofs) + len(interior) == disc.space.N
    assert np.intersect1d(dofs, interior).size == 0
    vals = boundary_values(disc, lambda x: np.zeros(x.shape[:-1]))
    red = apply_dirichlet(A, b, dofs, vals)
    assert red.A.shape == (len(interior), len(interior))
    assert red.n_full == disc.space.N


def test_3d_assembly_smoke():
    disc = make_discretization(unit_cube(), 1, (3, 3, 3))
    M = assemble(FormKind.MASS, disc)
    assert abs(M.mat.sum() - 1.0) < 1e-13
    K = assemble(FormKind.POISSON, disc)
    ones = np.ones(disc.space.N)
    assert np.max(np.abs(K.mat @ ones)) < 1e-13
