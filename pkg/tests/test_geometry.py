"""Geometry maps: Jacobians, builtin domains, Coons patches, file round-trips."""

import numpy as np
import pytest

from surriga.bspline import NurbsWeights, eval_nurbs, make_tensor_space
from surriga.geometry import (
    BUILTIN_NAMES,
    GeometryMap,
    builtin_domain,
    coons_2d,
    jacobian,
    load_geometry,
    map_grid,
    poisson_K,
    quarter_annulus,
    save_geometry,
    trivariate_polynomial_3d,
    unit_cube,
    unit_square,
    weight_function_grid,
    weights_for_space,
)


def _point(geom, pt):
    grid = map_grid(geom, [np.array([x]) for x in pt], max_deriv=0)
    return grid.phi.reshape(geom.n)


def test_unit_square_identity():
    geom = unit_square()
    assert geom.is_affine and geom.is_polynomial
    for pt in [(0.0, 0.0), (0.3, 0.7), (1.0, 1.0)]:
        assert np.allclose(_point(geom, pt), pt, atol=1e-14)
        J, det = jacobian(geom, pt)
        assert np.allclose(J, np.eye(2), atol=1e-14)
        assert abs(det - 1.0) < 1e-14


def test_unit_cube_identity():
    geom = unit_cube()
    assert np.allclose(_point(geom, (0.2, 0.5, 0.9)), [0.2, 0.5, 0.9], atol=1e-14)
    J, det = jacobian(geom, (0.2, 0.5, 0.9))
    assert np.allclose(J, np.eye(3), atol=1e-14)
    assert abs(det - 1.0) < 1e-14


def test_quarter_annulus_exact_circle():
    # first parameter is radial, second angular; circles come out exactly round
    geom = quarter_annulus(1.0, 2.0)
    assert not geom.is_polynomial
    for s in [0.0, 0.21, 0.5, 0.88, 1.0]:
        for t in [0.0, 0.37, 1.0]:
            x = _point(geom, (s, t))
            assert abs(np.hypot(*x) - (1.0 + s)) < 1e-13
    assert np.allclose(_point(geom, (0.0, 0.0)), [1.0, 0.0], atol=1e-14)
    assert np.allclose(_point(geom, (0.0, 1.0)), [0.0, 1.0], atol=1e-13)
    assert np.allclose(_point(geom, (1.0, 0.0)), [2.0, 0.0], atol=1e-13)


def test_jacobian_matches_finite_differences():
    geom = quarter_annulus(1.0, 2.5)
    pt = np.array([0.31, 0.64])
    J, det = jacobian(geom, pt)
    assert abs(det - np.linalg.det(J)) < 1e-12
    eps = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = eps
        fd = (_point(geom, pt + e) - _point(geom, pt - e)) / (2 * eps)
        assert np.max(np.abs(fd - J[:, a])) < 1e-7


def test_coons_parallelogram_is_affine():
    # straight-edge Coons patch of a parallelogram has a constant Jacobian
    a = np.array([0.0, 0.0])
    b = np.array([2.0, 0.5])
    c = np.array([0.5, 1.5])
    lin = lambda p0, p1: np.array([p0, 0.5 * (p0 + p1), p1])
    geom = coons_2d(lin(a, b), lin(a + c, b + c), lin(a, a + c), lin(b, b + c))
    Js = [jacobian(geom, pt)[0] for pt in [(0.1, 0.1), (0.5, 0.9), (0.95, 0.3)]]
    for J in Js[1:]:
        assert np.allclose(J, Js[0], atol=1e-13)
    assert np.allclose(Js[0][:, 0], b - a, atol=1e-13)


def test_coons_rejects_mismatched_corners():
    lin = lambda p0, p1: np.array([p0, 0.5 * (np.asarray(p0, float) + p1), p1],
                                  dtype=float)
    with pytest.raises(ValueError):
        coons_2d(lin((0, 0), (1, 0)), lin((0, 1), (1, 1)),
                 lin((0, 0), (0, 1)), lin((1.1, 0), (1, 1)))


def test_builtin_domains_construct_and_classify():
    flags = {}
    for name in BUILTIN_NAMES:
        geom = builtin_domain(name)
        flags[name] = (geom.is_affine, geom.is_polynomial, geom.n)
    assert flags["unit_square"] == (True, True, 2)
    assert flags["unit_cube"] == (True, True, 3)
    assert flags["quarter_annulus"][1] is False
    assert flags["coons_quadratic"] == (False, True, 2)
    assert flags["coons_cubic"] == (False, True, 2)
    assert flags["coons_rational"][1] is False
    assert flags["trivariate_polynomial_3d"] == (False, True, 3)
    with pytest.raises(ValueError):
        builtin_domain("moebius_strip")


def test_trivariate_is_orientation_preserving():
    geom = trivariate_polynomial_3d()
    for pt in [(0.1, 0.2, 0.3), (0.5, 0.5, 0.5), (0.9, 0.8, 0.7)]:
        _, det = jacobian(geom, pt)
        assert det > 0


def test_poisson_coefficient_symmetric_positive():
    geom = quarter_annulus()
    K = poisson_K(geom, (0.4, 0.6))
    assert np.allclose(K, K.T, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(K) > 0)


def test_weight_refinement_invariance():
    # the NURBS weight function is independent of the space it is expressed in
    geom = builtin_domain("coons_rational")
    pts = np.linspace(0.05, 0.95, 7)
    w_coarse = weight_function_grid(geom, (pts, pts))
    fine = make_tensor_space(geom.space.p, geom.space.shape[0] + 6, geom.n)
    wf = weights_for_space(geom, fine).weights.reshape(fine.shape, order="F")
    ones = NurbsWeights(np.ones(fine.N))
    vals = np.empty((7, 7))
    for i, s in enumerate(pts):
        for j, t in enumerate(pts):
            nv = eval_nurbs(fine, ones, (s, t), 0)
            sl = [np.arange(f, f + kv.p + 1) for f, kv in zip(nv.first, fine.kvs)]
            vals[i, j] = (nv.value * wf[np.ix_(*sl)]).sum()
    assert np.max(np.abs(vals - w_coarse)) < 1e-12


def test_map_grid_matches_pointwise_jacobian():
    geom = quarter_annulus()
    axes = (np.array([0.1, 0.5, 0.9]), np.array([0.25, 0.75]))
    grid = map_grid(geom, axes, max_deriv=1)
    for i, s in enumerate(axes[0]):
        for j, t in enumerate(axes[1]):
            J, det = jacobian(geom, (s, t))
            assert np.allclose(grid.phi[i, j], _point(geom, (s, t)), atol=1e-13)
            assert np.allclose(grid.jac[i, j], J, atol=1e-13)
            assert abs(grid.det[i, j] - det) < 1e-13


def test_save_load_round_trip(tmp_path):
    for name in ["quarter_annulus", "coons_cubic", "trivariate_polynomial_3d"]:
        geom = builtin_domain(name)
        path = tmp_path / f"{name}.geo"
        save_geometry(geom, path)
        back = load_geometry(path)
        assert back.space.p == geom.space.p
        assert back.space.shape == geom.space.shape
        assert np.array_equal(back.control, geom.control)
        assert np.array_equal(back.weights.weights, geom.weights.weights)


def test_load_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.geo"
    path.write_text("not a geometry\n")
    with pytest.raises(ValueError):
        load_geometry(path)
    path.write_text("iga-geo v1 n=2 p=1 m=2,2\n1 1.0 0 0\n2 1.0 1 0\n3 1.0 0 1\n")
    with pytest.raises(ValueError):
        load_geometry(path)


def test_nonpositive_weight_rejected(tmp_path):
    geom = unit_square()
    path = tmp_path / "w.geo"
    save_geometry(geom, path)
    lines = path.read_text().splitlines()
    parts = lines[1].split()
    parts[1] = "-1.0"
    lines[1] = " ".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="weight"):
        load_geometry(path)


def test_folded_patch_rejected():
    # swapping opposite corners folds the patch over itself
    sq = unit_square()
    control = sq.control.copy()
    control[[0, -1]] = control[[-1, 0]]
    with pytest.raises(ValueError, match="[Jj]acobian"):
        GeometryMap(space=sq.space, weights=sq.weights, control=control,
                    name="folded")
