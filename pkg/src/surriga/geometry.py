"""NURBS geometry maps, Jacobians, pulled-back coefficients, benchmark domains.

A map is stored as its own (typically coarse) tensor-product representation;
solution spaces of any admissible degree and mesh size evaluate the geometry
through this fixed representation, so refining the discretization never
changes the domain.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .bspline import (
    NurbsWeights,
    TensorSpace,
    UniformOpenKnotVector,
    bezier_knots,
    collocation_solve,
    make_open_uniform_knots,
    make_tensor_space,
    refine_uniform,
    tabulate_1d,
)

__all__ = [
    "GeometryMap",
    "GridGeometry",
    "jacobian",
    "poisson_K",
    "adjugate",
    "determinant",
    "map_grid",
    "builtin_domain",
    "unit_square",
    "unit_cube",
    "quarter_annulus",
    "coons_2d",
    "trivariate_polynomial_3d",
    "weights_for_space",
    "save_geometry",
    "load_geometry",
    "BUILTIN_NAMES",
]


# ---------------------------------------------------------------------------
# Grid evaluation of spline fields
# ---------------------------------------------------------------------------

def direction_matrices(kv: UniformOpenKnotVector, points: np.ndarray, nu: int) -> np.ndarray:
    """Dense per-direction evaluation arrays ``E[d, g, j] = d-th derivative of B_j at point g``."""
    points = np.asarray(points, dtype=float).ravel()
    spans, table = tabulate_1d(kv.knots, kv.p, points, nu)
    E = np.zeros((nu + 1, points.size, kv.m))
    for i in range(points.size):
        E[:, i, spans[i] - kv.p : spans[i] + 1] = table[i]
    return E


def _tensor_contract(Es, sel, coefs):
    """Contract per-direction evaluation matrices against a coefficient grid.

    ``coefs`` has shape ``(m_1, ..., m_n, C)``; the result has shape
    ``(G_1, ..., G_n, C)``. einsum optimize stays off so summation order is
    fixed, which keeps repeated assemblies bit-identical.
    """
    n = len(Es)
    if n == 1:
        return np.einsum("xi,ic->xc", Es[0][sel[0]], coefs, optimize=False)
    if n == 2:
        t = np.einsum("xi,ijc->xjc", Es[0][sel[0]], coefs, optimize=False)
        return np.einsum("yj,xjc->xyc", Es[1][sel[1]], t, optimize=False)
    t = np.einsum("xi,ijkc->xjkc", Es[0][sel[0]], coefs, optimize=False)
    t = np.einsum("yj,xjkc->xykc", Es[1][sel[1]], t, optimize=False)
    return np.einsum("zk,xykc->xyzc", Es[2][sel[2]], t, optimize=False)


@dataclass
class GridGeometry:
    """Geometry quantities on a tensor grid of parameter points.

    Shapes: ``phi (G..., n)``, ``jac (G..., n, n)`` with ``jac[..., c, a]``
    the derivative of physical component ``c`` along parameter direction
    ``a``, ``det (G...,)``, ``hess (G..., n, n, n)`` indexed ``[c, a, b]``.
    """

    axes: tuple
    W: np.ndarray
    phi: np.ndarray
    jac: np.ndarray | None = None
    det: np.ndarray | None = None
    hess: np.ndarray | None = None


def determinant(jac: np.ndarray) -> np.ndarray:
    """Determinant over the trailing (n, n) axes, written out per dimension."""
    n = jac.shape[-1]
    if n == 1:
        return jac[..., 0, 0]
    if n == 2:
        return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return (
        jac[..., 0, 0] * (jac[..., 1, 1] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 1])
        - jac[..., 0, 1] * (jac[..., 1, 0] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 0])
        + jac[..., 0, 2] * (jac[..., 1, 0] * jac[..., 2, 1] - jac[..., 1, 1] * jac[..., 2, 0])
    )


def adjugate(jac: np.ndarray) -> np.ndarray:
    """Adjugate over the trailing (n, n) axes: ``inv = adj / det``."""
    n = jac.shape[-1]
    adj = np.empty_like(jac)
    if n == 1:
        adj[..., 0, 0] = 1.0
        return adj
    if n == 2:
        adj[..., 0, 0] = jac[..., 1, 1]
        adj[..., 0, 1] = -jac[..., 0, 1]
        adj[..., 1, 0] = -jac[..., 1, 0]
        adj[..., 1, 1] = jac[..., 0, 0]
        return adj
    for a in range(3):
        for b in range(3):
            r = [i for i in range(3) if i != b]
            c = [j for j in range(3) if j != a]
            minor = jac[..., r[0], c[0]] * jac[..., r[1], c[1]] - jac[..., r[0], c[1]] * jac[..., r[1], c[0]]
            adj[..., a, b] = (-1.0) ** (a + b) * minor
    return adj


# ---------------------------------------------------------------------------
# Geometry map
# ---------------------------------------------------------------------------

@dataclass
class GeometryMap:
    """Single-patch NURBS map from the unit square/cube into physical space.

    ``control`` rows follow the colex (first index fastest) ordering of the
    basis. ``is_polynomial`` means the weight function is constant, so the
    map is plain B-spline; ``weights.polynomial_weight`` marks the weaker
    property that W is one global polynomial.
    """

    space: TensorSpace
    weights: NurbsWeights
    control: np.ndarray
    name: str = ""
    is_affine: bool = field(init=False, default=False)
    is_polynomial: bool = field(init=False, default=False)

    def __post_init__(self):
        C = np.asarray(self.control, dtype=float)
        if C.shape != (self.space.N, self.space.n):
            raise ValueError(f"control array must be ({self.space.N}, {self.space.n}), got {C.shape}")
        if self.weights.weights.shape != (self.space.N,):
            raise ValueError("weight count does not match the space dimension")
        self.control = C
        self.is_polynomial = self.weights.is_unit
        grid = map_grid(self, [np.linspace(0.0, 1.0, 21)] * self.space.n, max_deriv=1)
        dets = grid.det
        if not np.all(np.isfinite(dets)) or np.min(dets) <= 0.0:
            flat = int(np.argmin(dets))
            loc = np.unravel_index(flat, dets.shape)
            pt = tuple(float(grid.axes[d][loc[d]]) for d in range(self.space.n))
            raise ValueError(f"Jacobian determinant {np.min(dets):.3e} <= 0 near x_hat={pt}")
        J = grid.jac.reshape(-1, self.space.n, self.space.n)
        scale = np.max(np.abs(J))
        self.is_affine = bool(
            self.is_polynomial and np.max(np.abs(J - J[0])) <= 1e-12 * (1.0 + scale)
        )

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def geometry_degree(self) -> int:
        return self.space.p


def map_grid(geom: GeometryMap, axes, max_deriv: int = 1) -> GridGeometry:
    """Evaluate the map (and derivatives up to ``max_deriv`` <= 2) on a tensor grid."""
    n = geom.space.n
    axes = tuple(np.asarray(a, dtype=float).ravel() for a in axes)
    if len(axes) != n:
        raise ValueError("one point array per parameter direction required")
    Es = [direction_matrices(geom.space.kvs[d], axes[d], max_deriv) for d in range(n)]
    w = geom.weights.weights
    hom = np.concatenate([geom.control * w[:, None], w[:, None]], axis=1)
    grid = hom.reshape(geom.space.shape + (n + 1,), order="F")

    num = _tensor_contract(Es, (0,) * n, grid)
    W = num[..., n]
    phi = num[..., :n] / W[..., None]
    out = GridGeometry(axes=axes, W=W, phi=phi)
    if max_deriv == 0:
        return out

    jac = np.empty(W.shape + (n, n))
    dW = np.empty(W.shape + (n,))
    for a in range(n):
        sel = tuple(1 if d == a else 0 for d in range(n))
        dnum = _tensor_contract(Es, sel, grid)
        dW[..., a] = dnum[..., n]
        jac[..., :, a] = (dnum[..., :n] - phi * dnum[..., n, None]) / W[..., None]
    out.jac = jac
    out.det = determinant(jac)
    if max_deriv == 1:
        return out

    hess = np.empty(W.shape + (n, n, n))
    for a in range(n):
        for b in range(a, n):
            sel = tuple((1 if d == a else 0) + (1 if d == b else 0) for d in range(n))
            d2num = _tensor_contract(Es, sel, grid)
            val = (
                d2num[..., :n]
                - jac[..., :, a] * dW[..., b, None]
                - jac[..., :, b] * dW[..., a, None]
                - phi * d2num[..., n, None]
            ) / W[..., None]
            hess[..., :, a, b] = val
            hess[..., :, b, a] = val
    out.hess = hess
    return out


def jacobian(geom: GeometryMap, xhat):
    """Jacobian matrix and determinant at one parameter point."""
    xhat = np.asarray(xhat, dtype=float).ravel()
    grid = map_grid(geom, [np.array([x]) for x in xhat], max_deriv=1)
    J = grid.jac.reshape(geom.n, geom.n)
    det = float(grid.det.reshape(()))
    if not np.isfinite(det) or det == 0.0:
        raise ValueError(f"singular Jacobian at x_hat={tuple(xhat)}")
    return J, det


def poisson_K(geom: GeometryMap, xhat) -> np.ndarray:
    """Pulled-back diffusion tensor ``K = |det J| J^-1 J^-T`` at one point."""
    J, det = jacobian(geom, xhat)
    adj = adjugate(J)
    return (adj @ adj.T) / abs(det)


# ---------------------------------------------------------------------------
# Weight transfer to solution spaces
# ---------------------------------------------------------------------------

def _tensor_collocate(space: TensorSpace, sites, values: np.ndarray) -> np.ndarray:
    """Interpolate grid data on a tensor space, one banded solve per direction."""
    coef = np.asarray(values, dtype=float)
    for d in range(space.n):
        kv = space.kvs[d]
        moved = np.moveaxis(coef, d, 0)
        sol = collocation_solve(kv.knots, kv.p, sites[d], moved.reshape(kv.m, -1))
        coef = np.moveaxis(sol.reshape(moved.shape), 0, d)
    return coef


def weight_function_grid(geom: GeometryMap, axes) -> np.ndarray:
    return map_grid(geom, axes, max_deriv=0).W


def detect_polynomial_weight(space: TensorSpace, weights: np.ndarray) -> bool:
    """True when the weight function is a single global polynomial piece.

    Interpolates W at Chebyshev nodes with one polynomial of coordinate
    degree p per direction and compares on a denser grid.
    """
    n, p = space.n, space.p
    w = np.asarray(weights, dtype=float)
    if np.all(w == w[0]):
        return True
    cheb = 0.5 * (1.0 - np.cos(np.pi * np.arange(p + 1) / p)) if p else np.array([0.5])
    gm = GeometryMap.__new__(GeometryMap)  # bypass validation; only W is evaluated
    gm.space = space
    gm.weights = NurbsWeights(weights=w)
    gm.control = np.zeros((space.N, n))
    Wc = weight_function_grid(gm, [cheb] * n)
    bez = bezier_knots(p)
    bezf = np.array([float(t) for t in bez])
    coef = np.asarray(Wc, dtype=float)
    for d in range(n):
        moved = np.moveaxis(coef, d, 0)
        sol = collocation_solve(bezf, p, cheb, moved.reshape(p + 1, -1))
        coef = np.moveaxis(sol.reshape(moved.shape), 0, d)
    dense = np.linspace(0.0, 1.0, 13)
    Wd = weight_function_grid(gm, [dense] * n)
    Es = [direction_matrices(UniformOpenKnotVector(p=p, m=p + 1, knots_exact=tuple(bez)), dense, 0) for _ in range(n)]
    fit = _tensor_contract(Es, (0,) * n, coef[..., None])[..., 0]
    return bool(np.max(np.abs(fit - Wd)) <= 1e-10 * np.max(np.abs(Wd)))


def weights_for_space(geom: GeometryMap, space: TensorSpace) -> NurbsWeights:
    """Weights that make the solution space reproduce the geometry's W.

    Exact (up to roundoff) whenever W is a global polynomial of coordinate
    degree at most the solution degree: interpolation at Greville sites then
    reproduces W. Constant W maps get unit weights.
    """
    if geom.is_polynomial:
        return NurbsWeights(weights=np.ones(space.N), polynomial_weight=True)
    if space.n != geom.n:
        raise ValueError("dimension mismatch")
    if tuple(kv.m for kv in space.kvs) == geom.space.shape and space.p == geom.space.p:
        return geom.weights
    if not geom.weights.polynomial_weight:
        raise ValueError("weight function is not polynomial; cannot transfer to a finer space")
    if space.p < geom.space.p:
        raise ValueError(f"solution degree {space.p} below geometry degree {geom.space.p}")
    sites = [space.kvs[d].greville() for d in range(space.n)]
    Wg = weight_function_grid(geom, sites)
    coef = _tensor_collocate(space, sites, Wg)
    return NurbsWeights(weights=coef.reshape(-1, order="F"), polynomial_weight=True)


# ---------------------------------------------------------------------------
# Built-in benchmark domains
# ---------------------------------------------------------------------------

def _from_bezier(p: int, n: int, hom_grid: np.ndarray, name: str) -> GeometryMap:
    """Refine a Bezier homogeneous control grid to the minimal open uniform space."""
    target = 2 * p + 1
    C = hom_grid.astype(float)
    for d in range(n):
        moved = np.moveaxis(C, d, 0)
        kv, refined = refine_uniform(bezier_knots(p), p, moved.reshape(p + 1, -1), target)
        C = np.moveaxis(refined.reshape((target,) + moved.shape[1:]), 0, d)
    flat = C.reshape(-1, n + 1, order="F")
    w = flat[:, n]
    pts = flat[:, :n] / w[:, None]
    poly = bool(np.allclose(w, w[0], rtol=0.0, atol=0.0)) or detect_polynomial_weight(
        make_tensor_space(p, target, n), w
    )
    space = make_tensor_space(p, target, n)
    return GeometryMap(space=space, weights=NurbsWeights(weights=w, polynomial_weight=poly), control=pts, name=name)


def _collocated_polynomial_map(p: int, n: int, func, name: str) -> GeometryMap:
    """B-spline map whose control points interpolate ``func`` at Greville sites.

    Exact whenever every component of ``func`` has coordinate degree <= p.
    """
    space = make_tensor_space(p, 2 * p + 1, n)
    sites = [space.kvs[d].greville() for d in range(n)]
    mesh = np.meshgrid(*sites, indexing="ij")
    vals = func(*mesh)
    control = np.empty((space.N, n))
    for c in range(n):
        coef = _tensor_collocate(space, sites, np.asarray(vals[c], dtype=float))
        control[:, c] = coef.reshape(-1, order="F")
    return GeometryMap(
        space=space,
        weights=NurbsWeights(weights=np.ones(space.N), polynomial_weight=True),
        control=control,
        name=name,
    )


def unit_square() -> GeometryMap:
    return _collocated_polynomial_map(1, 2, lambda x, y: (x, y), "unit_square")


def unit_cube() -> GeometryMap:
    return _collocated_polynomial_map(1, 3, lambda x, y, z: (x, y, z), "unit_cube")


def quarter_annulus(r_in: float = 1.0, r_out: float = 2.0) -> GeometryMap:
    """Exact quarter annulus: radial direction first, angular second.

    The angular direction is the rational quadratic arc with weights
    (1, sqrt(2)/2, 1); the radial direction is the linear blend written in
    degree-2 Bernstein form so both directions share the degree.
    """
    if not 0.0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    radii = np.array([r_in, 0.5 * (r_in + r_out), r_out])
    arc = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    warc = np.array([1.0, np.sqrt(2.0) / 2.0, 1.0])
    hom = np.empty((3, 3, 3))
    for i in range(3):
        for j in range(3):
            hom[i, j, :2] = warc[j] * radii[i] * arc[j]
            hom[i, j, 2] = warc[j]
    return _from_bezier(2, 2, hom, f"quarter_annulus({r_in:g},{r_out:g})")


def coons_2d(bottom, top, left, right, weights=None, name: str = "coons_2d") -> GeometryMap:
    """Bilinearly blended Coons patch of four degree-p boundary curves.

    Each curve is an array of ``p + 1`` control points; ``bottom``/``top``
    run along direction 1 at the direction-2 extremes, ``left``/``right``
    vice versa. Shared corner control points must agree. Optional per-curve
    weights (same layout) build a rational patch; blending acts on
    homogeneous coordinates.
    """
    curves = [np.asarray(c, dtype=float) for c in (bottom, top, left, right)]
    deg = curves[0].shape[0] - 1
    for c in curves:
        if c.shape != (deg + 1, 2):
            raise ValueError("all four curves need the same number of 2D control points")
    if weights is None:
        wcurves = [np.ones(deg + 1) for _ in range(4)]
    else:
        wcurves = [np.asarray(w, dtype=float) for w in weights]
    B, T, L, R = [np.concatenate([c * w[:, None], w[:, None]], axis=1) for c, w in zip(curves, wcurves)]
    corners = [(B[0], L[0]), (B[deg], R[0]), (T[0], L[deg]), (T[deg], R[deg])]
    for a, b in corners:
        if not np.allclose(a, b, rtol=0.0, atol=1e-12):
            raise ValueError("boundary curves do not share corner control points")
    hom = np.empty((deg + 1, deg + 1, 3))
    for k in range(deg + 1):
        for l in range(deg + 1):
            u, v = k / deg, l / deg
            hom[k, l] = (
                (1 - v) * B[k]
                + v * T[k]
                + (1 - u) * L[l]
                + u * R[l]
                - ((1 - u) * (1 - v) * B[0] + u * (1 - v) * B[deg] + (1 - u) * v * T[0] + u * v * T[deg])
            )
    return _from_bezier(deg, 2, hom, name)


def _coons_quadratic() -> GeometryMap:
    bottom = [(0.0, 0.0), (0.5, -0.15), (1.0, 0.0)]
    top = [(-0.1, 1.0), (0.5, 1.2), (1.1, 1.05)]
    left = [(0.0, 0.0), (-0.2, 0.5), (-0.1, 1.0)]
    right = [(1.0, 0.0), (1.15, 0.5), (1.1, 1.05)]
    return coons_2d(bottom, top, left, right, name="coons_quadratic")


def _coons_cubic() -> GeometryMap:
    bottom = [(0.0, 0.0), (0.3, -0.1), (0.7, -0.1), (1.0, 0.0)]
    top = [(-0.1, 1.0), (0.3, 1.15), (0.7, 1.15), (1.1, 1.0)]
    left = [(0.0, 0.0), (-0.15, 0.3), (-0.15, 0.7), (-0.1, 1.0)]
    right = [(1.0, 0.0), (1.1, 0.35), (1.1, 0.65), (1.1, 1.0)]
    return coons_2d(bottom, top, left, right, name="coons_cubic")


def _coons_rational() -> GeometryMap:
    # rational edges with non-unit interior weights give the patch a
    # nonconstant polynomial weight function; shape is kept asymmetric so
    # the assembled stencils carry no accidental reflection symmetry
    bottom = [(0.0, 0.0), (0.55, -0.18), (1.0, 0.0)]
    top = [(-0.12, 1.0), (0.45, 1.22), (1.08, 1.02)]
    left = [(0.0, 0.0), (-0.22, 0.45), (-0.12, 1.0)]
    right = [(1.0, 0.0), (1.18, 0.55), (1.08, 1.02)]
    weights = ([1.0, 1.25, 1.0], [1.0, 0.85, 1.0], [1.0, 1.1, 1.0], [1.0, 0.95, 1.0])
    return coons_2d(bottom, top, left, right, weights=weights, name="coons_rational")


def trivariate_polynomial_3d() -> GeometryMap:
    """Unit cube with a mild interior bulge; plain quadratic B-spline map."""

    def bump(t):
        return 4.0 * t * (1.0 - t)

    def func(x, y, z):
        a = 0.05
        return (
            x + a * bump(y) * bump(z),
            y + a * bump(x) * bump(z),
            z + a * bump(x) * bump(y),
        )

    return _collocated_polynomial_map(2, 3, func, "trivariate_polynomial_3d")


BUILTIN_NAMES = (
    "unit_square",
    "unit_cube",
    "quarter_annulus",
    "coons_quadratic",
    "coons_cubic",
    "coons_rational",
    "trivariate_polynomial_3d",
)


def builtin_domain(name: str, **kwargs) -> GeometryMap:
    """Benchmark domain by name; see ``BUILTIN_NAMES``."""
    if name == "unit_square":
        return unit_square()
    if name == "unit_cube":
        return unit_cube()
    if name == "quarter_annulus":
        return quarter_annulus(**kwargs)
    if name == "coons_quadratic":
        return _coons_quadratic()
    if name == "coons_cubic":
        return _coons_cubic()
    if name == "coons_rational":
        return _coons_rational()
    if name == "trivariate_polynomial_3d":
        return trivariate_polynomial_3d()
    raise ValueError(f"unknown builtin domain {name!r}; choose from {BUILTIN_NAMES}")


# ---------------------------------------------------------------------------
# Geometry file format
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^iga-geo v1 n=(\d+) p=(\d+) m=([\d,]+)$")


def save_geometry(geom: GeometryMap, path) -> None:
    """Write the map as plain text; reals carry 17 significant digits."""
    ms = ",".join(str(kv.m) for kv in geom.space.kvs)
    lines = [f"iga-geo v1 n={geom.n} p={geom.space.p} m={ms}"]
    w = geom.weights.weights
    for i in range(geom.space.N):
        nums = " ".join(repr(float(v)) for v in geom.control[i])
        lines.append(f"{i + 1} {repr(float(w[i]))} {nums}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_geometry(path) -> GeometryMap:
    """Read a map written by :func:`save_geometry`; validates structure."""
    with open(path) as f:
        raw = [ln.strip() for ln in f if ln.strip()]
    if not raw:
        raise ValueError("empty geometry file")
    m = _HEADER_RE.match(raw[0])
    if not m:
        raise ValueError(f"malformed header: {raw[0]!r}")
    n, p = int(m.group(1)), int(m.group(2))
    ms = [int(v) for v in m.group(3).split(",") if v]
    if len(ms) != n:
        raise ValueError(f"header lists {len(ms)} mesh sizes for n={n}")
    space = make_tensor_space(p, ms)
    N = space.N
    if len(raw) - 1 != N:
        raise ValueError(f"expected {N} control point lines, found {len(raw) - 1}")
    w = np.empty(N)
    pts = np.empty((N, n))
    for line in raw[1:]:
        parts = line.split()
        if len(parts) != n + 2:
            raise ValueError(f"bad control point line: {line!r}")
        i = int(parts[0])
        if not 1 <= i <= N:
            raise ValueError(f"index {i} outside 1..{N}")
        w[i - 1] = float(parts[1])
        pts[i - 1] = [float(v) for v in parts[2:]]
    if np.any(w <= 0):
        raise ValueError("nonpositive weight")
    poly = detect_polynomial_weight(space, w)
    return GeometryMap(space=space, weights=NurbsWeights(weights=w, polynomial_weight=poly), control=pts, name="file")
