"""B-spline and NURBS spaces on open uniform knot vectors.

Knot values are kept as exact rationals k/(m - p) so that the cardinal
(translation) structure of the interior basis functions is bit-stable;
floating-point copies are derived once for numerical evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "UniformOpenKnotVector",
    "TensorSpace",
    "CardinalLattice",
    "NurbsWeights",
    "make_open_uniform_knots",
    "make_tensor_space",
    "eval_basis",
    "bspline_ders",
    "find_span",
    "cardinal_midpoints",
    "colex_index",
    "colex_multi_index",
    "eval_nurbs",
    "marsden_check",
    "greville_points",
    "insert_knot",
    "refine_uniform",
    "tabulate_1d",
    "collocation_solve",
    "evaluation_matrix",
]


# ---------------------------------------------------------------------------
# Low-level evaluation on arbitrary knot arrays
# ---------------------------------------------------------------------------

def find_span(knots: np.ndarray, p: int, x: float) -> int:
    """Index of the knot span containing ``x``.

    Returns the largest ``span`` with ``knots[span] <= x < knots[span + 1]``,
    clamped so the right endpoint lands in the last nonempty span.
    """
    nbasis = len(knots) - p - 1
    span = int(np.searchsorted(knots, x, side="right")) - 1
    return min(max(span, p), nbasis - 1)


def bspline_ders(knots: np.ndarray, p: int, x: float, nu: int = 0):
    """Values and derivatives of the ``p + 1`` basis functions nonzero at ``x``.

    Standard stable recursion (inverted triangle of knot differences).
    Returns ``(span, ders)`` where ``ders`` has shape ``(nu + 1, p + 1)`` and
    column ``r`` belongs to basis function ``span - p + r``.
    """
    span = find_span(knots, p, x)
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    ndu = np.empty((p + 1, p + 1))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    nd = min(nu, p)
    ders = np.zeros((nu + 1, p + 1))
    ders[0, :] = ndu[:, p]

    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nd + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1

    fac = float(p)
    for k in range(1, nd + 1):
        ders[k, :] *= fac
        fac *= p - k
    return span, ders


def tabulate_1d(knots: np.ndarray, p: int, points: np.ndarray, nu: int = 0):
    """Tabulate basis values/derivatives at many points.

    Returns ``(spans, table)`` with ``spans`` of shape ``(npts,)`` and
    ``table`` of shape ``(npts, nu + 1, p + 1)``.
    """
    points = np.asarray(points, dtype=float)
    npts = points.size
    spans = np.empty(npts, dtype=np.int64)
    table = np.empty((npts, nu + 1, p + 1))
    for i, x in enumerate(points.ravel()):
        spans[i], table[i] = bspline_ders(knots, p, float(x), nu)
    return spans, table


def evaluation_matrix(knots: np.ndarray, p: int, points: np.ndarray) -> np.ndarray:
    """Dense matrix ``E[i, j] = B_j(points[i])`` over all basis functions."""
    points = np.asarray(points, dtype=float)
    nbasis = len(knots) - p - 1
    E = np.zeros((points.size, nbasis))
    spans, table = tabulate_1d(knots, p, points, 0)
    for i in range(points.size):
        E[i, spans[i] - p : spans[i] + 1] = table[i, 0]
    return E


def collocation_solve(knots: np.ndarray, p: int, sites: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the interpolation system ``B_j(sites[i]) c_j = rhs[i]`` (banded).

    ``rhs`` may have extra trailing axes; the solve acts on the first axis.
    The number of sites must equal the basis dimension and the sites must
    satisfy the interlacing (Schoenberg-Whitney) condition, which holds for
    Greville sites and for de Boor site-averaged knots.
    """
    sites = np.asarray(sites, dtype=float)
    nbasis = len(knots) - p - 1
    if sites.size != nbasis:
        raise ValueError(f"need {nbasis} sites, got {sites.size}")
    if nbasis == 1:
        return np.asarray(rhs, dtype=float).copy()
    spans, table = tabulate_1d(knots, p, sites, 0)
    cols_lo = spans - p
    l = int(np.max(np.arange(nbasis) - cols_lo))
    u = int(np.max(cols_lo + p - np.arange(nbasis)))
    ab = np.zeros((l + u + 1, nbasis))
    for i in range(nbasis):
        for r in range(p + 1):
            j = cols_lo[i] + r
            ab[u + i - j, j] = table[i, 0, r]
    shape = np.shape(rhs)
    flat = np.asarray(rhs, dtype=float).reshape(nbasis, -1)
    sol = solve_banded((l, u), ab, flat)
    return sol.reshape(shape)


def tensor_collocate(kvs, sites, values: np.ndarray) -> np.ndarray:
    """Interpolate tensor-grid data, one banded collocation solve per direction.

    ``values`` has one leading axis per knot vector (length = its dimension)
    plus arbitrary trailing axes; returns the spline coefficient grid.
    """
    coef = np.asarray(values, dtype=float)
    for d, kv in enumerate(kvs):
        moved = np.moveaxis(coef, d, 0)
        sol = collocation_solve(kv.knots, kv.p, sites[d], moved.reshape(kv.m, -1))
        coef = np.moveaxis(sol.reshape(moved.shape), 0, d)
    return coef


# ---------------------------------------------------------------------------
# Open uniform knot vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformOpenKnotVector:
    """Open uniform knot vector on [0, 1] with degree ``p`` and ``m`` basis functions.

    The first and last ``p + 1`` knots are 0 and 1; interior knots sit at
    ``k / (m - p)``. The mesh size ``h = 1 / (m - p)`` is stored exactly.
    """

    p: int
    m: int
    knots_exact: tuple = field(repr=False)

    @property
    def h_exact(self) -> Fraction:
        return Fraction(1, self.m - self.p)

    @property
    def h(self) -> float:
        return 1.0 / (self.m - self.p)

    @property
    def spans(self) -> int:
        return self.m - self.p

    @property
    def knots(self) -> np.ndarray:
        return np.array([float(t) for t in self.knots_exact])

    def span_breaks(self) -> np.ndarray:
        """Breakpoints 0, h, 2h, ..., 1 (floats)."""
        return np.array([float(Fraction(k, self.spans)) for k in range(self.spans + 1)])

    def greville_exact(self) -> list:
        p, T = self.p, self.knots_exact
        return [sum(T[k + 1 : k + p + 1], Fraction(0)) / p if p else T[k] for k in range(self.m)]

    def greville(self) -> np.ndarray:
        return np.array([float(g) for g in self.greville_exact()])


def make_open_uniform_knots(p: int, m: int) -> UniformOpenKnotVector:
    """Build the open uniform knot vector for degree ``p`` and dimension ``m``.

    Rejects ``m < 2p + 1`` because no cardinal (interior translate) basis
    function would exist.
    """
    if p < 1:
        raise ValueError(f"degree must be >= 1, got {p}")
    if m < 2 * p + 1:
        raise ValueError(f"basis count m={m} below 2p+1={2 * p + 1}")
    spans = m - p
    interior = [Fraction(k, spans) for k in range(1, spans)]
    knots = [Fraction(0)] * (p + 1) + interior + [Fraction(1)] * (p + 1)
    return UniformOpenKnotVector(p=p, m=m, knots_exact=tuple(knots))


def _open_kv_from_knots(p: int, knots_exact: Sequence[Fraction]) -> UniformOpenKnotVector:
    """Wrap an explicit open knot list; validates the uniform-open structure."""
    m = len(knots_exact) - p - 1
    expect = make_open_uniform_knots(p, m)
    if tuple(knots_exact) != expect.knots_exact:
        raise ValueError("knot list is not open uniform")
    return expect


def greville_points(kv: UniformOpenKnotVector) -> np.ndarray:
    return kv.greville()


def eval_basis(kv: UniformOpenKnotVector, x: float, max_deriv: int = 0):
    """Evaluate the ``p + 1`` nonzero basis functions at ``x`` in [0, 1].

    Returns ``(span, ders)``; column ``r`` of ``ders`` belongs to the
    (0-based) basis function ``span - p + r``. Derivatives up to order 2.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if not 0 <= max_deriv <= 2:
        raise ValueError("max_deriv must be 0, 1, or 2")
    return bspline_ders(kv.knots, kv.p, x, max_deriv)


# ---------------------------------------------------------------------------
# Cardinal structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CardinalLattice:
    """Midpoints of the interior (cardinal) basis functions of one direction.

    Basis indices run 1-based here to match the midpoint formula
    ``x~(k) = (k - (p + 1)/2) h`` for ``k = p + 1 .. m - p``.
    """

    p: int
    m: int
    indices: np.ndarray
    midpoints: np.ndarray

    @property
    def count(self) -> int:
        return self.m - 2 * self.p

    def midpoint_exact(self, k: int) -> Fraction:
        return (Fraction(2 * k - self.p - 1, 2)) * Fraction(1, self.m - self.p)


def cardinal_midpoints(kv: UniformOpenKnotVector) -> CardinalLattice:
    """Cardinal lattice of ``kv``: indices ``p+1 .. m-p`` and their midpoints."""
    p, m = kv.p, kv.m
    ks = np.arange(p + 1, m - p + 1, dtype=np.int64)
    h = kv.h_exact
    mids = np.array([float((Fraction(2 * int(k) - p - 1, 2)) * h) for k in ks])
    return CardinalLattice(p=p, m=m, indices=ks, midpoints=mids)


# ---------------------------------------------------------------------------
# Tensor-product space and colex indexing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorSpace:
    """Tensor product of per-direction open uniform knot vectors.

    All directions share the same degree. The global (colex) index runs
    fastest in the first direction.
    """

    kvs: tuple

    @property
    def n(self) -> int:
        return len(self.kvs)

    @property
    def p(self) -> int:
        return self.kvs[0].p

    @property
    def shape(self) -> tuple:
        return tuple(kv.m for kv in self.kvs)

    @property
    def N(self) -> int:
        return int(np.prod(self.shape))

    def ravel(self, multi0) -> np.ndarray:
        """0-based multi-index array (..., n) to flat colex index."""
        multi0 = np.asarray(multi0)
        return np.ravel_multi_index(tuple(multi0[..., d] for d in range(self.n)), self.shape, order="F")

    def unravel(self, flat) -> np.ndarray:
        """Flat colex index to 0-based multi-index array (..., n)."""
        parts = np.unravel_index(np.asarray(flat), self.shape, order="F")
        return np.stack(parts, axis=-1)


def make_tensor_space(p: int, m, n: int | None = None) -> TensorSpace:
    """Tensor space with equal degree; ``m`` is an int (with ``n``) or a sequence."""
    if np.isscalar(m):
        if n is None:
            raise ValueError("give n when m is scalar")
        ms = [int(m)] * n
    else:
        ms = [int(v) for v in m]
    if n is not None and len(ms) != n:
        raise ValueError("m length does not match n")
    if len(ms) not in (1, 2, 3):
        raise ValueError("supported dimensions: 1, 2, 3")
    return TensorSpace(kvs=tuple(make_open_uniform_knots(p, mv) for mv in ms))


def colex_index(multi: Sequence[int], m) -> int:
    """1-based colex index: ``i = i1 + (i2 - 1) m1 + (i3 - 1) m1 m2``."""
    ms = [int(m)] * len(multi) if np.isscalar(m) else [int(v) for v in m]
    if len(ms) != len(multi):
        raise ValueError("multi-index and m length mismatch")
    i = 0
    stride = 1
    for ik, mk in zip(multi, ms):
        if not 1 <= ik <= mk:
            raise ValueError(f"index {ik} outside 1..{mk}")
        i += (int(ik) - 1) * stride
        stride *= mk
    return i + 1


def colex_multi_index(i: int, m, n: int | None = None) -> tuple:
    """Inverse of :func:`colex_index` (both 1-based)."""
    ms = [int(m)] * int(n) if np.isscalar(m) else [int(v) for v in m]
    total = int(np.prod(ms))
    if not 1 <= i <= total:
        raise ValueError(f"index {i} outside 1..{total}")
    rem = int(i) - 1
    multi = []
    for mk in ms:
        multi.append(rem % mk + 1)
        rem //= mk
    return tuple(multi)


# ---------------------------------------------------------------------------
# NURBS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NurbsWeights:
    """Per-basis weights in colex order; all strictly positive.

    ``polynomial_weight`` marks weight functions W that are globally
    polynomial (coordinate degree <= p), which makes W invariant under any
    refinement of the space.
    """

    weights: np.ndarray
    polynomial_weight: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a flat colex-ordered vector")
        if not np.all(w > 0):
            raise ValueError("nonpositive weight")
        object.__setattr__(self, "weights", w)

    @property
    def is_unit(self) -> bool:
        """True when all weights are equal (W constant, basis is polynomial)."""
        w = self.weights
        return bool(np.all(w == w[0]))


def unit_weights(space: TensorSpace) -> NurbsWeights:
    return NurbsWeights(weights=np.ones(space.N), polynomial_weight=True)


@dataclass(frozen=True)
class NurbsValues:
    """Local nonzero NURBS basis values at one point.

    ``first`` holds the 0-based first nonzero basis index per direction; the
    value array has shape ``(p+1,) * n``; ``grad`` prepends an axis of length
    ``n`` and ``hess`` two such axes.
    """

    first: tuple
    value: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None


def _local_tensor(tabs, sel):
    """Outer product of chosen per-direction rows: sel[d] in {0,1,2} picks the derivative."""
    out = tabs[0][sel[0]]
    for d in range(1, len(tabs)):
        out = np.multiply.outer(out, tabs[d][sel[d]])
    return out


def eval_nurbs(space: TensorSpace, weights: NurbsWeights, xhat, max_deriv: int = 0) -> NurbsValues:
    """Rational basis values (and derivatives up to 2) at a parameter point."""
    n = space.n
    xhat = np.asarray(xhat, dtype=float).ravel()
    if xhat.size != n:
        raise ValueError("point dimension mismatch")
    spans = []
    tabs = []
    for d in range(n):
        s, ders = eval_basis(space.kvs[d], float(xhat[d]), max_deriv)
        spans.append(s)
        tabs.append(ders)
    p = space.p
    first = tuple(s - p for s in spans)
    wgrid = np.asarray(weights.weights, dtype=float).reshape(space.shape, order="F")
    sel = tuple(slice(f, f + p + 1) for f in first)
    wloc = wgrid[sel]

    B = _local_tensor(tabs, (0,) * n)
    W = float(np.sum(wloc * B))
    if W <= 0:
        raise ValueError(f"nonpositive weight function W={W} at {xhat}")
    R = wloc * B / W
    if max_deriv == 0:
        return NurbsValues(first=first, value=R)

    dB = np.empty((n,) + B.shape)
    for a in range(n):
        sel_a = tuple(1 if d == a else 0 for d in range(n))
        dB[a] = _local_tensor(tabs, sel_a)
    dW = np.array([np.sum(wloc * dB[a]) for a in range(n)])
    dR = np.empty_like(dB)
    for a in range(n):
        dR[a] = (wloc * dB[a] - R * dW[a]) / W
    if max_deriv == 1:
        return NurbsValues(first=first, value=R, grad=dR)

    d2R = np.empty((n, n) + B.shape)
    for a in range(n):
        for b in range(n):
            sel_ab = tuple((1 if d == a else 0) + (1 if d == b else 0) for d in range(n))
            d2B = _local_tensor(tabs, sel_ab)
            d2W = float(np.sum(wloc * d2B))
            d2R[a, b] = (wloc * d2B - dR[a] * dW[b] - dR[b] * dW[a] - R * d2W) / W
    return NurbsValues(first=first, value=R, grad=dR, hess=d2R)


# ---------------------------------------------------------------------------
# Marsden's identity
# ---------------------------------------------------------------------------

def marsden_check(kv: UniformOpenKnotVector, x: float, y: float) -> float:
    """Residual of the polynomial reproduction identity at ``(x, y)``.

    Computes ``|(x - y)^p - sum_k b_k(x) psi_k(y)|`` with
    ``psi_k(y) = prod_{j=1..p} (knot[k + j] - y)``.
    """
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError("x, y must lie in [0, 1]")
    p = kv.p
    T = kv.knots
    span, ders = eval_basis(kv, x, 0)
    total = 0.0
    for r in range(p + 1):
        k = span - p + r
        psi = float(np.prod(T[k + 1 : k + p + 1] - y)) if p else 1.0
        total += ders[0, r] * psi
    return abs((x - y) ** p - total)


# ---------------------------------------------------------------------------
# Knot insertion (Boehm) and uniform refinement
# ---------------------------------------------------------------------------

def insert_knot(knots_exact: Sequence[Fraction], p: int, coefs: np.ndarray, xbar: Fraction):
    """Insert one knot; returns ``(new_knots, new_coefs)``.

    ``coefs`` has shape ``(nbasis, ...)``; control data in homogeneous form
    should be passed as-is (the convex combinations apply to each column).
    """
    T = list(knots_exact)
    nbasis = len(T) - p - 1
    coefs = np.asarray(coefs, dtype=float)
    if coefs.shape[0] != nbasis:
        raise ValueError("coefficient count does not match knots")
    if not T[p] <= xbar <= T[nbasis]:
        raise ValueError("new knot outside the knot range")
    ell = p
    while ell + 1 < len(T) and T[ell + 1] <= xbar:
        ell += 1
    new_T = T[: ell + 1] + [xbar] + T[ell + 1 :]
    out = np.empty((nbasis + 1,) + coefs.shape[1:], dtype=float)
    out[: ell - p + 1] = coefs[: ell - p + 1]
    for i in range(ell - p + 1, ell + 1):
        denom = T[i + p] - T[i]
        alpha = float((xbar - T[i]) / denom) if denom != 0 else 0.0
        out[i] = alpha * coefs[i] + (1.0 - alpha) * coefs[i - 1]
    out[ell + 1 :] = coefs[ell:]
    return new_T, out


def bezier_knots(p: int) -> list:
    """Single-span open knot list (Bernstein basis on [0, 1])."""
    return [Fraction(0)] * (p + 1) + [Fraction(1)] * (p + 1)


def refine_uniform(knots_exact: Sequence[Fraction], p: int, coefs: np.ndarray, target_m: int):
    """Insert knots until the vector is open uniform with ``target_m`` functions.

    Works from any open knot list whose interior knots are a subset of the
    target's (in particular from the single-span Bezier form).
    Returns ``(new_kv, new_coefs)``.
    """
    spans = target_m - p
    have = set(knots_exact)
    T = list(knots_exact)
    C = np.asarray(coefs, dtype=float)
    for k in range(1, spans):
        xi = Fraction(k, spans)
        if xi not in have:
            T, C = insert_knot(T, p, C, xi)
    new_kv = _open_kv_from_knots(p, T)
    return new_kv, C
