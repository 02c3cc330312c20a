"""Element-wise Gauss quadrature assembly of isogeometric Galerkin matrices.

Every floating-point reduction runs in a fixed order: einsum with
optimization disabled, fixed element chunk sizes, ascending element ids,
and a stable triplet sort before duplicate summation. As a consequence,
assembling a subset of rows reproduces the corresponding rows of the full
matrix bit for bit, and symmetric forms return bitwise symmetric matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.io import mminfo, mmread, mmwrite

from .bspline import (
    TensorSpace,
    NurbsWeights,
    make_tensor_space,
    tabulate_1d,
    tensor_collocate,
)
from .geometry import (
    GeometryMap,
    map_grid,
    adjugate,
    direction_matrices,
    weights_for_space,
    _tensor_contract,
)

# Elements per chunk by dimension. Fixed (not tuned at runtime) so that the
# grouping of arithmetic never depends on the machine or thread count.
_CHUNK = {1: 8192, 2: 4096, 3: 256}


def _chunk_elements(n: int, p: int, g: int) -> int:
    """Elements per chunk, shrunk for high degree so local tables stay small.

    Depends only on dimension, degree and rule size, never on the machine;
    chunking groups whole elements, so values are identical either way.
    """
    work = (g ** n) * ((p + 1) ** n)
    ref = 3 ** (2 * n)
    return max(32, _CHUNK[n] * ref // max(work, ref))


class FormKind(Enum):
    """Bilinear forms the assembler knows how to integrate."""

    POISSON = "poisson"
    MASS = "mass"
    BIHARMONIC = "biharmonic"
    STOKES_VELOCITY = "stokes_velocity"
    STOKES_DIVERGENCE = "stokes_divergence"


# highest parametric derivative of the basis each form consumes
_FORM_DERIV = {
    FormKind.POISSON: 1,
    FormKind.MASS: 0,
    FormKind.BIHARMONIC: 2,
    FormKind.STOKES_VELOCITY: 1,
    FormKind.STOKES_DIVERGENCE: (1, 0),
}

_FORM_SYMMETRIC = {
    FormKind.POISSON: True,
    FormKind.MASS: True,
    FormKind.BIHARMONIC: True,
    FormKind.STOKES_VELOCITY: True,
    FormKind.STOKES_DIVERGENCE: False,
}


def form_is_symmetric(form: FormKind) -> bool:
    return _FORM_SYMMETRIC[form]


def form_derivative_order(form: FormKind):
    return _FORM_DERIV[form]


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule on the reference interval [-1, 1]."""

    g: int
    nodes: np.ndarray
    weights: np.ndarray


def gauss_rule(g: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``g`` points (exact through degree 2g - 1)."""
    if g < 1:
        raise ValueError(f"need at least one quadrature point, got g={g}")
    x, w = np.polynomial.legendre.leggauss(g)
    return QuadratureRule(g=g, nodes=x, weights=w)


def _quad_axes(space: TensorSpace, g: int):
    """Per-direction quadrature point arrays plus per-point span weights."""
    rule = gauss_rule(g)
    axes, pw = [], []
    for kv in space.kvs:
        offs = (rule.nodes + 1.0) * (0.5 * kv.h)
        breaks = kv.span_breaks()[:-1]
        axes.append((breaks[:, None] + offs[None, :]).ravel())
        pw.append(rule.weights * (0.5 * kv.h))
    return axes, pw


def _tensor_point_weights(pw) -> np.ndarray:
    """Flatten per-direction point weights colex (first direction fastest)."""
    wq = pw[0]
    for d in range(1, len(pw)):
        wq = (pw[d][:, None] * wq[None, :]).ravel()
    return wq


# ---------------------------------------------------------------------------
# Discretizations
# ---------------------------------------------------------------------------

@dataclass
class Discretization:
    """A scalar solution space over a geometry, plus its quadrature order."""

    geom: GeometryMap
    space: TensorSpace
    weights: NurbsWeights
    gauss: int

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def p(self) -> int:
        return self.space.p

    @property
    def spans(self) -> tuple:
        return tuple(kv.spans for kv in self.space.kvs)

    @property
    def ndof(self) -> int:
        return self.space.N


def make_discretization(geom: GeometryMap, p: int, spans, gauss: int | None = None) -> Discretization:
    """Solution space of degree ``p`` with ``spans`` elements per direction.

    ``spans`` is an int (same count each direction) or a sequence. The
    weights of the space are chosen so it reproduces the geometry's weight
    function; quadrature defaults to ``p + 1`` Gauss points per direction.
    """
    n = geom.n
    if np.isscalar(spans):
        spans = (int(spans),) * n
    spans = tuple(int(s) for s in spans)
    if len(spans) != n:
        raise ValueError(f"need {n} span counts, got {len(spans)}")
    space = make_tensor_space(p, [s + p for s in spans])
    w = weights_for_space(geom, space)
    g = int(gauss) if gauss is not None else p + 1
    if g < 1:
        raise ValueError("quadrature order must be positive")
    return Discretization(geom=geom, space=space, weights=w, gauss=g)


@dataclass
class StokesSpaces:
    """Inf-sup stable velocity/pressure pair on nested meshes.

    The velocity space has degree one higher than the pressure and lives on
    the mesh obtained by halving every pressure element, so each pressure
    element contains ``2**n`` velocity elements.
    """

    geom: GeometryMap
    velocity: Discretization
    pressure: Discretization

    @property
    def n(self) -> int:
        return self.geom.n


def stokes_subgrid_spaces(geom: GeometryMap, p_pressure: int, spans, gauss: int | None = None) -> StokesSpaces:
    """Build the subgrid velocity/pressure pair; ``spans`` counts pressure elements."""
    if p_pressure < 1:
        raise ValueError("pressure degree must be at least 1")
    n = geom.n
    if np.isscalar(spans):
        spans = (int(spans),) * n
    spans = tuple(int(s) for s in spans)
    pressure = make_discretization(geom, p_pressure, spans)
    velocity = make_discretization(geom, p_pressure + 1, tuple(2 * s for s in spans), gauss=gauss)
    return StokesSpaces(geom=geom, velocity=velocity, pressure=pressure)


# ---------------------------------------------------------------------------
# Sparse output
# ---------------------------------------------------------------------------

@dataclass
class SparseMatrix:
    """CSR matrix plus assembly metadata.

    ``populated_rows`` is None for a full assembly; for a row-restricted
    assembly it holds the sorted row indices that carry entries. Explicit
    zeros are kept so the sparsity pattern is the basis-overlap pattern.
    """

    mat: sp.csr_matrix
    symmetric: bool = False
    populated_rows: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.mat.shape

    @property
    def nnz(self) -> int:
        return self.mat.nnz

    def toarray(self) -> np.ndarray:
        return self.mat.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.mat.sum(axis=1)).ravel()

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.mat.data))) if self.mat.nnz else 0.0


def csr_from_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """Sum duplicate triplets in a reproducible order and build a CSR matrix.

    The stable lexicographic sort keys on (row, col), so triplets for the
    same entry keep their generation order and are then added left to right.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    vals = np.asarray(vals, dtype=float)
    if rows.size == 0:
        return sp.csr_matrix(shape)
    order = np.lexsort((cols, rows))
    r = rows[order]
    c = cols[order]
    v = vals[order]
    new = np.empty(r.size, dtype=bool)
    new[0] = True
    new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.flatnonzero(new)
    data = np.add.reduceat(v, starts)
    ur = r[starts]
    uc = c[starts].astype(np.int32, copy=False)
    indptr = np.searchsorted(ur, np.arange(shape[0] + 1))
    mat = sp.csr_matrix((data, uc, indptr), shape=shape)
    mat.has_sorted_indices = True
    return mat


def is_bitwise_symmetric(A: SparseMatrix) -> bool:
    """True when ``A`` equals its transpose including every last bit."""
    M = A.mat.copy()
    M.sort_indices()
    T = A.mat.transpose().tocsr()
    T.sort_indices()
    return (
        np.array_equal(M.indptr, T.indptr)
        and np.array_equal(M.indices, T.indices)
        and np.array_equal(M.data.view(np.int64), T.data.view(np.int64))
    )


def matrices_bitwise_equal(A: SparseMatrix, B: SparseMatrix, rows=None) -> bool:
    """Bitwise comparison of two matrices, optionally restricted to ``rows``."""
    MA, MB = A.mat, B.mat
    if rows is not None:
        rows = np.asarray(rows)
        MA = MA[rows]
        MB = MB[rows]
    MA = MA.tocsr().copy()
    MB = MB.tocsr().copy()
    MA.sort_indices()
    MB.sort_indices()
    return (
        np.array_equal(MA.indptr, MB.indptr)
        and np.array_equal(MA.indices, MB.indices)
        and np.array_equal(MA.data.view(np.int64), MB.data.view(np.int64))
    )


def save_matrix_market(path, A: SparseMatrix) -> None:
    """Write a matrix in MatrixMarket coordinate format.

    Symmetric matrices are tagged ``symmetric`` (lower triangle stored);
    everything else is written as ``general``. 16 significant digits keep
    the round trip value-exact.
    """
    sym = "symmetric" if A.symmetric else "general"
    mmwrite(str(path), A.mat, field="real", precision=16, symmetry=sym)


def load_matrix_market(path) -> SparseMatrix:
    """Read a MatrixMarket file back into a :class:`SparseMatrix`."""
    info = mminfo(str(path))
    mat = mmread(str(path)).tocsr()
    mat.sort_indices()
    return SparseMatrix(mat=mat, symmetric=(info[5] == "symmetric"))


# ---------------------------------------------------------------------------
# Element bookkeeping
# ---------------------------------------------------------------------------

def _grid_to_elements(A: np.ndarray, espans, g: int) -> np.ndarray:
    """Reorder a tensor-grid point array into per-element blocks.

    Input shape ``(G_1, ..., G_n) + extra`` with ``G_d = espans[d] * g``;
    output shape ``(Ne, g**n) + extra`` with elements and in-element points
    both flattened colex (first direction fastest).
    """
    n = len(espans)
    extra = A.shape[n:]
    shp = []
    for s in espans:
        shp += [int(s), g]
    B = A.reshape(tuple(shp) + extra)
    tax = [2 * d for d in range(n)][::-1]
    qax = [2 * d + 1 for d in range(n)][::-1]
    B = np.transpose(B, tax + qax + [2 * n + k for k in range(len(extra))])
    ne = int(np.prod([int(s) for s in espans]))
    return np.ascontiguousarray(B).reshape((ne, g ** n) + extra)


def _elements_for_rows(row_space: TensorSpace, espans, ratio: int, rows) -> np.ndarray:
    """Ascending flat (colex) ids of elements supporting any of ``rows``."""
    n = row_space.n
    p = row_space.p
    spans_r = tuple(kv.spans for kv in row_space.kvs)
    mask = np.zeros(espans, dtype=bool, order="F")
    multi = row_space.unravel(np.asarray(rows).reshape(-1))
    for mi in np.atleast_2d(multi):
        sl = tuple(
            slice(ratio * max(0, int(mi[d]) - p), ratio * (min(spans_r[d] - 1, int(mi[d])) + 1))
            for d in range(n)
        )
        mask[sl] = True
    return np.flatnonzero(mask.ravel(order="F"))


def _element_multi(eids: np.ndarray, espans) -> np.ndarray:
    parts = np.unravel_index(eids, espans, order="F")
    return np.stack(parts, axis=-1)


def elements_for_rows(disc: Discretization, rows) -> np.ndarray:
    """Public wrapper: elements touched when assembling the given rows."""
    return _elements_for_rows(disc.space, disc.spans, 1, rows)


# ---------------------------------------------------------------------------
# Per-space quadrature tables
# ---------------------------------------------------------------------------

@dataclass
class _SpaceBinding:
    """Everything needed to evaluate one space's basis on the element mesh.

    ``ratio`` is the number of mesh elements per span of this space along
    each direction (1 for the space's own mesh, 2 for a pressure space read
    on the velocity mesh).
    """

    space: TensorSpace
    weights: NurbsWeights
    g: int
    nu: int
    ratio: int
    V: list
    Iloc: np.ndarray
    strides: np.ndarray
    Wb: np.ndarray | None = None
    dWb: np.ndarray | None = None
    d2Wb: np.ndarray | None = None

    @property
    def L(self) -> int:
        return (self.space.p + 1) ** self.space.n

    @classmethod
    def build(cls, space, weights, axes, espans, g, nu, ratio=1):
        n, p = space.n, space.p
        V = []
        for d in range(n):
            spans_pts, table = tabulate_1d(space.kvs[d].knots, p, axes[d], nu)
            se = int(espans[d])
            spans_pts = spans_pts.reshape(se, g)
            expect = np.arange(se) // ratio + p
            if not np.all(spans_pts == expect[:, None]):
                raise AssertionError("quadrature points landed in unexpected spans")
            V.append(np.ascontiguousarray(table.reshape(se, g, nu + 1, p + 1)))
        L = (p + 1) ** n
        Iloc = np.stack(np.unravel_index(np.arange(L), (p + 1,) * n, order="F"), axis=-1)
        strides = np.cumprod((1,) + space.shape[:-1]).astype(np.int64)
        b = cls(space=space, weights=weights, g=g, nu=nu, ratio=ratio, V=V, Iloc=Iloc, strides=strides)
        if not weights.is_unit:
            Es = [direction_matrices(space.kvs[d], axes[d], nu) for d in range(n)]
            wgrid = weights.weights.reshape(space.shape, order="F")[..., None]
            W = _tensor_contract(Es, (0,) * n, wgrid)[..., 0]
            b.Wb = _grid_to_elements(W, espans, g)
            if nu >= 1:
                dW = np.empty(W.shape + (n,))
                for a in range(n):
                    sel = tuple(1 if d == a else 0 for d in range(n))
                    dW[..., a] = _tensor_contract(Es, sel, wgrid)[..., 0]
                b.dWb = _grid_to_elements(dW, espans, g)
            if nu >= 2:
                d2W = np.empty(W.shape + (n, n))
                for a in range(n):
                    for c in range(a, n):
                        sel = tuple((1 if d == a else 0) + (1 if d == c else 0) for d in range(n))
                        val = _tensor_contract(Es, sel, wgrid)[..., 0]
                        d2W[..., a, c] = val
                        d2W[..., c, a] = val
                b.d2Wb = _grid_to_elements(d2W, espans, g)
        return b

    def global_cols(self, et: np.ndarray) -> np.ndarray:
        """Flat (colex) basis indices of the L local functions per element."""
        starts = et // self.ratio
        E = starts.shape[0]
        cols = np.zeros((E, self.Iloc.shape[0]), dtype=np.int64)
        for d in range(self.space.n):
            cols += (starts[:, d, None] + self.Iloc[None, :, d]) * self.strides[d]
        return cols

    def _term(self, G, sel):
        n = self.space.n
        E = G[0].shape[0]
        g = self.g
        L = self.L
        if n == 1:
            return np.ascontiguousarray(G[0][:, :, sel[0], :])
        if n == 2:
            return np.einsum(
                "eai,ebj->ebaji", G[0][:, :, sel[0], :], G[1][:, :, sel[1], :], optimize=False
            ).reshape(E, g ** 2, L)
        return np.einsum(
            "eai,ebj,eck->ecbakji",
            G[0][:, :, sel[0], :],
            G[1][:, :, sel[1], :],
            G[2][:, :, sel[2], :],
            optimize=False,
        ).reshape(E, g ** 3, L)

    def local_basis(self, eids: np.ndarray, et: np.ndarray, cols: np.ndarray):
        """Basis values (and requested derivatives) per element/point/function.

        Returns ``(N, dN, d2N)`` with shapes ``(E, Q, L)``, ``(E, Q, L, n)``,
        ``(E, Q, L, n, n)``; the derivative slots are None beyond ``nu``.
        For rational spaces the weight quotient rule is applied pointwise.
        """
        n = self.space.n
        nu = self.nu
        G = [self.V[d][et[:, d]] for d in range(n)]
        B = self._term(G, (0,) * n)
        dB = d2B = None
        if nu >= 1:
            dB = np.empty(B.shape + (n,))
            for a in range(n):
                sel = tuple(1 if d == a else 0 for d in range(n))
                dB[..., a] = self._term(G, sel)
        if nu >= 2:
            d2B = np.empty(B.shape + (n, n))
            for a in range(n):
                for c in range(a, n):
                    sel = tuple((1 if d == a else 0) + (1 if d == c else 0) for d in range(n))
                    val = self._term(G, sel)
                    d2B[..., a, c] = val
                    d2B[..., c, a] = val
        if self.Wb is None:
            return B, dB, d2B

        Wq = self.Wb[eids][..., None]
        wl = self.weights.weights[cols][:, None, :]
        N = wl * B / Wq
        if dB is None:
            return N, None, None
        dWq = self.dWb[eids]
        dN = np.empty_like(dB)
        for a in range(n):
            dN[..., a] = (wl * dB[..., a] - N * dWq[..., a][..., None]) / Wq
        if d2B is None:
            return N, dN, None
        d2Wq = self.d2Wb[eids]
        d2N = np.empty_like(d2B)
        for a in range(n):
            for c in range(n):
                d2N[..., a, c] = (
                    wl * d2B[..., a, c]
                    - dN[..., a] * dWq[..., c][..., None]
                    - dN[..., c] * dWq[..., a][..., None]
                    - N * d2Wq[..., a, c][..., None]
                ) / Wq
        return N, dN, d2N


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _mirror_upper(loc: np.ndarray) -> np.ndarray:
    """Copy the upper local triangle onto the lower one (bit-exact symmetry)."""
    L = loc.shape[1]
    upper = np.arange(L)[:, None] <= np.arange(L)[None, :]
    return np.where(upper[None, :, :], loc, np.swapaxes(loc, 1, 2))


def _local_square(form, binding, eids, et, cols, detb, blocks, wq):
    N, dN, d2N = binding.local_basis(eids, et, cols)
    if form in (FormKind.POISSON, FormKind.STOKES_VELOCITY):
        Kw = blocks["K"][eids] * wq[None, :, None, None]
        S = np.einsum("eqla,eqab->eqlb", dN, Kw, optimize=False)
        loc = np.einsum("eqlb,eqkb->elk", S, dN, optimize=False)
    elif form is FormKind.MASS:
        s = np.sqrt(detb[eids] * wq[None, :])
        Nw = N * s[..., None]
        loc = np.einsum("eql,eqk->elk", Nw, Nw, optimize=False)
    elif form is FormKind.BIHARMONIC:
        detE = detb[eids]
        adjb = blocks["adj"][eids]
        pg = np.einsum("eqla,eqac->eqlc", dN, adjb, optimize=False) / detE[..., None, None]
        T = d2N - np.einsum("eqlc,eqcab->eqlab", pg, blocks["hess"][eids], optimize=False)
        lap = np.einsum("eqlab,eqab->eql", T, blocks["C"][eids], optimize=False)
        lw = lap * np.sqrt(detE * wq[None, :])[..., None]
        loc = np.einsum("eql,eqk->elk", lw, lw, optimize=False)
    else:
        raise ValueError(f"unsupported square form {form}")
    return _mirror_upper(loc)


# ---------------------------------------------------------------------------
# Assembly drivers
# ---------------------------------------------------------------------------

def _geometry_blocks(form, geom, axes, espans, g):
    gdmax = 2 if form is FormKind.BIHARMONIC else 1
    grid = map_grid(geom, axes, max_deriv=gdmax)
    detb = _grid_to_elements(grid.det, espans, g)
    blocks = {}
    if form in (FormKind.POISSON, FormKind.STOKES_VELOCITY, FormKind.STOKES_DIVERGENCE):
        adjg = adjugate(grid.jac)
        if form is FormKind.STOKES_DIVERGENCE:
            blocks["adj"] = _grid_to_elements(adjg, espans, g)
        else:
            Kg = np.einsum("...ab,...cb->...ac", adjg, adjg, optimize=False) / grid.det[..., None, None]
            blocks["K"] = _grid_to_elements(Kg, espans, g)
    elif form is FormKind.BIHARMONIC:
        adjg = adjugate(grid.jac)
        Cg = np.einsum("...ac,...bc->...ab", adjg, adjg, optimize=False) / grid.det[..., None, None] ** 2
        blocks["adj"] = _grid_to_elements(adjg, espans, g)
        blocks["C"] = _grid_to_elements(Cg, espans, g)
        blocks["hess"] = _grid_to_elements(grid.hess, espans, g)
    return detb, blocks, grid


def assemble(form: FormKind, disc: Discretization, rows=None, coefficient: float = 1.0) -> SparseMatrix:
    """Assemble a square Galerkin matrix, fully or for selected rows.

    Parameters
    ----------
    form : FormKind
        One of the square forms (the divergence pairing has its own driver).
    disc : Discretization
        Space, geometry and quadrature order.
    rows : array_like of int, optional
        0-based global row indices. When given, only elements supporting
        those rows are visited and only their triplets are kept; the
        resulting rows match the full assembly bitwise.
    coefficient : float
        Constant multiplier of the integrand (viscosity for the velocity
        stiffness form).
    """
    if form is FormKind.STOKES_DIVERGENCE:
        raise ValueError("use assemble_divergence for the mixed pairing")
    if form is FormKind.BIHARMONIC and disc.p < 2:
        raise ValueError("the fourth-order form needs degree >= 2 for C^1 continuity")
    space = disc.space
    n = space.n
    g = disc.gauss
    espans = disc.spans
    axes, pw = _quad_axes(space, g)
    wq = _tensor_point_weights(pw)
    if coefficient != 1.0 and form not in (FormKind.POISSON, FormKind.STOKES_VELOCITY):
        raise ValueError("coefficient is only supported for the second-order forms")
    detb, blocks, _ = _geometry_blocks(form, disc.geom, axes, espans, g)
    if coefficient != 1.0:
        blocks["K"] = blocks["K"] * coefficient
    binding = _SpaceBinding.build(space, disc.weights, axes, espans, g, _FORM_DERIV[form])

    if rows is None:
        eids = np.arange(int(np.prod(espans)), dtype=np.int64)
        rowmask = None
    else:
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if rows.size and (rows[0] < 0 or rows[-1] >= space.N):
            raise ValueError("row index out of range")
        eids = _elements_for_rows(space, espans, 1, rows)
        rowmask = np.zeros(space.N, dtype=bool)
        rowmask[rows] = True
    et = _element_multi(eids, espans)

    sym = _FORM_SYMMETRIC[form]
    parts_r, parts_c, parts_v = [], [], []
    CH = _chunk_elements(n, space.p, g)
    for s in range(0, eids.size, CH):
        sl = slice(s, s + CH)
        ce, cet = eids[sl], et[sl]
        cols = binding.global_cols(cet)
        loc = _local_square(form, binding, ce, cet, cols, detb, blocks, wq)
        E, L = cols.shape
        cols32 = cols.astype(np.int32)
        rr = np.broadcast_to(cols32[:, :, None], (E, L, L)).ravel()
        cc = np.broadcast_to(cols32[:, None, :], (E, L, L)).ravel()
        vv = loc.ravel()
        if rowmask is not None:
            keep = rowmask[rr]
            rr, cc, vv = rr[keep], cc[keep], vv[keep]
        parts_r.append(rr)
        parts_c.append(cc)
        parts_v.append(vv)

    mat = csr_from_triplets(
        np.concatenate(parts_r) if parts_r else np.empty(0, np.int32),
        np.concatenate(parts_c) if parts_c else np.empty(0, np.int32),
        np.concatenate(parts_v) if parts_v else np.empty(0, float),
        (space.N, space.N),
    )
    return SparseMatrix(mat=mat, symmetric=sym and rows is None, populated_rows=None if rows is None else rows)


def assemble_divergence(stokes: StokesSpaces, rows=None) -> list:
    """Assemble the pressure/velocity divergence pairing, one matrix per component.

    Row ``i`` (a pressure function) and column ``j`` (one scalar velocity
    component) hold the integral of ``q_i`` times the physical ``c``
    derivative of ``v_j``; the geometric factor folds the Jacobian adjugate,
    so no determinant division appears. ``rows`` restricts to pressure rows.
    """
    vel, prs = stokes.velocity, stokes.pressure
    n = stokes.n
    g = vel.gauss
    espans = vel.spans
    axes, pw = _quad_axes(vel.space, g)
    wq = _tensor_point_weights(pw)
    _, blocks, _ = _geometry_blocks(FormKind.STOKES_DIVERGENCE, stokes.geom, axes, espans, g)
    vb = _SpaceBinding.build(vel.space, vel.weights, axes, espans, g, nu=1, ratio=1)
    pb = _SpaceBinding.build(prs.space, prs.weights, axes, espans, g, nu=0, ratio=2)

    if rows is None:
        eids = np.arange(int(np.prod(espans)), dtype=np.int64)
        rowmask = None
    else:
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if rows.size and (rows[0] < 0 or rows[-1] >= prs.space.N):
            raise ValueError("pressure row index out of range")
        eids = _elements_for_rows(prs.space, espans, 2, rows)
        rowmask = np.zeros(prs.space.N, dtype=bool)
        rowmask[rows] = True
    et = _element_multi(eids, espans)

    parts = [([], [], []) for _ in range(n)]
    CH = _chunk_elements(n, vel.space.p, g)
    for s in range(0, eids.size, CH):
        sl = slice(s, s + CH)
        ce, cet = eids[sl], et[sl]
        pcols = pb.global_cols(cet)
        vcols = vb.global_cols(cet)
        Np, _, _ = pb.local_basis(ce, cet, pcols)
        _, dNv, _ = vb.local_basis(ce, cet, vcols)
        adjb = blocks["adj"][ce]
        Pw = Np * wq[None, :, None]
        E, Lp = pcols.shape
        Lv = vcols.shape[1]
        p32 = pcols.astype(np.int32)
        v32 = vcols.astype(np.int32)
        rr = np.broadcast_to(p32[:, :, None], (E, Lp, Lv)).ravel()
        cc = np.broadcast_to(v32[:, None, :], (E, Lp, Lv)).ravel()
        keep = rowmask[rr] if rowmask is not None else None
        for c in range(n):
            t = np.einsum("eqka,eqa->eqk", dNv, adjb[..., :, c], optimize=False)
            loc = np.einsum("eql,eqk->elk", Pw, t, optimize=False)
            vv = loc.ravel()
            if keep is not None:
                parts[c][0].append(rr[keep])
                parts[c][1].append(cc[keep])
                parts[c][2].append(vv[keep])
            else:
                parts[c][0].append(rr)
                parts[c][1].append(cc)
                parts[c][2].append(vv)

    shape = (prs.space.N, vel.space.N)
    out = []
    for c in range(n):
        mat = csr_from_triplets(
            np.concatenate(parts[c][0]) if parts[c][0] else np.empty(0, np.int32),
            np.concatenate(parts[c][1]) if parts[c][1] else np.empty(0, np.int32),
            np.concatenate(parts[c][2]) if parts[c][2] else np.empty(0, float),
            shape,
        )
        out.append(SparseMatrix(mat=mat, symmetric=False, populated_rows=None if rows is None else rows))
    return out


def assemble_load(disc: Discretization, f) -> np.ndarray:
    """Assemble the load vector for a callable ``f`` of physical coordinates.

    ``f`` receives an array of shape ``(..., n)`` and must return ``(...)``.
    """
    space = disc.space
    n = space.n
    g = disc.gauss
    espans = disc.spans
    axes, pw = _quad_axes(space, g)
    wq = _tensor_point_weights(pw)
    grid = map_grid(disc.geom, axes, max_deriv=1)
    detb = _grid_to_elements(grid.det, espans, g)
    phib = _grid_to_elements(grid.phi, espans, g)
    fb = np.asarray(f(phib), dtype=float)
    if fb.shape != detb.shape:
        raise ValueError("load callable returned a mismatched shape")
    binding = _SpaceBinding.build(space, disc.weights, axes, espans, g, nu=0)

    vec = np.zeros(space.N)
    eids = np.arange(int(np.prod(espans)), dtype=np.int64)
    et = _element_multi(eids, espans)
    CH = _chunk_elements(n, space.p, g)
    for s in range(0, eids.size, CH):
        sl = slice(s, s + CH)
        ce, cet = eids[sl], et[sl]
        cols = binding.global_cols(cet)
        N, _, _ = binding.local_basis(ce, cet, cols)
        w = fb[ce] * detb[ce] * wq[None, :]
        lv = np.einsum("eq,eql->el", w, N, optimize=False)
        np.add.at(vec, cols.ravel(), lv.ravel())
    return vec


def pressure_mean_vector(stokes: StokesSpaces) -> np.ndarray:
    """Row sums of the pressure mass matrix (weights of the zero-mean constraint)."""
    return assemble(FormKind.MASS, stokes.pressure).row_sums()


# ---------------------------------------------------------------------------
# Dirichlet boundary handling
# ---------------------------------------------------------------------------

def dirichlet_dofs(space: TensorSpace, faces=None) -> np.ndarray:
    """Sorted flat indices of boundary basis functions.

    ``faces`` is an iterable of ``(direction, side)`` with side 0 or 1;
    None selects the whole boundary.
    """
    n = space.n
    if faces is None:
        faces = [(d, s) for d in range(n) for s in (0, 1)]
    mask = np.zeros(space.shape, dtype=bool, order="F")
    for d, side in faces:
        idx = [slice(None)] * n
        idx[d] = 0 if side == 0 else space.shape[d] - 1
        mask[tuple(idx)] = True
    return np.flatnonzero(mask.ravel(order="F"))


def interior_dofs(space: TensorSpace, faces=None) -> np.ndarray:
    bdr = dirichlet_dofs(space, faces)
    keep = np.ones(space.N, dtype=bool)
    keep[bdr] = False
    return np.flatnonzero(keep)


def interpolate_field(disc: Discretization, u) -> np.ndarray:
    """Coefficients interpolating ``u`` (physical coordinates) at Greville sites.

    Rational spaces are handled through the weighted numerator: the plain
    spline combination of ``coef * weight`` matches ``u * W`` at the sites.
    """
    space = disc.space
    sites = [kv.greville() for kv in space.kvs]
    grid = map_grid(disc.geom, sites, max_deriv=0)
    vals = np.asarray(u(grid.phi), dtype=float)
    if vals.shape != grid.W.shape:
        raise ValueError("field callable returned a mismatched shape")
    coef = tensor_collocate(space.kvs, sites, vals * grid.W)
    return coef.reshape(-1, order="F") / disc.weights.weights


def boundary_values(disc: Discretization, u, faces=None):
    """Dirichlet dof indices and coefficient values approximating trace ``u``."""
    dofs = dirichlet_dofs(disc.space, faces)
    coef = interpolate_field(disc, u)
    return dofs, coef[dofs]


def evaluate_field(disc: Discretization, coefs, axes) -> np.ndarray:
    """Field values of a coefficient vector on a tensor grid of parameters.

    ``axes`` holds one strictly increasing 1D array per direction; the
    result has the grid shape. Rational spaces evaluate the weighted
    numerator and divide by the weight function.
    """
    space = disc.space
    n = space.n
    coefs = np.asarray(coefs, dtype=float).ravel()
    Es = [direction_matrices(space.kvs[d], np.asarray(axes[d], dtype=float), 0) for d in range(n)]
    w = disc.weights.weights
    cg = (coefs * w).reshape(space.shape, order="F")[..., None]
    num = _tensor_contract(Es, (0,) * n, cg)[..., 0]
    if disc.weights.is_unit:
        return num
    wg = w.reshape(space.shape, order="F")[..., None]
    W = _tensor_contract(Es, (0,) * n, wg)[..., 0]
    return num / W


def quadrature_fields(disc: Discretization, coefs, nu: int = 0, gauss: int | None = None):
    """Physical samples of a coefficient field at element quadrature points.

    Parameters
    ----------
    disc : Discretization
        Space and geometry to sample on.
    coefs : array
        Coefficient vector of the field.
    nu : int
        Highest physical derivative requested: 0 values, 1 adds gradients,
        2 adds Hessians.
    gauss : int, optional
        Points per direction; defaults to the discretization's rule.

    Returns
    -------
    tuple
        ``(x, w, vals, grads, hesses)``: physical points ``(T, n)``,
        quadrature weights already scaled by the Jacobian determinant
        ``(T,)``, values ``(T,)``, physical gradients ``(T, n)`` or None,
        physical Hessians ``(T, n, n)`` or None.
    """
    space = disc.space
    n = space.n
    g = disc.gauss if gauss is None else int(gauss)
    espans = disc.spans
    axes, pw = _quad_axes(space, g)
    wq = _tensor_point_weights(pw)
    coefs = np.asarray(coefs, dtype=float).ravel()

    grid = map_grid(disc.geom, axes, max_deriv=2 if nu >= 2 else 1)
    detb = _grid_to_elements(grid.det, espans, g)
    phib = _grid_to_elements(grid.phi, espans, g)
    adjb = _grid_to_elements(adjugate(grid.jac), espans, g) if nu >= 1 else None
    hessb = _grid_to_elements(grid.hess, espans, g) if nu >= 2 else None
    binding = _SpaceBinding.build(space, disc.weights, axes, espans, g, nu)

    ne = int(np.prod(espans))
    eids = np.arange(ne, dtype=np.int64)
    et = _element_multi(eids, espans)
    Q = g ** n
    x = np.empty((ne * Q, n))
    w = np.empty(ne * Q)
    vals = np.empty(ne * Q)
    grads = np.empty((ne * Q, n)) if nu >= 1 else None
    hesses = np.empty((ne * Q, n, n)) if nu >= 2 else None
    CH = _chunk_elements(n, space.p, g)
    for s in range(0, ne, CH):
        sl = slice(s, s + CH)
        ce, cet = eids[sl], et[sl]
        cols = binding.global_cols(cet)
        N, dN, d2N = binding.local_basis(ce, cet, cols)
        uloc = coefs[cols]
        out = slice(s * Q, (s + ce.size) * Q)
        x[out] = phib[ce].reshape(-1, n)
        w[out] = (wq[None, :] * detb[ce]).ravel()
        vals[out] = np.einsum("eql,el->eq", N, uloc, optimize=False).ravel()
        if nu >= 1:
            dpar = np.einsum("eqla,el->eqa", dN, uloc, optimize=False)
            gph = np.einsum("eqa,eqac->eqc", dpar, adjb[ce], optimize=False) / detb[ce][..., None]
            grads[out] = gph.reshape(-1, n)
        if nu >= 2:
            d2par = np.einsum("eqlab,el->eqab", d2N, uloc, optimize=False)
            T = d2par - np.einsum("eqc,eqcab->eqab", gph, hessb[ce], optimize=False)
            Hph = np.einsum("eqac,eqab,eqbd->eqcd", adjb[ce], T, adjb[ce], optimize=False)
            Hph /= detb[ce][..., None, None] ** 2
            hesses[out] = Hph.reshape(-1, n, n)
    return x, w, vals, grads, hesses


@dataclass
class ReducedSystem:
    """Square system restricted to unconstrained dofs.

    ``expand`` scatters an interior solution back to the full coefficient
    vector, reinstating the fixed boundary values.
    """

    A: sp.csr_matrix
    b: np.ndarray
    interior: np.ndarray
    dofs: np.ndarray
    values: np.ndarray
    n_full: int
    symmetric: bool = False

    def expand(self, x: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n_full)
        full[self.interior] = x
        full[self.dofs] = self.values
        return full


def apply_dirichlet(A: SparseMatrix, b, dofs, values) -> ReducedSystem:
    """Eliminate fixed dofs: restrict to the interior block, lift the data."""
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    N = A.shape[0]
    keep = np.ones(N, dtype=bool)
    keep[dofs] = False
    interior = np.flatnonzero(keep)
    M = A.mat.tocsr()
    A_II = M[interior][:, interior].tocsr()
    b = np.zeros(N) if b is None else np.asarray(b, dtype=float)
    b_I = b[interior] - M[interior][:, dofs] @ values
    return ReducedSystem(
        A=A_II, b=b_I, interior=interior, dofs=dofs, values=values, n_full=N, symmetric=A.symmetric
    )
