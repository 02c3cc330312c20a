"""Surrogate matrix assembly by interpolation of stencil functions.

Deep in the patch interior, the matrix entry coupling two interior basis
translates depends smoothly on the position of the row function and on the
integer offset between the two functions. This module samples those stencil
functions on a coarse lattice of row midpoints, interpolates them with
tensor-product splines of order ``q``, and fills the remaining interior
entries by evaluating the interpolants. Rows near the boundary, and the
sampled rows themselves, always come from standard Gauss assembly, so the
surrogate matrix agrees with the conventional one there bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .bspline import UniformOpenKnotVector, collocation_solve, evaluation_matrix
from .assembly import (
    Discretization,
    FormKind,
    SparseMatrix,
    StokesSpaces,
    _elements_for_rows,
    assemble,
    assemble_divergence,
    csr_from_triplets,
    form_is_symmetric,
)


class SurrogateMode(Enum):
    """How interpolated entries are placed into the matrix."""

    GENERAL = "general"
    SYMMETRIC = "symmetric"
    SYMMETRIC_KERNEL_PRESERVING = "symmetric_kernel_preserving"


# Modes that preserve the constant function in the kernel only make sense
# for forms whose exact matrix annihilates constants.
_KERNEL_PRESERVING_FORMS = (FormKind.POISSON, FormKind.BIHARMONIC)

DEFAULT_MODE = {
    FormKind.POISSON: SurrogateMode.SYMMETRIC_KERNEL_PRESERVING,
    FormKind.BIHARMONIC: SurrogateMode.SYMMETRIC_KERNEL_PRESERVING,
    FormKind.MASS: SurrogateMode.SYMMETRIC,
    FormKind.STOKES_VELOCITY: SurrogateMode.SYMMETRIC,
    FormKind.STOKES_DIVERGENCE: SurrogateMode.GENERAL,
}


# ---------------------------------------------------------------------------
# Offsets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OffsetSet:
    """Integer index offsets between coupled basis functions, colex ordered.

    For equal trial and test spaces the offsets are ``[-p, p]^n`` in units
    of the mesh size h. The mixed pressure/velocity variant stores velocity
    index shifts relative to the doubled pressure index; the geometric
    offsets then live on the half-step velocity grid.
    """

    p: int
    n: int
    shifts: np.ndarray
    mixed: bool = False

    @property
    def count(self) -> int:
        return self.shifts.shape[0]

    @property
    def center(self) -> int:
        """Position of the zero offset (equal-space sets only)."""
        if self.mixed:
            raise ValueError("mixed offset sets have no zero offset")
        return (self.count - 1) // 2

    def canonical_half(self) -> np.ndarray:
        """Positions forming the canonical half (zero plus one of each +/- pair).

        An offset is canonical when its last nonzero component is positive,
        which for colex ordering is exactly the upper half of the list.
        """
        if self.mixed:
            raise ValueError("the mixed offset set is not closed under negation")
        return np.arange(self.center, self.count)

    def negated_position(self, pos: int) -> int:
        if self.mixed:
            raise ValueError("the mixed offset set is not closed under negation")
        return self.count - 1 - pos


def build_offsets(p: int, n: int, mixed: bool = False) -> OffsetSet:
    """Offsets of all basis pairs with overlapping support.

    ``mixed`` builds the pressure-row/velocity-column set for the subgrid
    Stokes pair with pressure degree ``p``: shifts ``k`` mean the velocity
    column index is ``2 i + k`` for pressure row index ``i`` per direction,
    enumerated over the support-overlap range ``[-2p, p+2]``.
    """
    if p < 1:
        raise ValueError("degree must be at least 1")
    if n not in (1, 2, 3):
        raise ValueError("supported dimensions: 1, 2, 3")
    if mixed:
        rng = np.arange(-2 * p, p + 3, dtype=np.int64)
    else:
        rng = np.arange(-p, p + 1, dtype=np.int64)
    k = rng.size
    grid = np.unravel_index(np.arange(k ** n), (k,) * n, order="F")
    shifts = np.stack([rng[g] for g in grid], axis=-1)
    return OffsetSet(p=p, n=n, shifts=shifts, mixed=mixed)


# ---------------------------------------------------------------------------
# Interior sampling domain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TildeDomain:
    """Box of row midpoints far enough from the boundary to be stencil-smooth.

    Per direction the exact bounds are ``(3p+1)/(2(m-p))`` from either end;
    a midpoint lies inside iff its 0-based basis index is in
    ``[2p, m - 2p - 1]``. The box is empty when ``m <= 4p``.
    """

    p: int
    ms: tuple
    bounds: tuple

    @property
    def n(self) -> int:
        return len(self.ms)

    @property
    def is_empty(self) -> bool:
        return any(lo > hi for lo, hi in self.bounds)

    def index_range(self, d: int) -> tuple:
        """0-based inclusive range of in-box basis indices along ``d``."""
        return (2 * self.p, self.ms[d] - 2 * self.p - 1)

    def index_count(self, d: int) -> int:
        lo, hi = self.index_range(d)
        return max(0, hi - lo + 1)

    def contains_index(self, multi0) -> bool:
        multi0 = np.atleast_1d(np.asarray(multi0))
        return all(
            self.index_range(d)[0] <= int(multi0[d]) <= self.index_range(d)[1]
            for d in range(self.n)
        )

    def offset_domain(self, shift) -> tuple:
        """Exact per-direction bounds of the domain of one offset's stencil.

        The stencil for offset ``delta`` is defined where both the row
        midpoint and the shifted midpoint stay in the convex hull of all
        midpoints, so each direction loses ``|delta_d|`` of slack on one side.
        """
        out = []
        for d in range(self.n):
            h = Fraction(1, self.ms[d] - self.p)
            lo0 = Fraction(self.p + 1, 2) * h
            hi0 = 1 - lo0
            s = int(shift[d]) * h
            out.append((max(lo0, lo0 - s), min(hi0, hi0 - s)))
        return tuple(out)


def tilde_domain(p: int, ms) -> TildeDomain:
    """Interior sampling box for degree ``p`` and per-direction dimensions ``ms``."""
    if np.isscalar(ms):
        ms = (int(ms),)
    ms = tuple(int(m) for m in ms)
    bounds = []
    for m in ms:
        lo = Fraction(3 * p + 1, 2 * (m - p))
        bounds.append((lo, 1 - lo))
    return TildeDomain(p=p, ms=ms, bounds=tuple(bounds))


# ---------------------------------------------------------------------------
# Sampling lattice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingLattice:
    """Every M-th in-box cardinal midpoint per direction, last index forced.

    ``indices`` are 0-based basis indices; ``sites`` the midpoint
    coordinates. The lattice of sampled rows is the tensor product.
    """

    M: int
    indices: tuple
    sites: tuple
    h: float

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def H(self) -> float:
        return self.M * self.h

    @property
    def shape(self) -> tuple:
        return tuple(ix.size for ix in self.indices)

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))

    def indices_one_based(self, d: int) -> np.ndarray:
        return self.indices[d] + 1


def _midpoints(kv: UniformOpenKnotVector, idx0: np.ndarray) -> np.ndarray:
    h = kv.h_exact
    return np.array([float(Fraction(2 * int(i) + 1 - kv.p, 2) * h) for i in idx0])


def build_sampling_lattice(kvs, M: int, tilde: TildeDomain | None = None) -> SamplingLattice:
    """Per-direction sampled indices: first in-box index, stride M, last appended."""
    if M < 1:
        raise ValueError("sampling parameter M must be at least 1")
    p = kvs[0].p
    if tilde is None:
        tilde = tilde_domain(p, tuple(kv.m for kv in kvs))
    if tilde.is_empty:
        raise ValueError("interior sampling box is empty; no lattice exists")
    indices, sites = [], []
    for d, kv in enumerate(kvs):
        lo, hi = tilde.index_range(d)
        idx = np.arange(lo, hi + 1, M, dtype=np.int64)
        if idx[-1] != hi:
            idx = np.append(idx, hi)
        indices.append(idx)
        sites.append(_midpoints(kv, idx))
    return SamplingLattice(M=M, indices=tuple(indices), sites=tuple(sites), h=kvs[0].h)


# ---------------------------------------------------------------------------
# Sampling strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantSampling:
    """Fixed sampling parameter M."""

    M: int


@dataclass(frozen=True)
class MeshDependentSampling:
    """M(h) = max(1, floor(c * h^((p - q + beta) / (q + 1))))."""

    c: float
    beta: float = 0.5


def mesh_dependent_M(strategy, h: float, p: int, q: int) -> int:
    """Evaluate a sampling strategy at mesh size ``h``."""
    if isinstance(strategy, ConstantSampling):
        if strategy.M < 1:
            raise ValueError("sampling parameter M must be at least 1")
        return int(strategy.M)
    if isinstance(strategy, MeshDependentSampling):
        if strategy.c < 0 or strategy.beta < 0:
            raise ValueError("strategy constants must be nonnegative")
        if q <= p:
            raise ValueError("mesh-dependent sampling requires q > p")
        expo = (p - q + strategy.beta) / (q + 1)
        return max(1, int(np.floor(strategy.c * h ** expo)))
    raise TypeError(f"unknown sampling strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Stencil extraction
# ---------------------------------------------------------------------------

@dataclass
class StencilTable:
    """Sampled stencil values, one grid of lattice values per offset.

    ``values[o]`` holds entries ``A[i, j]`` over the lattice rows ``i``, with
    column ``j`` at offset ``o``; ``present[o]`` marks which lattice points
    carry a value (a point is absent when the shifted column leaves the
    basis index range, which cannot happen for equal spaces but guards the
    mixed variant).
    """

    offsets: OffsetSet
    lattice: SamplingLattice
    values: np.ndarray
    present: np.ndarray


def _offset_positions(offsets: OffsetSet, col_shape) -> None:
    """Assert the colex offset order equals the sorted CSR column order.

    Interior rows carry the complete overlap pattern; because the flat
    strides dominate the per-direction shift ranges, ascending flat column
    equals ascending colex rank, so offset ``o`` sits at row position ``o``.
    """
    strides = np.cumprod((1,) + tuple(col_shape[:-1]))
    rel = offsets.shifts @ strides
    if not np.all(np.diff(rel) > 0):
        raise AssertionError("offset ordering is not column-sorted")


def _row_pattern_check(mat, rows_flat, cols_flat, count):
    """Assert the selected rows hold exactly the expected sorted pattern."""
    indptr = mat.indptr
    counts = indptr[rows_flat + 1] - indptr[rows_flat]
    if not np.all(counts == count):
        raise ValueError("a requested row is not assembled with its full pattern")
    take = indptr[rows_flat][:, None] + np.arange(count)[None, :]
    if not np.array_equal(mat.indices[take], cols_flat):
        raise AssertionError("assembled row pattern does not match the offset set")


def extract_stencil_values(
    A: SparseMatrix,
    lattice: SamplingLattice,
    offsets: OffsetSet,
    row_shape,
    col_shape=None,
    col_ratio: int = 1,
) -> StencilTable:
    """Read sampled stencil values out of assembled rows, bit-exact.

    ``A`` must contain every lattice row (assembled by quadrature).
    ``row_shape``/``col_shape`` are the basis grid dimensions of the row
    and column spaces; ``col_ratio`` is 2 for the mixed pressure/velocity
    pairing (column index ``col_ratio * i + shift``).
    """
    if col_shape is None:
        col_shape = row_shape
    n = offsets.n
    lat_shape = lattice.shape
    grids = np.meshgrid(*lattice.indices, indexing="ij")
    multi = np.stack([g.ravel(order="F") for g in grids], axis=-1)
    row_strides = np.cumprod((1,) + tuple(row_shape[:-1]))
    rows_flat = multi @ row_strides

    col_strides = np.cumprod((1,) + tuple(col_shape[:-1]))
    base = (col_ratio * multi) @ col_strides
    cols_flat = base[:, None] + (offsets.shifts @ col_strides)[None, :]

    col_multi = col_ratio * multi[:, None, :] + offsets.shifts[None, :, :]
    present = np.ones(col_multi.shape[:2], dtype=bool)
    for d in range(n):
        present &= (col_multi[:, :, d] >= 0) & (col_multi[:, :, d] < col_shape[d])
    if not np.all(present):
        raise NotImplementedError("lattice points with out-of-range columns are not supported")

    _offset_positions(offsets, col_shape)
    _row_pattern_check(A.mat, rows_flat, cols_flat, offsets.count)
    vals = A.mat.data[A.mat.indptr[rows_flat][:, None] + np.arange(offsets.count)[None, :]]

    values = np.empty((offsets.count,) + lat_shape)
    pres = np.ones((offsets.count,) + lat_shape, dtype=bool)
    for o in range(offsets.count):
        values[o] = vals[:, o].reshape(lat_shape, order="F")
    return StencilTable(offsets=offsets, lattice=lattice, values=values, present=pres)


# ---------------------------------------------------------------------------
# Stencil interpolation
# ---------------------------------------------------------------------------

def _averaging_knots(sites: np.ndarray, q: int) -> np.ndarray:
    """Open knot vector on [sites[0], sites[-1]] with site-averaged interior knots."""
    k = sites.size
    interior = [np.mean(sites[j + 1 : j + q + 1]) for j in range(k - q - 1)]
    return np.concatenate([np.full(q + 1, sites[0]), interior, np.full(q + 1, sites[-1])])


@dataclass
class SurrogateStencil:
    """Per-offset tensor spline interpolants of the sampled stencil values.

    Each direction interpolates at the lattice sites with splines of degree
    ``q_dirs[d]`` (the requested order lowered where the lattice is too
    small; a single-site direction degenerates to a constant).
    """

    offsets: OffsetSet
    lattice: SamplingLattice
    q: int
    q_dirs: tuple
    knots: tuple
    coefs: np.ndarray
    lowered: bool

    def evaluate_axes(self, axes) -> np.ndarray:
        """Evaluate all interpolants on a tensor grid; shape (offsets, G1, ..., Gn)."""
        out = self.coefs
        for d in range(self.lattice.n):
            pts = np.asarray(axes[d], dtype=float)
            if self.knots[d] is None:
                E = np.ones((pts.size, 1))
            else:
                E = evaluation_matrix(self.knots[d], self.q_dirs[d], pts)
            moved = np.moveaxis(out, 1 + d, 1)
            rest = moved.shape[2:]
            flat = moved.reshape(moved.shape[0], moved.shape[1], -1)
            res = np.einsum("xi,pir->pxr", E, flat, optimize=False)
            out = np.moveaxis(res.reshape((out.shape[0], pts.size) + rest), 1, 1 + d)
        return out

    def evaluate_lattice(self) -> np.ndarray:
        return self.evaluate_axes(self.lattice.sites)


def fit_stencil_interpolant(table: StencilTable, q: int) -> SurrogateStencil:
    """Interpolate each offset's samples with a tensor spline of order ``q``.

    The per-direction degree drops to ``len(sites) - 1`` when the lattice
    is too small for ``q``; a single site yields a constant extension.
    Interpolation is exact at the sites by construction (banded collocation
    at the sites themselves).
    """
    if q < 1:
        raise ValueError("interpolation order must be at least 1")
    lat = table.lattice
    n = lat.n
    q_dirs, knots = [], []
    lowered = False
    for d in range(n):
        sites = lat.sites[d]
        qd = min(q, sites.size - 1)
        if qd < q:
            lowered = True
        q_dirs.append(qd)
        knots.append(_averaging_knots(sites, qd) if qd >= 1 else None)
    coef = np.array(table.values, dtype=float, copy=True)
    for d in range(n):
        if q_dirs[d] < 1:
            continue
        sites = lat.sites[d]
        moved = np.moveaxis(coef, 1 + d, 1)
        rest = moved.shape[2:]
        flat = moved.reshape(-1, sites.size, int(np.prod(rest, dtype=np.int64)))
        sol = np.empty_like(flat)
        for o in range(flat.shape[0]):
            sol[o] = collocation_solve(knots[d], q_dirs[d], sites, flat[o])
        coef = np.moveaxis(sol.reshape(moved.shape), 1, 1 + d)
    return SurrogateStencil(
        offsets=table.offsets,
        lattice=lat,
        q=q,
        q_dirs=tuple(q_dirs),
        knots=tuple(knots),
        coefs=coef,
        lowered=lowered,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_CSV_HEADER = "N,p,q,M,H,quad_entries,interp_entries,quad_fraction,active_elements,assembly_seconds"


@dataclass
class AssemblyReport:
    """What the surrogate assembly did and what it cost."""

    N: int
    p: int
    q: int
    M: int
    H: float
    quad_entries: int
    interp_entries: int
    quad_fraction: float
    active_elements: int
    assembly_seconds: float
    flags: list = field(default_factory=list)

    def csv_row(self) -> str:
        return (
            f"{self.N},{self.p},{self.q},{self.M},{self.H!r},"
            f"{self.quad_entries},{self.interp_entries},{self.quad_fraction!r},"
            f"{self.active_elements},{self.assembly_seconds!r}"
        )


# ---------------------------------------------------------------------------
# Row classification
# ---------------------------------------------------------------------------

def _direction_masks(tilde: TildeDomain, lattice: SamplingLattice | None):
    """Per-direction boolean arrays: inside the box / sampled."""
    inb, smp = [], []
    for d in range(tilde.n):
        m = tilde.ms[d]
        lo, hi = tilde.index_range(d)
        a = np.zeros(m, dtype=bool)
        a[lo : hi + 1] = True
        inb.append(a)
        s = np.zeros(m, dtype=bool)
        if lattice is not None:
            s[lattice.indices[d]] = True
        smp.append(s)
    return inb, smp


def _flat_mask(dir_masks) -> np.ndarray:
    """Tensor AND of per-direction masks, flattened colex (first fastest)."""
    grids = np.meshgrid(*dir_masks, indexing="ij")
    acc = grids[0]
    for g in grids[1:]:
        acc = acc & g
    return acc.ravel(order="F")


# ---------------------------------------------------------------------------
# Surrogate assembly: square forms
# ---------------------------------------------------------------------------

def build_surrogate_matrix(
    form: FormKind,
    disc: Discretization,
    strategy=None,
    q: int = 3,
    mode: SurrogateMode | None = None,
    coefficient: float = 1.0,
):
    """Assemble a square form's matrix with interpolated interior entries.

    Returns ``(SparseMatrix, AssemblyReport)``. Rows outside the interior
    box and sampled rows are Gauss-assembled (bit-identical to the
    conventional matrix); remaining interior entries are interpolant
    evaluations placed according to ``mode``. With ``M = 1`` every interior
    row is sampled and the result equals the full assembly bitwise. An
    empty interior box degrades to full assembly with a report flag.
    """
    if form is FormKind.STOKES_DIVERGENCE:
        raise ValueError("use build_surrogate_divergence for the mixed pairing")
    mode = DEFAULT_MODE[form] if mode is None else mode
    if mode is SurrogateMode.SYMMETRIC_KERNEL_PRESERVING and form not in _KERNEL_PRESERVING_FORMS:
        raise ValueError(f"kernel-preserving mode is not defined for {form.value}")
    if strategy is None:
        strategy = ConstantSampling(1)
    t0 = time.perf_counter()
    space = disc.space
    n, p = space.n, space.p
    tilde = tilde_domain(p, space.shape)
    M = mesh_dependent_M(strategy, space.kvs[0].h, p, q)

    if tilde.is_empty:
        A = assemble(form, disc, coefficient=coefficient)
        dt = time.perf_counter() - t0
        total = int(np.prod(disc.spans))
        rep = AssemblyReport(
            N=space.N, p=p, q=q, M=M, H=M * space.kvs[0].h,
            quad_entries=A.nnz, interp_entries=0, quad_fraction=1.0,
            active_elements=total, assembly_seconds=dt,
            flags=["surrogate=disabled"],
        )
        return A, rep

    lattice = build_sampling_lattice(space.kvs, M, tilde)
    offsets = build_offsets(p, n)
    inb_d, smp_d = _direction_masks(tilde, lattice)
    in_flat = _flat_mask(inb_d)
    samp_flat = _flat_mask(smp_d)
    quad_rows = np.flatnonzero(~in_flat | samp_flat)
    interp_rows = np.flatnonzero(in_flat & ~samp_flat)

    Aq = assemble(form, disc, rows=quad_rows, coefficient=coefficient)
    active = _elements_for_rows(space, disc.spans, 1, quad_rows).size

    flags = []
    nI = interp_rows.size
    if nI == 0:
        mat = SparseMatrix(
            mat=Aq.mat, symmetric=form_is_symmetric(form),
            populated_rows=None,
        )
        dt = time.perf_counter() - t0
        rep = AssemblyReport(
            N=space.N, p=p, q=q, M=M, H=lattice.H,
            quad_entries=Aq.nnz, interp_entries=0, quad_fraction=1.0,
            active_elements=active, assembly_seconds=dt, flags=flags,
        )
        return mat, rep

    table = extract_stencil_values(Aq, lattice, offsets, space.shape)
    stencil = fit_stencil_interpolant(table, q)
    if stencil.lowered:
        flags.append("interpolation-order-lowered")

    # interpolants evaluated on the grid of all in-box midpoints
    box_axes = [_midpoints(space.kvs[d], np.arange(*_incl(tilde.index_range(d)))) for d in range(n)]
    V = stencil.evaluate_axes(box_axes)
    VF = np.stack([V[o].ravel(order="F") for o in range(offsets.count)])
    box_shape = tuple(tilde.index_count(d) for d in range(n))
    box_strides = np.cumprod((1,) + box_shape[:-1])

    I_multi = np.stack(np.unravel_index(interp_rows, space.shape, order="F"), axis=-1)
    I_box = (I_multi - 2 * p) @ box_strides
    strides = np.cumprod((1,) + space.shape[:-1])

    P = offsets.count
    center = offsets.center
    canonical = offsets.canonical_half()
    indptr, data, indices = Aq.mat.indptr, Aq.mat.data, Aq.mat.indices

    rows_out = np.empty(nI * P, dtype=np.int64)
    cols_out = np.empty(nI * P, dtype=np.int64)
    vals_out = np.empty(nI * P)
    offdiag_interp = np.zeros(nI, dtype=np.int64)
    n_interp_entries = 0

    for o in range(P):
        sh = offsets.shifts[o]
        rel = int(sh @ strides)
        j_flat = interp_rows + rel
        j_multi = I_multi + sh[None, :]
        jin = np.ones(nI, dtype=bool)
        jsmp = np.ones(nI, dtype=bool)
        for d in range(n):
            jd = j_multi[:, d]
            jin &= inb_d[d][jd]
            jsmp &= smp_d[d][jd]
        j_interp = jin & ~jsmp

        vals = np.empty(nI)
        idxT = np.flatnonzero(~j_interp)
        if idxT.size:
            pos = indptr[j_flat[idxT]] + (P - 1 - o)
            if not np.array_equal(indices[pos], interp_rows[idxT].astype(indices.dtype)):
                raise AssertionError("transposed quadrature entry not at expected position")
            vals[idxT] = data[pos]
        idxI = np.flatnonzero(j_interp)
        if idxI.size:
            if mode is SurrogateMode.GENERAL or o in canonical:
                vals[idxI] = VF[o, I_box[idxI]]
            else:
                j_box = (j_multi[idxI] - 2 * p) @ box_strides
                vals[idxI] = VF[P - 1 - o, j_box]
            if o != center:
                offdiag_interp[idxI] += 1
            n_interp_entries += idxI.size

        sl = slice(o * nI, (o + 1) * nI)
        rows_out[sl] = interp_rows
        cols_out[sl] = j_flat
        vals_out[sl] = vals

    Imat = csr_from_triplets(rows_out, cols_out, vals_out, (space.N, space.N))
    merged = (Aq.mat + Imat).tocsr()
    merged.sort_indices()

    if mode is SurrogateMode.SYMMETRIC_KERNEL_PRESERVING:
        reset = interp_rows[offdiag_interp > 0]
        if reset.size:
            take = merged.indptr[reset][:, None] + np.arange(P)[None, :]
            rowvals = merged.data[take]
            total = rowvals.sum(axis=1)
            diag = rowvals[:, center]
            merged.data[merged.indptr[reset] + center] = diag - total

    dt = time.perf_counter() - t0
    n_quad_entries = int(Aq.nnz + (nI * P - n_interp_entries))
    rep = AssemblyReport(
        N=space.N, p=p, q=q, M=M, H=lattice.H,
        quad_entries=n_quad_entries, interp_entries=int(n_interp_entries),
        quad_fraction=n_quad_entries / (n_quad_entries + n_interp_entries),
        active_elements=int(active), assembly_seconds=dt, flags=flags,
    )
    sym = mode in (SurrogateMode.SYMMETRIC, SurrogateMode.SYMMETRIC_KERNEL_PRESERVING)
    return SparseMatrix(mat=merged, symmetric=sym), rep


def _incl(rng):
    return rng[0], rng[1] + 1


# ---------------------------------------------------------------------------
# Surrogate assembly: mixed divergence pairing
# ---------------------------------------------------------------------------

def build_surrogate_divergence(
    stokes: StokesSpaces,
    strategy=None,
    q: int = 3,
    mode: SurrogateMode | None = None,
):
    """Surrogate assembly of the divergence pairing, one matrix per component.

    Only the general placement applies (the matrix is rectangular). A
    pressure row is interpolated when every velocity column it touches has
    its midpoint inside the velocity interior box; that shrinks the
    interpolated row range by one pressure index on each side relative to
    the pressure box. Returns ``(list of SparseMatrix, AssemblyReport)``.
    """
    mode = SurrogateMode.GENERAL if mode is None else mode
    if mode is not SurrogateMode.GENERAL:
        raise ValueError("the divergence pairing only supports the general mode")
    if strategy is None:
        strategy = ConstantSampling(1)
    t0 = time.perf_counter()
    prs, vel = stokes.pressure, stokes.velocity
    n = stokes.n
    pp = prs.p
    tilde = tilde_domain(pp, prs.space.shape)
    M = mesh_dependent_M(strategy, prs.space.kvs[0].h, pp, q)

    def _full():
        D = assemble_divergence(stokes)
        dt = time.perf_counter() - t0
        total = int(np.prod(vel.spans))
        nnz = sum(Dc.nnz for Dc in D)
        rep = AssemblyReport(
            N=prs.space.N, p=pp, q=q, M=M, H=M * prs.space.kvs[0].h,
            quad_entries=nnz, interp_entries=0, quad_fraction=1.0,
            active_elements=total, assembly_seconds=dt,
            flags=["surrogate=disabled"],
        )
        return D, rep

    if tilde.is_empty:
        return _full()

    lattice = build_sampling_lattice(prs.space.kvs, M, tilde)
    offsets = build_offsets(pp, n, mixed=True)

    # a pressure row is interpolable when all its velocity columns stay in
    # the velocity box: one pressure index of margin inside the pressure box
    inb_d, smp_d = _direction_masks(tilde, lattice)
    core_d = []
    for d in range(n):
        m = prs.space.shape[d]
        lo, hi = tilde.index_range(d)
        a = np.zeros(m, dtype=bool)
        if lo + 1 <= hi - 1:
            a[lo + 1 : hi] = True
        core_d.append(a)
    core_flat = _flat_mask(core_d)
    samp_flat = _flat_mask(smp_d)
    quad_rows = np.flatnonzero(~core_flat | samp_flat)
    interp_rows = np.flatnonzero(core_flat & ~samp_flat)

    Dq = assemble_divergence(stokes, rows=quad_rows)
    active = _elements_for_rows(prs.space, vel.spans, 2, quad_rows).size

    nI = interp_rows.size
    if nI == 0:
        dt = time.perf_counter() - t0
        nnz = sum(Dc.nnz for Dc in Dq)
        rep = AssemblyReport(
            N=prs.space.N, p=pp, q=q, M=M, H=lattice.H,
            quad_entries=nnz, interp_entries=0, quad_fraction=1.0,
            active_elements=int(active), assembly_seconds=dt, flags=[],
        )
        return [SparseMatrix(mat=Dc.mat, symmetric=False) for Dc in Dq], rep

    flags = []
    P = offsets.count
    vshape = vel.space.shape
    vstrides = np.cumprod((1,) + vshape[:-1])
    I_multi = np.stack(np.unravel_index(interp_rows, prs.space.shape, order="F"), axis=-1)
    box_axes = [
        _midpoints(prs.space.kvs[d], np.arange(*_incl(tilde.index_range(d)))) for d in range(n)
    ]
    box_shape = tuple(tilde.index_count(d) for d in range(n))
    box_strides = np.cumprod((1,) + box_shape[:-1])
    I_box = (I_multi - 2 * pp) @ box_strides

    out = []
    n_interp_entries = 0
    n_quad_entries = sum(Dc.nnz for Dc in Dq)
    rel = offsets.shifts @ vstrides
    base_cols = (2 * I_multi) @ vstrides
    rows_out = np.repeat(interp_rows, P)
    cols_out = (base_cols[:, None] + rel[None, :]).ravel()
    for c in range(n):
        table = extract_stencil_values(
            Dq[c], lattice, offsets, prs.space.shape, col_shape=vshape, col_ratio=2
        )
        stencil = fit_stencil_interpolant(table, q)
        if stencil.lowered and "interpolation-order-lowered" not in flags:
            flags.append("interpolation-order-lowered")
        V = stencil.evaluate_axes(box_axes)
        VF = np.stack([V[o].ravel(order="F") for o in range(P)])
        vals_out = VF[:, I_box].T.ravel()
        n_interp_entries += vals_out.size
        Imat = csr_from_triplets(rows_out, cols_out, vals_out, (prs.space.N, vel.space.N))
        merged = (Dq[c].mat + Imat).tocsr()
        merged.sort_indices()
        out.append(SparseMatrix(mat=merged, symmetric=False))

    dt = time.perf_counter() - t0
    rep = AssemblyReport(
        N=prs.space.N, p=pp, q=q, M=M, H=lattice.H,
        quad_entries=int(n_quad_entries), interp_entries=int(n_interp_entries),
        quad_fraction=n_quad_entries / (n_quad_entries + n_interp_entries),
        active_elements=int(active), assembly_seconds=dt, flags=flags,
    )
    return out, rep


# ---------------------------------------------------------------------------
# Cost planning (no assembly)
# ---------------------------------------------------------------------------

@dataclass
class SurrogatePlan:
    """Predicted work split for a surrogate assembly, computed without assembling.

    Entry counts are exact: ``quad_fraction`` equals the fraction an actual
    ``build_surrogate_matrix`` call reports for the same discretization.
    """

    N: int
    M: int
    H: float
    quad_rows: int
    interp_rows: int
    quad_entries: int
    interp_entries: int
    active_elements: int
    total_elements: int
    gauss_points_surrogate: int
    gauss_points_full: int

    @property
    def quad_fraction(self) -> float:
        return self.quad_entries / (self.quad_entries + self.interp_entries)

    @property
    def point_fraction(self) -> float:
        return self.gauss_points_surrogate / self.gauss_points_full


def _band_pairs(x: np.ndarray, y: np.ndarray, p: int) -> int:
    """Count pairs (a, b) with a in x, b in y and |a - b| <= p (sorted inputs)."""
    lo = np.searchsorted(y, x - p, side="left")
    hi = np.searchsorted(y, x + p, side="right")
    return int((hi - lo).sum())


def surrogate_plan(disc: Discretization, strategy=None, q: int = 3) -> SurrogatePlan:
    """Count quadrature rows, matrix entries and Gauss points for a build.

    Stored entries pair basis functions whose index distance is at most p in
    every direction, so the total count and the count over interpolated rows
    both factor into per-direction pair counts.  The interpolated set is a
    tensor-product box minus a tensor-product lattice, handled by
    inclusion-exclusion.
    """
    if strategy is None:
        strategy = ConstantSampling(1)
    space = disc.space
    n, p = space.n, space.p
    g = disc.gauss
    total = int(np.prod(disc.spans))
    full_d = [np.arange(m) for m in space.shape]
    total_entries = 1
    for d in range(n):
        total_entries *= _band_pairs(full_d[d], full_d[d], p)
    tilde = tilde_domain(p, space.shape)
    M = mesh_dependent_M(strategy, space.kvs[0].h, p, q)
    if tilde.is_empty:
        return SurrogatePlan(
            N=space.N, M=M, H=M * space.kvs[0].h, quad_rows=space.N, interp_rows=0,
            quad_entries=total_entries, interp_entries=0,
            active_elements=total, total_elements=total,
            gauss_points_surrogate=total * g ** n, gauss_points_full=total * g ** n,
        )
    lattice = build_sampling_lattice(space.kvs, M, tilde)
    box_d = [np.arange(*_incl(tilde.index_range(d))) for d in range(n)]
    lat_d = [np.asarray(lattice.indices[d]) for d in range(n)]
    bb = bl = lb = ll = 1
    for d in range(n):
        bb *= _band_pairs(box_d[d], box_d[d], p)
        bl *= _band_pairs(box_d[d], lat_d[d], p)
        lb *= _band_pairs(lat_d[d], box_d[d], p)
        ll *= _band_pairs(lat_d[d], lat_d[d], p)
    interp_entries = bb - bl - lb + ll
    quad_entries = total_entries - interp_entries
    inb_d, smp_d = _direction_masks(tilde, lattice)
    in_flat = _flat_mask(inb_d)
    samp_flat = _flat_mask(smp_d)
    quad_rows = np.flatnonzero(~in_flat | samp_flat)
    active = _elements_for_rows(space, disc.spans, 1, quad_rows).size
    return SurrogatePlan(
        N=space.N, M=M, H=lattice.H,
        quad_rows=quad_rows.size, interp_rows=space.N - quad_rows.size,
        quad_entries=int(quad_entries), interp_entries=int(interp_entries),
        active_elements=int(active), total_elements=total,
        gauss_points_surrogate=int(active) * g ** n,
        gauss_points_full=total * g ** n,
    )


# ---------------------------------------------------------------------------
# Consistency measurement
# ---------------------------------------------------------------------------

def stencil_consistency_error(
    form: FormKind,
    disc: Discretization,
    q: int,
    M: int,
    midpoints_only: bool = False,
    coefficient: float = 1.0,
) -> float:
    """Sup-norm gap between exact and interpolated stencils over the interior box.

    The exact stencil values are the assembled entries at every in-box
    midpoint (the densest grid on which the stencil is observable); the
    interpolant is fit on the ``M``-subsampled lattice. With
    ``midpoints_only`` the comparison is restricted to midpoints between
    consecutive sampled lattice sites in the central half of the box, where
    spline interpolation of even order shows its extra order of accuracy.
    The restriction matters: the interpolant carries a boundary layer of
    ordinary-order error that decays geometrically per interior cell, so a
    margin proportional to the cell count keeps the measurement clean.
    """
    space = disc.space
    n, p = space.n, space.p
    tilde = tilde_domain(p, space.shape)
    if tilde.is_empty:
        raise ValueError("interior sampling box is empty")
    full = build_sampling_lattice(space.kvs, 1, tilde)
    offsets = build_offsets(p, n)
    inb_d, _ = _direction_masks(tilde, None)
    rows_all = np.flatnonzero(_flat_mask(inb_d))
    A = assemble(form, disc, rows=rows_all, coefficient=coefficient)
    exact = extract_stencil_values(A, full, offsets, space.shape)

    sub = build_sampling_lattice(space.kvs, M, tilde)
    subtab = extract_stencil_values(A, sub, offsets, space.shape)
    stencil = fit_stencil_interpolant(subtab, q)

    if midpoints_only:
        # midpoints between consecutive sampled sites; when the gap between
        # sampled indices is even those are cardinal midpoints themselves,
        # so the exact table provides the truth there with no interpolation
        mid_idx = []
        for d in range(n):
            idx = np.asarray(sub.indices[d])
            gaps = np.diff(idx)
            cells = np.flatnonzero(gaps % 2 == 0)
            drop = (gaps.size + 3) // 4
            cells = cells[(cells >= drop) & (cells < gaps.size - drop)]
            mid_idx.append(idx[cells] + gaps[cells] // 2)
        if any(mi.size == 0 for mi in mid_idx):
            raise ValueError("no even-gap midpoints available for this lattice")
        axes = [_midpoints(space.kvs[d], mid_idx[d]) for d in range(n)]
        sel = tuple(np.ix_(*[mi - 2 * p for mi in mid_idx]))
        truth = exact.values[(slice(None),) + sel]
        approx = stencil.evaluate_axes(axes)
        return float(np.max(np.abs(truth - approx)))

    approx = stencil.evaluate_axes(full.sites)
    return float(np.max(np.abs(exact.values - approx)))
