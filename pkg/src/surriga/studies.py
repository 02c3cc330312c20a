"""Manufactured solutions, error norms and desk-scale study drivers.

Each driver assembles its problem twice per refinement level, once by
full Gauss quadrature and once by the sampled-stencil surrogate, solves
both systems and records relative errors, entry fractions and wall
times.  Results are plain rows of Python dataclasses with CSV writers,
so the command line and the test suite share one code path.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .assembly import (
    FormKind,
    Discretization,
    StokesSpaces,
    SparseMatrix,
    make_discretization,
    stokes_subgrid_spaces,
    assemble,
    assemble_divergence,
    assemble_load,
    apply_dirichlet,
    boundary_values,
    dirichlet_dofs,
    interior_dofs,
    interpolate_field,
    evaluate_field,
    quadrature_fields,
    pressure_mean_vector,
)
from .geometry import GeometryMap, builtin_domain, load_geometry, map_grid
from .solvers import SolveOptions, solve_generalized_eig, solve_spd, solve_stokes
from .surrogate import (
    REPORT_CSV_HEADER,
    AssemblyReport,
    ConstantSampling,
    MeshDependentSampling,
    SurrogateMode,
    build_surrogate_divergence,
    build_surrogate_matrix,
)

DEFAULT_LADDER_2D = (16, 32, 64, 128)
DEFAULT_LADDER_3D = (8, 16, 24)


def resolve_domain(geometry) -> GeometryMap:
    """Accept a map object, a builtin name, or a geometry file path."""
    if isinstance(geometry, GeometryMap):
        return geometry
    name = str(geometry)
    if os.path.exists(name):
        return load_geometry(name)
    return builtin_domain(name)


def default_ladder(n: int) -> tuple:
    return DEFAULT_LADDER_2D if n <= 2 else DEFAULT_LADDER_3D


def fit_rate(errors, hs) -> float:
    """Least-squares slope of log(error) against log(h)."""
    e = np.asarray(errors, dtype=float)
    x = np.asarray(hs, dtype=float)
    if e.size < 2 or np.any(e <= 0.0) or np.any(x <= 0.0):
        raise ValueError("rate estimation needs at least two positive samples")
    return float(np.polyfit(np.log(x), np.log(e), 1)[0])


def rate_last(errors, hs, steps: int = 1) -> float:
    """Convergence rate over the final ``steps`` ladder steps.

    The default slope uses the last two refinement levels; pass a larger
    ``steps`` to smooth over more levels.  Fewer levels use what exists.
    """
    keep = min(steps + 1, len(list(errors)))
    return fit_rate(errors[-keep:], hs[-keep:])


def _map_cells(fn: Callable, cells, threads: int) -> list:
    """Run independent study cells, optionally on a thread pool."""
    cells = list(cells)
    if threads <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(fn, cells))


def _merge_flags(*groups) -> tuple:
    out = []
    for g in groups:
        for f in g:
            if f not in out:
                out.append(f)
    return tuple(out)


def _flags_cell(flags) -> str:
    return ";".join(flags)


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form scalar solution with the load and boundary data it induces.

    Closures receive physical points of shape ``(..., n)``; ``value`` and
    ``load`` return ``(...)``, ``gradient`` returns ``(..., n)`` and
    ``hessian`` (when present) ``(..., n, n)``.  ``boundary`` defaults to
    the trace of ``value``.
    """

    label: str
    value: Callable
    gradient: Callable
    load: Callable
    hessian: Callable | None = None
    boundary: Callable | None = None

    def boundary_data(self) -> Callable:
        return self.value if self.boundary is None else self.boundary


def poisson_sine_case(frequency: int = 1, n: int = 2) -> ManufacturedCase:
    """Product-of-sines solution of the Poisson equation with k pi waves."""
    k = np.pi * float(frequency)

    def value(x):
        return np.prod(np.sin(k * np.asarray(x)), axis=-1)

    def gradient(x):
        x = np.asarray(x)
        s = np.sin(k * x)
        c = np.cos(k * x)
        out = np.empty(x.shape)
        for d in range(x.shape[-1]):
            term = k * c[..., d]
            for e in range(x.shape[-1]):
                if e != d:
                    term = term * s[..., e]
            out[..., d] = term
        return out

    def load(x):
        return n * k ** 2 * value(x)

    label = "low_frequency" if frequency == 1 else "high_frequency"
    return ManufacturedCase(label=label, value=value, gradient=gradient, load=load)


def biharmonic_case() -> ManufacturedCase:
    """Harmonic plate deflection sin(pi x) sinh(pi y); the load vanishes."""
    pi = np.pi

    def value(x):
        x = np.asarray(x)
        return np.sin(pi * x[..., 0]) * np.sinh(pi * x[..., 1])

    def gradient(x):
        x = np.asarray(x)
        s, c = np.sin(pi * x[..., 0]), np.cos(pi * x[..., 0])
        sh, ch = np.sinh(pi * x[..., 1]), np.cosh(pi * x[..., 1])
        return np.stack([pi * c * sh, pi * s * ch], axis=-1)

    def hessian(x):
        x = np.asarray(x)
        s, c = np.sin(pi * x[..., 0]), np.cos(pi * x[..., 0])
        sh, ch = np.sinh(pi * x[..., 1]), np.cosh(pi * x[..., 1])
        mixed = pi ** 2 * c * ch
        diag = pi ** 2 * s * sh
        H = np.empty(x.shape[:-1] + (2, 2))
        H[..., 0, 0] = -diag
        H[..., 0, 1] = mixed
        H[..., 1, 0] = mixed
        H[..., 1, 1] = diag
        return H

    def load(x):
        return np.zeros(np.asarray(x).shape[:-1])

    return ManufacturedCase(
        label="custom", value=value, gradient=gradient, load=load, hessian=hessian
    )


@dataclass(frozen=True)
class StokesCase:
    """Divergence-free velocity pair with pressure and the loads they induce.

    The pressure closure is defined up to a constant; studies align it to
    zero mean over the computational domain by quadrature.
    """

    label: str
    velocity: tuple
    velocity_gradient: tuple
    pressure: Callable
    pressure_gradient: Callable
    load: tuple


def stokes_case() -> StokesCase:
    """Stream-function flow sin(x) sin(y)/(x+1) with pressure y sinh(x)."""

    def u1(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        return np.sin(xx) * np.cos(yy) / (xx + 1.0)

    def u2(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        return -((xx + 1.0) * np.cos(xx) - np.sin(xx)) * np.sin(yy) / (xx + 1.0) ** 2

    def grad_u1(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        gx = ((xx + 1.0) * np.cos(xx) - np.sin(xx)) * np.cos(yy) / (xx + 1.0) ** 2
        gy = -np.sin(xx) * np.sin(yy) / (xx + 1.0)
        return np.stack([gx, gy], axis=-1)

    def grad_u2(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        gx = ((xx + 1.0) ** 2 * np.sin(xx) + (2.0 * xx + 2.0) * np.cos(xx)
              - 2.0 * np.sin(xx)) * np.sin(yy) / (xx + 1.0) ** 3
        gy = -((xx + 1.0) * np.cos(xx) - np.sin(xx)) * np.cos(yy) / (xx + 1.0) ** 2
        return np.stack([gx, gy], axis=-1)

    def pressure(x):
        x = np.asarray(x)
        return x[..., 1] * np.sinh(x[..., 0])

    def grad_pressure(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        return np.stack([yy * np.cosh(xx), np.sinh(xx)], axis=-1)

    def f1(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        return (-yy * (xx + 1.0) ** 3 * np.cosh(xx)
                + (xx + 1.0) ** 2 * np.sin(xx) * np.cos(yy)
                + ((xx + 1.0) ** 2 * np.sin(xx) + (2.0 * xx + 2.0) * np.cos(xx)
                   - 2.0 * np.sin(xx)) * np.cos(yy)) / (xx + 1.0) ** 3

    def f2(x):
        x = np.asarray(x)
        xx, yy = x[..., 0], x[..., 1]
        t = (xx + 1.0) * np.cos(xx) - np.sin(xx)
        return -((xx + 1.0) ** 4 * np.sinh(xx)
                 + (xx + 1.0) ** 2 * t * np.sin(yy)
                 + ((xx + 1.0) ** 3 * np.cos(xx) - 3.0 * (xx + 1.0) ** 2 * np.sin(xx)
                    - (6.0 * xx + 6.0) * np.cos(xx) + 6.0 * np.sin(xx)) * np.sin(yy)
                 ) / (xx + 1.0) ** 4

    return StokesCase(
        label="custom",
        velocity=(u1, u2),
        velocity_gradient=(grad_u1, grad_u2),
        pressure=pressure,
        pressure_gradient=grad_pressure,
        load=(f1, f2),
    )


# ---------------------------------------------------------------------------
# Error norms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorNorms:
    """Relative errors of a discrete field; flags mark absolute fallbacks."""

    l2: float
    h1: float | None = None
    h2: float | None = None
    flags: tuple = ()


def _relative(err2: float, norm2: float, name: str, flags: list) -> float:
    err = float(np.sqrt(max(err2, 0.0)))
    norm = float(np.sqrt(max(norm2, 0.0)))
    if norm == 0.0:
        flags.append(f"absolute-{name}")
        return err
    return err / norm


def error_integrals(disc: Discretization, coefs, value, gradient=None,
                    hessian=None, gauss: int | None = None):
    """Squared error and exact-norm integrals of a field, per derivative order.

    Returns a dict mapping ``"l2"``, ``"h1"``, ``"h2"`` (as requested) to
    ``(error^2, norm^2)`` pairs; gradient and Hessian contributions use
    the corresponding seminorms.  Sharing the raw integrals lets vector
    fields combine components before taking square roots.
    """
    nu = 2 if hessian is not None else (1 if gradient is not None else 0)
    g = disc.p + 2 if gauss is None else int(gauss)
    x, w, vals, grads, hesses = quadrature_fields(disc, coefs, nu=nu, gauss=g)
    out = {}
    ve = np.asarray(value(x), dtype=float)
    out["l2"] = (float(w @ (vals - ve) ** 2), float(w @ ve ** 2))
    if gradient is not None:
        ge = np.asarray(gradient(x), dtype=float)
        d2 = ((grads - ge) ** 2).sum(axis=-1)
        n2 = (ge ** 2).sum(axis=-1)
        out["h1"] = (float(w @ d2), float(w @ n2))
    if hessian is not None:
        he = np.asarray(hessian(x), dtype=float)
        d2 = ((hesses - he) ** 2).sum(axis=(-2, -1))
        n2 = (he ** 2).sum(axis=(-2, -1))
        out["h2"] = (float(w @ d2), float(w @ n2))
    return out


def error_norms(disc: Discretization, coefs, value, gradient=None,
                hessian=None, gauss: int | None = None) -> ErrorNorms:
    """Relative L2 / H1 / H2 errors of a coefficient field.

    Computed by Gauss quadrature with ``p + 2`` points per direction
    unless overridden.  A vanishing exact norm degrades that entry to an
    absolute error and raises a flag.
    """
    ints = error_integrals(disc, coefs, value, gradient, hessian, gauss)
    flags: list = []
    l2 = _relative(*ints["l2"], "l2", flags)
    h1 = _relative(*ints["h1"], "h1", flags) if "h1" in ints else None
    h2 = _relative(*ints["h2"], "h2", flags) if "h2" in ints else None
    return ErrorNorms(l2=l2, h1=h1, h2=h2, flags=tuple(flags))


# ---------------------------------------------------------------------------
# Study rows and CSV output
# ---------------------------------------------------------------------------

ERRORS_CSV_HEADER = "N,h,p,q,M,H,err_l2_std,err_l2_surr,err_h1_std,err_h1_surr"
ERRORS_CSV_HEADER_H2 = ERRORS_CSV_HEADER + ",err_h2_std,err_h2_surr"
EIGEN_CSV_HEADER = "N,k,lambda_ref,lambda_std,lambda_surr,rel_diff_freq"
TIMING_CSV_HEADER = REPORT_CSV_HEADER + ",t_std_seconds,speed_up"
FIELDS_CSV_HEADER = "x,y,ux,uy,p"


@dataclass
class StudyRow:
    """One refinement level of a convergence study, both assembly paths."""

    N: int
    h: float
    p: int
    q: int
    M: int
    H: float
    err_l2_std: float
    err_l2_surr: float
    err_h1_std: float = float("nan")
    err_h1_surr: float = float("nan")
    err_h2_std: float = float("nan")
    err_h2_surr: float = float("nan")
    quad_fraction: float = float("nan")
    t_std_seconds: float = float("nan")
    t_surr_seconds: float = float("nan")
    flags: tuple = ()

    @property
    def speed_up(self) -> float:
        return self.t_std_seconds / self.t_surr_seconds - 1.0

    def csv_row(self, include_h2: bool = False) -> str:
        cells = [
            str(self.N), repr(float(self.h)), str(self.p), str(self.q),
            str(self.M), repr(float(self.H)), repr(float(self.err_l2_std)),
            repr(float(self.err_l2_surr)), repr(float(self.err_h1_std)),
            repr(float(self.err_h1_surr)),
        ]
        if include_h2:
            cells += [repr(float(self.err_h2_std)), repr(float(self.err_h2_surr))]
        cells.append(_flags_cell(self.flags))
        return ",".join(cells)


@dataclass
class EigenRow:
    """One eigenvalue of one refinement level, both assembly paths."""

    N: int
    k: int
    lambda_ref: float
    lambda_std: float
    lambda_surr: float
    rel_diff_freq: float
    h: float = float("nan")
    flags: tuple = ()

    def csv_row(self) -> str:
        cells = [
            str(self.N), str(self.k), repr(float(self.lambda_ref)),
            repr(float(self.lambda_std)), repr(float(self.lambda_surr)),
            repr(float(self.rel_diff_freq)), _flags_cell(self.flags),
        ]
        return ",".join(cells)


@dataclass
class TimingRow:
    """Surrogate assembly report plus the standard-assembly wall time."""

    report: AssemblyReport
    t_std_seconds: float

    @property
    def speed_up(self) -> float:
        return self.t_std_seconds / self.report.assembly_seconds - 1.0

    def csv_row(self) -> str:
        return (
            f"{self.report.csv_row()},{float(self.t_std_seconds)!r},"
            f"{float(self.speed_up)!r},{_flags_cell(tuple(self.report.flags))}"
        )


def write_csv(path, header: str, rows) -> None:
    """Write one header line plus prepared row strings; flags close each row."""
    lines = [header + ",flags"]
    lines += list(rows)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_errors_csv(path, rows, include_h2: bool = False) -> None:
    header = ERRORS_CSV_HEADER_H2 if include_h2 else ERRORS_CSV_HEADER
    write_csv(path, header, (r.csv_row(include_h2) for r in rows))


def write_eigen_csv(path, rows) -> None:
    write_csv(path, EIGEN_CSV_HEADER, (r.csv_row() for r in rows))


def write_timing_csv(path, rows) -> None:
    write_csv(path, TIMING_CSV_HEADER, (r.csv_row() for r in rows))


def write_fields_csv(path, columns) -> None:
    """Write the sampled-field table; columns follow the fields header."""
    if isinstance(columns, dict):
        columns = [columns[name] for name in FIELDS_CSV_HEADER.split(",")]
    arrs = [np.asarray(c, dtype=float).ravel() for c in columns]
    lines = [FIELDS_CSV_HEADER]
    for row in zip(*arrs):
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Scalar elliptic studies
# ---------------------------------------------------------------------------

def _solve_reduced(A: SparseMatrix, b, dofs, values, opts=None) -> np.ndarray:
    red = apply_dirichlet(A, b, dofs, values)
    return red.expand(solve_spd(red.A, red.b, opts))


def _scalar_cell(form: FormKind, geo: GeometryMap, p: int, q: int, strategy,
                 mode, case: ManufacturedCase, spans, opts) -> StudyRow:
    disc = make_discretization(geo, p, spans)
    t0 = time.perf_counter()
    A = assemble(form, disc)
    t_std = time.perf_counter() - t0
    b = assemble_load(disc, case.load)
    dofs, vals = boundary_values(disc, case.boundary_data())
    u_std = _solve_reduced(A, b, dofs, vals, opts)

    As, rep = build_surrogate_matrix(form, disc, strategy, q=q, mode=mode)
    u_surr = _solve_reduced(As, b, dofs, vals, opts)

    es = error_norms(disc, u_std, case.value, case.gradient, case.hessian)
    eu = error_norms(disc, u_surr, case.value, case.gradient, case.hessian)
    return StudyRow(
        N=disc.ndof, h=float(disc.space.kvs[0].h), p=p, q=q, M=rep.M, H=rep.H,
        err_l2_std=es.l2, err_l2_surr=eu.l2,
        err_h1_std=es.h1, err_h1_surr=eu.h1,
        err_h2_std=float("nan") if es.h2 is None else es.h2,
        err_h2_surr=float("nan") if eu.h2 is None else eu.h2,
        quad_fraction=rep.quad_fraction,
        t_std_seconds=t_std, t_surr_seconds=rep.assembly_seconds,
        flags=_merge_flags(rep.flags, es.flags, eu.flags),
    )


def run_poisson_study(
    geometry="coons_rational",
    p: int = 2,
    q: int = 3,
    strategy=None,
    mode: SurrogateMode | None = None,
    ladder=None,
    case: ManufacturedCase | None = None,
    threads: int = 1,
    solve_opts: SolveOptions | None = None,
) -> list:
    """Poisson convergence rows over a refinement ladder."""
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    ladder = default_ladder(geo.n) if ladder is None else tuple(ladder)
    case = poisson_sine_case(1, geo.n) if case is None else case

    def cell(spans):
        return _scalar_cell(FormKind.POISSON, geo, p, q, strategy, mode,
                            case, spans, solve_opts)

    return _map_cells(cell, ladder, threads)


def run_biharmonic_study(
    geometry="quarter_annulus",
    p: int = 3,
    q: int = 3,
    strategy=None,
    mode: SurrogateMode | None = None,
    ladder=None,
    case: ManufacturedCase | None = None,
    threads: int = 1,
    solve_opts: SolveOptions | None = None,
) -> list:
    """Plate-bending convergence rows; constrains function values only.

    The discrete space is C^1 for any degree at least two, which the
    fourth-order form requires; degree one is rejected.
    """
    if p < 2:
        raise ValueError("plate bending needs degree at least 2 for C1 continuity")
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    ladder = default_ladder(geo.n) if ladder is None else tuple(ladder)
    case = biharmonic_case() if case is None else case
    if case.hessian is None:
        raise ValueError("plate bending errors need a Hessian closure")

    def cell(spans):
        return _scalar_cell(FormKind.BIHARMONIC, geo, p, q, strategy, mode,
                            case, spans, solve_opts)

    return _map_cells(cell, ladder, threads)


# ---------------------------------------------------------------------------
# Membrane eigenvalue study
# ---------------------------------------------------------------------------

_EIGEN_REFERENCE: dict = {}


def _geometry_key(geom: GeometryMap) -> tuple:
    payload = np.ascontiguousarray(geom.control).tobytes()
    payload += np.ascontiguousarray(geom.weights.weights).tobytes()
    digest = hashlib.sha1(payload).hexdigest()
    return (geom.name, geom.space.p, geom.space.shape, digest)


def reference_eigenvalues(geometry, spans, k: int, p_ref: int = 4) -> np.ndarray:
    """First ``k`` Dirichlet membrane eigenvalues on a fine reference mesh.

    Computed once per geometry/mesh/count at degree ``p_ref`` and cached
    for the lifetime of the process; the cache key hashes the geometry
    content, not its object identity.
    """
    geom = resolve_domain(geometry)
    key = (_geometry_key(geom), tuple(np.atleast_1d(spans).tolist()), k, p_ref)
    if key not in _EIGEN_REFERENCE:
        disc = make_discretization(geom, p_ref, spans)
        A = assemble(FormKind.POISSON, disc)
        Mm = assemble(FormKind.MASS, disc)
        idx = interior_dofs(disc.space)
        lam, _ = solve_generalized_eig(
            A.mat[idx][:, idx].tocsr(), Mm.mat[idx][:, idx].tocsr(), k
        )
        _EIGEN_REFERENCE[key] = lam
    return _EIGEN_REFERENCE[key]


def _interior_pencil(A: SparseMatrix, Mm: SparseMatrix, idx):
    return A.mat[idx][:, idx].tocsr(), Mm.mat[idx][:, idx].tocsr()


def run_eigen_study(
    geometry="quarter_annulus",
    p: int = 2,
    q: int = 5,
    strategy=None,
    ladder=(16, 32, 64),
    k: int = 9,
    threads: int = 1,
) -> list:
    """Membrane eigenvalue rows: k eigenvalues per level, both paths.

    The reference spectrum lives on a mesh four times finer than the
    finest level, discretized at degree four.
    """
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    ladder = tuple(ladder)
    lam_ref = reference_eigenvalues(geo, 4 * max(ladder), k)

    def cell(spans):
        disc = make_discretization(geo, p, spans)
        idx = interior_dofs(disc.space)
        A = assemble(FormKind.POISSON, disc)
        Mm = assemble(FormKind.MASS, disc)
        lam_std, _ = solve_generalized_eig(*_interior_pencil(A, Mm, idx), k)
        As, repA = build_surrogate_matrix(FormKind.POISSON, disc, strategy, q=q)
        Ms, repM = build_surrogate_matrix(FormKind.MASS, disc, strategy, q=q)
        lam_surr, _ = solve_generalized_eig(*_interior_pencil(As, Ms, idx), k)
        flags = _merge_flags(repA.flags, repM.flags)
        h = float(disc.space.kvs[0].h)
        rows = []
        for j in range(k):
            omega_std = np.sqrt(lam_std[j])
            omega_surr = np.sqrt(lam_surr[j])
            rows.append(EigenRow(
                N=disc.ndof, k=j + 1, lambda_ref=float(lam_ref[j]),
                lambda_std=float(lam_std[j]), lambda_surr=float(lam_surr[j]),
                rel_diff_freq=float((omega_std - omega_surr) / omega_std),
                h=h, flags=flags,
            ))
        return rows

    nested = _map_cells(cell, ladder, threads)
    return [row for level in nested for row in level]


def eigen_spectrum_diff(
    geometry="quarter_annulus",
    p: int = 2,
    q: int = 3,
    strategy=None,
    spans: int | None = None,
    control_points: int = 50,
) -> float:
    """Largest relative natural-frequency shift over the whole spectrum.

    Solves every interior eigenpair of the standard and surrogate pencils
    on one mesh (``control_points`` basis functions per direction unless
    ``spans`` is given) and returns max |omega - omega_tilde| / omega.
    """
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    spans = control_points - p if spans is None else int(spans)
    disc = make_discretization(geo, p, spans)
    idx = interior_dofs(disc.space)
    A = assemble(FormKind.POISSON, disc)
    Mm = assemble(FormKind.MASS, disc)
    As, _ = build_surrogate_matrix(FormKind.POISSON, disc, strategy, q=q)
    Ms, _ = build_surrogate_matrix(FormKind.MASS, disc, strategy, q=q)
    lam_std, _ = solve_generalized_eig(*_interior_pencil(A, Mm, idx), idx.size)
    lam_surr, _ = solve_generalized_eig(*_interior_pencil(As, Ms, idx), idx.size)
    omega_std = np.sqrt(lam_std)
    omega_surr = np.sqrt(lam_surr)
    return float(np.max(np.abs(omega_std - omega_surr) / omega_std))


# ---------------------------------------------------------------------------
# Stokes studies
# ---------------------------------------------------------------------------

def _stokes_norm_pair(err2_parts, norm2_parts, name, flags):
    return _relative(sum(err2_parts), sum(norm2_parts), name, flags)


def _stokes_solution(spaces: StokesSpaces, A, divs, case: StokesCase, opts=None):
    vel = spaces.velocity
    loads = [assemble_load(vel, case.load[c]) for c in range(spaces.n)]
    dofs = dirichlet_dofs(vel.space)
    values = [interpolate_field(vel, case.velocity[c])[dofs] for c in range(spaces.n)]
    mvec = pressure_mean_vector(spaces)
    return solve_stokes(A, divs, loads, dofs, values, mvec, opts)


def _aligned_pressure(spaces: StokesSpaces, case: StokesCase):
    """Shift the exact pressure to zero mean over the physical domain."""
    prs = spaces.pressure
    zero = np.zeros(prs.ndof)
    x, w, _, _, _ = quadrature_fields(prs, zero, nu=0, gauss=prs.p + 2)
    shift = float(w @ np.asarray(case.pressure(x), dtype=float)) / float(w.sum())

    def aligned(xp):
        return np.asarray(case.pressure(xp), dtype=float) - shift

    return aligned


def run_stokes_study(
    geometry="coons_cubic",
    p_pressure: int = 2,
    q: int = 3,
    strategy=None,
    ladder=(8, 16, 32),
    case: StokesCase | None = None,
    threads: int = 1,
    solve_opts: SolveOptions | None = None,
) -> tuple:
    """Stokes convergence rows; returns (velocity rows, pressure rows).

    ``ladder`` counts pressure elements per direction; the velocity space
    lives on the half-step refinement at one degree higher.  Velocity
    rows carry combined-component L2 and H1 errors, pressure rows the
    zero-mean-aligned pressure errors.
    """
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    case = stokes_case() if case is None else case
    ladder = tuple(ladder)

    def cell(spans):
        spaces = stokes_subgrid_spaces(geo, p_pressure, spans)
        vel, prs = spaces.velocity, spaces.pressure
        t0 = time.perf_counter()
        A = assemble(FormKind.STOKES_VELOCITY, vel)
        D = assemble_divergence(spaces)
        t_std = time.perf_counter() - t0
        U_std, P_std = _stokes_solution(spaces, A, D, case, solve_opts)

        As, repA = build_surrogate_matrix(FormKind.STOKES_VELOCITY, vel, strategy, q=q)
        Ds, repD = build_surrogate_divergence(spaces, strategy, q=q)
        U_surr, P_surr = _stokes_solution(spaces, As, Ds, case, solve_opts)

        p_exact = _aligned_pressure(spaces, case)
        flags = _merge_flags(repA.flags, repD.flags)

        def velocity_errors(U):
            e2 = {"l2": [], "h1": []}
            n2 = {"l2": [], "h1": []}
            for c in range(spaces.n):
                ints = error_integrals(vel, U[c], case.velocity[c],
                                       case.velocity_gradient[c])
                for key in e2:
                    e2[key].append(ints[key][0])
                    n2[key].append(ints[key][1])
            fl: list = []
            return (_stokes_norm_pair(e2["l2"], n2["l2"], "l2", fl),
                    _stokes_norm_pair(e2["h1"], n2["h1"], "h1", fl), fl)

        vl2_std, vh1_std, f1 = velocity_errors(U_std)
        vl2_surr, vh1_surr, f2 = velocity_errors(U_surr)
        ep_std = error_norms(prs, P_std, p_exact, case.pressure_gradient)
        ep_surr = error_norms(prs, P_surr, p_exact, case.pressure_gradient)

        t_surr = repA.assembly_seconds + repD.assembly_seconds
        vrow = StudyRow(
            N=spaces.n * vel.ndof, h=float(vel.space.kvs[0].h),
            p=vel.p, q=q, M=repA.M, H=repA.H,
            err_l2_std=vl2_std, err_l2_surr=vl2_surr,
            err_h1_std=vh1_std, err_h1_surr=vh1_surr,
            quad_fraction=repA.quad_fraction,
            t_std_seconds=t_std, t_surr_seconds=t_surr,
            flags=_merge_flags(flags, f1, f2),
        )
        prow = StudyRow(
            N=prs.ndof, h=float(prs.space.kvs[0].h),
            p=prs.p, q=q, M=repD.M, H=repD.H,
            err_l2_std=ep_std.l2, err_l2_surr=ep_surr.l2,
            err_h1_std=ep_std.h1, err_h1_surr=ep_surr.h1,
            quad_fraction=repD.quad_fraction,
            t_std_seconds=t_std, t_surr_seconds=t_surr,
            flags=_merge_flags(flags, ep_std.flags, ep_surr.flags),
        )
        return vrow, prow

    pairs = _map_cells(cell, ladder, threads)
    return [v for v, _ in pairs], [pr for _, pr in pairs]


def cavity_boundary_coefficients(spaces: StokesSpaces):
    """Lid-driven cavity data: unit tangential lid, no-slip walls.

    Returns ``(dofs, values)`` where the first velocity component is one
    on the lid face except at the two corner basis functions, which stay
    zero to regularize the discontinuity, and every other boundary
    coefficient vanishes.
    """
    vs = spaces.velocity.space
    dofs = dirichlet_dofs(vs)
    g1 = np.zeros(vs.N)
    lid = dirichlet_dofs(vs, faces=[(1, 1)])
    g1[lid] = 1.0
    m0, m1 = vs.shape
    corners = np.ravel_multi_index(([0, m0 - 1], [m1 - 1, m1 - 1]), vs.shape, order="F")
    g1[corners] = 0.0
    return dofs, [g1[dofs], np.zeros(dofs.size)]


def run_cavity_flow(
    geometry="coons_cubic",
    p_pressure: int = 2,
    q: int = 3,
    strategy=None,
    spans: int = 32,
    grid_points: int = 101,
    solve_opts: SolveOptions | None = None,
) -> dict:
    """Lid-driven cavity on the cubic Coons domain, standard and surrogate.

    Solves with zero volume load and the regularized lid data, samples
    both solutions on a uniform parametric grid and returns the field
    table columns (physical coordinates, velocity, pressure) for each
    path plus the assembly reports.
    """
    geo = resolve_domain(geometry)
    strategy = ConstantSampling(5) if strategy is None else strategy
    spaces = stokes_subgrid_spaces(geo, p_pressure, spans)
    vel, prs = spaces.velocity, spaces.pressure
    dofs, values = cavity_boundary_coefficients(spaces)
    loads = [np.zeros(vel.ndof) for _ in range(spaces.n)]
    mvec = pressure_mean_vector(spaces)

    A = assemble(FormKind.STOKES_VELOCITY, vel)
    D = assemble_divergence(spaces)
    U_std, P_std = solve_stokes(A, D, loads, dofs, values, mvec, solve_opts)

    As, repA = build_surrogate_matrix(FormKind.STOKES_VELOCITY, vel, strategy, q=q)
    Ds, repD = build_surrogate_divergence(spaces, strategy, q=q)
    U_surr, P_surr = solve_stokes(As, Ds, loads, dofs, values, mvec, solve_opts)

    axes = [np.linspace(0.0, 1.0, grid_points) for _ in range(spaces.n)]
    phi = map_grid(geo, axes, max_deriv=0).phi

    def sample(U, P):
        ux = evaluate_field(vel, U[0], axes)
        uy = evaluate_field(vel, U[1], axes)
        pp = evaluate_field(prs, P, axes)
        return {
            "x": phi[..., 0].ravel(order="F"),
            "y": phi[..., 1].ravel(order="F"),
            "ux": ux.ravel(order="F"),
            "uy": uy.ravel(order="F"),
            "p": pp.ravel(order="F"),
        }

    return {
        "standard": sample(U_std, P_std),
        "surrogate": sample(U_surr, P_surr),
        "reports": (repA, repD),
        "solutions": ((U_std, P_std), (U_surr, P_surr)),
    }


# ---------------------------------------------------------------------------
# Timing harness
# ---------------------------------------------------------------------------

def timing_harness(
    geometry="unit_square",
    p: int = 2,
    q: int = 5,
    strategy=None,
    ladder=(64, 128, 256),
    form: FormKind = FormKind.POISSON,
) -> list:
    """Wall-clock comparison rows, single worker, warm-up excluded.

    The first ladder level is assembled once on both paths before any
    timer starts, so allocator and cache effects do not pollute the
    first row.
    """
    geo = resolve_domain(geometry)
    strategy = MeshDependentSampling(3.0, 0.5) if strategy is None else strategy
    ladder = tuple(ladder)

    warm = make_discretization(geo, p, ladder[0])
    assemble(form, warm)
    build_surrogate_matrix(form, warm, strategy, q=q)

    rows = []
    for spans in ladder:
        disc = make_discretization(geo, p, spans)
        t0 = time.perf_counter()
        assemble(form, disc)
        t_std = time.perf_counter() - t0
        _, rep = build_surrogate_matrix(form, disc, strategy, q=q)
        rows.append(TimingRow(report=rep, t_std_seconds=t_std))
    return rows
