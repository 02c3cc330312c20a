"""Linear and eigenvalue solvers for desk-scale discrete systems.

Symmetric positive definite solves (direct or conjugate gradient),
generalized symmetric eigenproblems, and the velocity-pressure
saddle-point system with a zero-mean pressure constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolveOptions",
    "solve_spd",
    "solve_generalized_eig",
    "solve_stokes",
]

_METHODS = ("direct", "conjugate-gradient")
_PRECONDITIONERS = ("none", "diagonal")

# below this size generalized eigenproblems go through the dense solver,
# which doubles as the oracle for the iterative path
_DENSE_EIG_LIMIT = 2000


def _as_csr(A) -> sp.csr_matrix:
    mat = getattr(A, "mat", A)
    if sp.issparse(mat):
        return mat.tocsr()
    return sp.csr_matrix(np.asarray(mat, dtype=float))


@dataclass(frozen=True)
class SolveOptions:
    """Options for symmetric positive definite solves.

    Parameters
    ----------
    method : str
        Either ``"direct"`` (sparse LU) or ``"conjugate-gradient"``.
    tolerance : float
        Relative residual target, in (0, 1).
    max_iterations : int, optional
        Iteration cap for the conjugate gradient method. Defaults to
        ten times the system size.
    preconditioner : str
        ``"none"`` or ``"diagonal"`` (Jacobi), conjugate gradient only.
    """

    method: str = "direct"
    tolerance: float = 1e-10
    max_iterations: int | None = None
    preconditioner: str = "none"

    def __post_init__(self):
        method = "conjugate-gradient" if self.method == "cg" else self.method
        object.__setattr__(self, "method", method)
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.tolerance < 1.0:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.preconditioner not in _PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


def solve_spd(A, b, opts: SolveOptions | None = None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Parameters
    ----------
    A : sparse matrix, array, or SparseMatrix
        System matrix, symmetric positive definite.
    b : array
        Right-hand side.
    opts : SolveOptions, optional
        Method selection and tolerances. Defaults to a direct solve.

    Returns
    -------
    numpy.ndarray
        Solution with relative residual at most ``opts.tolerance``.

    Raises
    ------
    RuntimeError
        If conjugate gradient stalls or encounters negative curvature
        (the system is not positive definite), or the final residual
        misses the tolerance.
    """
    opts = opts or SolveOptions()
    mat = _as_csr(A)
    rhs = np.asarray(b, dtype=float).ravel()
    if mat.shape[0] != mat.shape[1] or mat.shape[0] != rhs.size:
        raise ValueError("matrix and right-hand side sizes do not match")
    normb = np.linalg.norm(rhs)
    if normb == 0.0:
        return np.zeros_like(rhs)

    if opts.method == "direct":
        x = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs)
    else:
        x = _conjugate_gradient(mat, rhs, opts)

    rel = np.linalg.norm(mat @ x - rhs) / normb
    if rel > opts.tolerance:
        raise RuntimeError(f"solve residual {rel:.3e} exceeds tolerance {opts.tolerance:.1e}")
    return x


def _conjugate_gradient(mat, rhs, opts):
    n = rhs.size
    maxit = opts.max_iterations if opts.max_iterations is not None else 10 * n
    if opts.preconditioner == "diagonal":
        diag = mat.diagonal()
        if np.any(diag <= 0.0):
            raise RuntimeError("non-positive diagonal entry; system is not positive definite")
        apply_prec = lambda r: r / diag
    else:
        apply_prec = lambda r: r
    target = opts.tolerance * np.linalg.norm(rhs)

    x = np.zeros(n)
    r = rhs.copy()
    z = apply_prec(r)
    d = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ad = mat @ d
        curv = d @ Ad
        if curv <= 0.0:
            raise RuntimeError(
                f"negative curvature at iteration {it}; system is not positive definite"
            )
        alpha = rz / curv
        x += alpha * d
        r -= alpha * Ad
        if np.linalg.norm(r) <= target:
            return x
        z = apply_prec(r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    rel = np.linalg.norm(mat @ x - rhs) / np.linalg.norm(rhs)
    raise RuntimeError(
        f"conjugate gradient did not converge in {maxit} iterations "
        f"(relative residual {rel:.3e})"
    )


def solve_generalized_eig(A, M, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Compute the ``k`` smallest eigenpairs of ``A v = lam M v``.

    Parameters
    ----------
    A : sparse matrix, array, or SparseMatrix
        Symmetric positive semidefinite stiffness-like matrix.
    M : sparse matrix, array, or SparseMatrix
        Symmetric positive definite mass-like matrix.
    k : int
        Number of eigenpairs, between 1 and the system size.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray)
        Eigenvalues in ascending order and M-orthonormal eigenvectors
        as columns, with a deterministic sign convention.

    Notes
    -----
    Small systems use a dense solver; larger ones use shift-invert
    Lanczos iteration with a fixed start vector so reruns are
    bit-reproducible.
    """
    Am = _as_csr(A)
    Mm = _as_csr(M)
    n = Am.shape[0]
    if Am.shape != Mm.shape or Am.shape[0] != Am.shape[1]:
        raise ValueError("matrices must be square and of equal shape")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")

    if n < _DENSE_EIG_LIMIT or k > n // 4:
        vals, vecs = scipy.linalg.eigh(
            Am.toarray(), Mm.toarray(), subset_by_index=[0, k - 1]
        )
    else:
        # symmetric-pattern ordering keeps the shift factor an order of
        # magnitude sparser than the default column ordering
        lu = spla.splu(Am.tocsc(), permc_spec="MMD_AT_PLUS_A")
        op = spla.LinearOperator(Am.shape, matvec=lu.solve)
        v0 = np.cos(np.linspace(0.0, 3.0, n))
        vals, vecs = spla.eigsh(Am, k=k, M=Mm, sigma=0.0, which="LM", v0=v0, OPinv=op)
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]

    # normalize in the M inner product and fix signs deterministically
    for j in range(k):
        v = vecs[:, j]
        v /= np.sqrt(v @ (Mm @ v))
        lead = np.argmax(np.abs(v))
        if v[lead] < 0.0:
            v *= -1.0
    for j in range(k):
        v = vecs[:, j]
        res = np.linalg.norm(Am @ v - vals[j] * (Mm @ v))
        scale = max(np.linalg.norm(Am @ v), 1e-30)
        if res > 1e-8 * scale:
            raise RuntimeError(
                f"eigenpair {j} residual {res / scale:.3e} exceeds 1e-08"
            )
    return vals, vecs


def solve_stokes(
    A,
    divs,
    loads,
    dirichlet_dofs,
    dirichlet_values,
    mean_vector,
    opts: SolveOptions | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the saddle-point system for velocity and zero-mean pressure.

    The velocity block applies the scalar gradient form ``A`` to each
    component; ``divs[c]`` couples pressure tests to component ``c`` of
    the velocity. Dirichlet velocity dofs are eliminated, and the
    pressure mean is pinned through one bordered row and column holding
    the pressure-space volume integrals.

    Parameters
    ----------
    A : SparseMatrix or sparse matrix
        Scalar velocity form, shared by all components.
    divs : sequence of SparseMatrix or sparse matrices
        Per-component divergence couplings, pressure rows by velocity
        columns.
    loads : array
        Per-component load vectors, shape ``(n, ndof_velocity)``.
    dirichlet_dofs : array of int
        Constrained velocity dofs (the same set for every component).
    dirichlet_values : array
        Prescribed values, shape ``(n, len(dirichlet_dofs))``.
    mean_vector : array
        Pressure basis integrals over the domain.
    opts : SolveOptions, optional
        Only the direct method is supported for saddle-point systems.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray)
        Velocity components of shape ``(n, ndof_velocity)`` with the
        boundary values in place, and the zero-mean pressure vector.

    Raises
    ------
    ValueError
        If the prescribed boundary data carries net flux incompatible
        with incompressibility.
    """
    opts = opts or SolveOptions()
    if opts.method != "direct":
        raise ValueError("saddle-point systems support only the direct method")
    Am = _as_csr(A)
    Bs = [_as_csr(B) for B in divs]
    ncomp = len(Bs)
    nv = Am.shape[0]
    npres = Bs[0].shape[0]
    loads = np.asarray(loads, dtype=float).reshape(ncomp, nv)
    dofs = np.asarray(dirichlet_dofs, dtype=np.int64)
    values = np.asarray(dirichlet_values, dtype=float).reshape(ncomp, dofs.size)
    mvec = np.asarray(mean_vector, dtype=float).ravel()

    # net boundary flux must vanish for the continuity equation to be
    # solvable; interpolated traces of divergence-free fields leave a
    # discretization-level residue, so the gate only catches data whose
    # flux is of the order of the data itself
    flux = 0.0
    for c in range(ncomp):
        ub = np.zeros(nv)
        ub[dofs] = values[c]
        flux += float((Bs[c] @ ub).sum())
    gmax = float(np.max(np.abs(values))) if values.size else 0.0
    if gmax > 0.0 and abs(flux) > 1e-3 * gmax:
        raise ValueError(
            f"boundary data carries net flux {flux:.3e}; "
            "incompatible with the incompressibility constraint"
        )

    interior = np.setdiff1d(np.arange(nv), dofs)
    ni = interior.size
    Aii = Am[interior][:, interior]
    Aib = Am[interior][:, dofs]
    Bi = [B[:, interior] for B in Bs]
    Bb = [B[:, dofs] for B in Bs]

    mcol = sp.csr_matrix(mvec.reshape(npres, 1))
    blocks = []
    rhs_parts = []
    for c in range(ncomp):
        row = [None] * (ncomp + 2)
        row[c] = Aii
        row[ncomp] = Bi[c].T
        blocks.append(row)
        rhs_parts.append(loads[c][interior] - Aib @ values[c])
    prow = list(Bi) + [None, mcol]
    blocks.append(prow)
    rhs_parts.append(-sum(Bb[c] @ values[c] for c in range(ncomp)))
    lrow = [None] * (ncomp + 2)
    lrow[ncomp] = mcol.T
    blocks.append(lrow)
    rhs_parts.append(np.zeros(1))

    K = sp.bmat(blocks, format="csc")
    rhs = np.concatenate(rhs_parts)
    if np.linalg.norm(rhs) == 0.0:
        x = np.zeros(K.shape[0])
    else:
        x = spla.splu(K, permc_spec="MMD_AT_PLUS_A").solve(rhs)
        rel = np.linalg.norm(K @ x - rhs) / np.linalg.norm(rhs)
        if rel > 1e-8:
            raise RuntimeError(f"saddle-point residual {rel:.3e} exceeds 1e-08")

    velocity = np.zeros((ncomp, nv))
    for c in range(ncomp):
        velocity[c, interior] = x[c * ni:(c + 1) * ni]
        velocity[c, dofs] = values[c]
    pressure = x[ncomp * ni:ncomp * ni + npres]
    return velocity, pressure
