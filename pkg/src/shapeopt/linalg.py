"""Sparse direct and iterative solvers used by every solve in the package.

Matrices are scipy CSR/CSC, vectors are numpy arrays.  The direct solvers
apply a reverse Cuthill-McKee reordering and factor with SuperLU; the
Cholesky-style path disables pivoting and checks the pivots, so indefinite
input is rejected instead of silently factored.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

__all__ = [
    "CsrMatrix",
    "DenseVector",
    "NonSPDError",
    "SolverError",
    "cholesky_solve",
    "lu_solve",
    "cg_solve",
]

# solver currency
CsrMatrix = sp.csr_matrix
DenseVector = np.ndarray

_RESIDUAL_TOL = 1e-10
_SYMMETRY_TOL = 1e-10


class NonSPDError(RuntimeError):
    """Matrix handed to the Cholesky path is not symmetric positive definite."""


class SolverError(RuntimeError):
    pass


def _as_csr(A) -> sp.csr_matrix:
    if not sp.issparse(A):
        A = sp.csr_matrix(np.asarray(A, dtype=float))
    A = A.tocsr()
    if A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise SolverError("matrix must be square and non-empty")
    return A


def _check_residual(A, x, b, what):
    res = np.linalg.norm(A @ x - b)
    bound = _RESIDUAL_TOL * max(np.linalg.norm(b), 1e-300)
    if not np.isfinite(res):
        raise SolverError(f"{what} produced non-finite entries")
    return res <= bound, res, bound


def cholesky_solve(A, b) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A.

    Uses an RCM ordering and a pivot-free factorization; any non-positive
    pivot raises :class:`NonSPDError`.  One step of iterative refinement
    keeps the residual below 1e-10 relative.
    """
    A = _as_csr(A)
    b = np.asarray(b, dtype=float)
    asym = abs(A - A.T)
    scale = max(np.abs(A.data).max() if A.nnz else 0.0, 1e-300)
    if asym.nnz and asym.data.max() > _SYMMETRY_TOL * scale:
        raise NonSPDError("matrix is not symmetric")

    perm = reverse_cuthill_mckee(A, symmetric_mode=True)
    Ap = A[perm][:, perm].tocsc()
    try:
        lu = spla.splu(
            Ap, permc_spec="NATURAL", diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise NonSPDError(f"factorization failed: {exc}") from exc
    diag = lu.U.diagonal()
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        raise NonSPDError("non-positive pivot; matrix is not positive definite")

    x = np.empty_like(b)
    x[perm] = lu.solve(b[perm])
    ok, res, bound = _check_residual(A, x, b, "cholesky_solve")
    if not ok:
        correction = np.empty_like(b)
        r = b - A @ x
        correction[perm] = lu.solve(r[perm])
        x = x + correction
        ok, res, bound = _check_residual(A, x, b, "cholesky_solve")
        if not ok:
            raise SolverError(f"residual {res:.3e} above bound {bound:.3e}")
    return x


def lu_solve(A, b, transpose: bool = False) -> np.ndarray:
    """Solve A x = b (or A^T x = b) for a general square sparse matrix."""
    A = _as_csr(A)
    b = np.asarray(b, dtype=float)
    pattern = (A + A.T).tocsr()
    perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
    Ap = A[perm][:, perm].tocsc()
    try:
        lu = spla.splu(Ap, permc_spec="NATURAL")
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc

    trans = "T" if transpose else "N"
    x = np.empty_like(b)
    x[perm] = lu.solve(b[perm], trans=trans)
    target = A.T if transpose else A
    ok, res, bound = _check_residual(target, x, b, "lu_solve")
    if not ok:
        correction = np.empty_like(b)
        r = b - target @ x
        correction[perm] = lu.solve(r[perm], trans=trans)
        x = x + correction
        ok, res, bound = _check_residual(target, x, b, "lu_solve")
        if not ok:
            raise SolverError(f"residual {res:.3e} above bound {bound:.3e}")
    return x


def cg_solve(A, b, tol: float = 1e-10, maxit: int = 2000) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients for SPD systems."""
    A = _as_csr(A)
    b = np.asarray(b, dtype=float)
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise NonSPDError("non-positive diagonal entry")
    M = sp.diags(1.0 / diag)
    iterations = 0

    def cb(_):
        nonlocal iterations
        iterations += 1

    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxit, M=M, callback=cb)
    if info > 0:
        raise SolverError(f"cg did not converge within {maxit} iterations")
    if info < 0:
        raise SolverError("cg failed with an illegal input")
    x_iterations = iterations
    cg_solve.last_iterations = x_iterations
    return x


cg_solve.last_iterations = 0
