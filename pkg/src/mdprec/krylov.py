"""Sparse iterative solver kernel.

Flexible restarted GMRES with right preconditioning is the single Krylov
driver used everywhere: the preconditioner may change between
applications (the trained network and the multigrid wrapper are mildly
nonlinear), so the preconditioned basis vectors are stored explicitly.
The Hessenberg least-squares problem is solved with Givens rotations and
convergence is confirmed against the true residual at every restart.

Also here: ILU(0) with the factor sharing the matrix sparsity pattern
(numba kernels for the factorization and triangular solves), weighted
Jacobi relaxation, and a geometric multigrid V-cycle on the structured
grid that serves as the in-repo stand-in for black-box AMG baselines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .geometry import StructuredGrid

BREAKDOWN_TOL = 1e-14


@dataclass
class SolveReport:
    """Outcome of one preconditioned solve."""

    iterations: int
    converged: bool
    residual_history: list
    rel_residual: float
    wall_time: float
    time_per_iter: float
    breakdowns: int = 0


class Preconditioner:
    """Apply contract ``z = P(r)``; may be nonlinear and stateful-free."""

    def apply(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.apply(r)


class ExactPreconditioner(Preconditioner):
    """Direct sparse solve; the reference 'perfect' preconditioner."""

    def __init__(self, A):
        self._lu = spla.splu(sp.csc_matrix(A))

    def apply(self, r):
        return self._lu.solve(r)


def spmv(A, x: np.ndarray) -> np.ndarray:
    """CSR matrix-vector product with an explicit dimension check."""
    x = np.asarray(x)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


def _as_apply(op):
    if callable(op) and not sp.issparse(op):
        return op
    return lambda v: spmv(op, v)


def _as_precond(precond):
    if precond is None:
        return None
    if isinstance(precond, Preconditioner):
        return precond.apply
    if callable(precond):
        return precond
    raise TypeError("preconditioner must be None, callable, or Preconditioner")


def fgmres(apply_A, precond, b: np.ndarray, restart: int = 20,
           tol: float = 1e-6, maxit: int = 1000,
           x0: np.ndarray | None = None) -> tuple:
    """Flexible GMRES(restart) with right preconditioning.

    Returns ``(x, SolveReport)``.  Iterations are counted as Arnoldi
    steps across all restart cycles; an Arnoldi breakdown (candidate
    basis vector with norm below 1e-14) is recorded and triggers a
    restart rather than a failure.  Convergence is declared only after
    the true residual ``norm(b - A x) / norm(r0)`` meets the tolerance.
    """
    if restart < 1:
        raise ValueError("restart must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = _as_apply(apply_A)
    P = _as_precond(precond)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    t_start = time.perf_counter()
    r = b - A(x)
    r0_norm = np.linalg.norm(r)
    if r0_norm == 0.0:
        return x, SolveReport(0, True, [0.0], 0.0,
                              time.perf_counter() - t_start, 0.0)

    history = [1.0]
    iters = 0
    breakdowns = 0
    converged = False
    V = np.empty((restart + 1, n))
    Z = np.empty((restart, n))

    while not converged and iters < maxit:
        beta = np.linalg.norm(r)
        if beta / r0_norm <= tol:
            converged = True
            break
        V[0] = r / beta
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        j = 0
        while j < restart and iters < maxit:
            Z[j] = V[j] if P is None else P(V[j])
            w = A(Z[j])
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            h_next = np.linalg.norm(w)
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], h_next)
            if denom < BREAKDOWN_TOL:
                # the preconditioned direction added nothing (e.g. a zero
                # map); count the attempt, drop the column, restart
                iters += 1
                history.append(history[-1])
                breakdowns += 1
                break
            cs[j], sn[j] = H[j, j] / denom, h_next / denom
            H[j, j] = denom
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            iters += 1
            est = abs(g[j + 1]) / r0_norm
            history.append(est)
            j += 1
            if h_next < BREAKDOWN_TOL:
                breakdowns += 1
                break
            V[j] = w / h_next
            if est <= tol:
                break
        if j > 0:
            y = np.zeros(j)
            for i in range(j - 1, -1, -1):  # back substitution
                y[i] = (g[i] - H[i, i + 1:j] @ y[i + 1:j]) / H[i, i]
            x = x + Z[:j].T @ y
        r = b - A(x)
        if np.linalg.norm(r) / r0_norm <= tol:
            converged = True

    rel = float(np.linalg.norm(b - A(x)) / r0_norm)
    history.append(rel)
    wall = time.perf_counter() - t_start
    report = SolveReport(iters, converged, history, rel, wall,
                         wall / iters if iters else 0.0, breakdowns)
    return x, report


# ---------------------------------------------------------------------------
# ILU(0)

@njit(cache=True)
def _ilu0_factor_kernel(indptr, indices, data, diag_pos):
    n = indptr.shape[0] - 1
    for i in range(n):
        pos = indptr[i]
        while pos < indptr[i + 1] and indices[pos] < i:
            k = indices[pos]
            pivot = data[diag_pos[k]]
            if abs(pivot) < BREAKDOWN_TOL:
                return k
            lik = data[pos] / pivot
            data[pos] = lik
            pk = diag_pos[k] + 1
            pi = pos + 1
            while pk < indptr[k + 1] and pi < indptr[i + 1]:
                ck = indices[pk]
                ci = indices[pi]
                if ck == ci:
                    data[pi] -= lik * data[pk]
                    pk += 1
                    pi += 1
                elif ck < ci:
                    pk += 1
                else:
                    pi += 1
            pos += 1
        if abs(data[diag_pos[i]]) < BREAKDOWN_TOL:
            return i
    return -1


@njit(cache=True)
def _ilu0_solve_kernel(indptr, indices, data, diag_pos, rhs):
    n = rhs.shape[0]
    x = np.empty(n)
    for i in range(n):  # unit lower triangular forward solve
        s = rhs[i]
        for pos in range(indptr[i], diag_pos[i]):
            s -= data[pos] * x[indices[pos]]
        x[i] = s
    for i in range(n - 1, -1, -1):  # upper triangular backward solve
        s = x[i]
        for pos in range(diag_pos[i] + 1, indptr[i + 1]):
            s -= data[pos] * x[indices[pos]]
        x[i] = s / data[diag_pos[i]]
    return x


@dataclass(frozen=True)
class IluFactorization:
    """Combined L\\U factor sharing the sparsity pattern of the input."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    diag_pos: np.ndarray
    shape: tuple


def ilu0(A) -> IluFactorization:
    """ILU(0): incomplete LU with no fill beyond the pattern of ``A``."""
    A = sp.csr_matrix(A).copy()
    A.sort_indices()
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("ILU(0) needs a square matrix")
    diag_pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        sl = A.indices[A.indptr[i]:A.indptr[i + 1]]
        hit = np.searchsorted(sl, i)
        if hit < len(sl) and sl[hit] == i:
            diag_pos[i] = A.indptr[i] + hit
    missing = np.nonzero(diag_pos < 0)[0]
    if len(missing):
        raise ValueError(f"zero pivot: row {missing[0]} has no diagonal entry")
    data = A.data.astype(float).copy()
    bad = _ilu0_factor_kernel(A.indptr, A.indices, data, diag_pos)
    if bad >= 0:
        raise ValueError(f"zero pivot in row {bad} during ILU(0)")
    return IluFactorization(A.indptr, A.indices, data, diag_pos, A.shape)


def ilu0_apply(fact: IluFactorization, r: np.ndarray) -> np.ndarray:
    """Forward then backward triangular solve with the ILU(0) factor."""
    r = np.asarray(r, dtype=float)
    if r.shape != (fact.shape[0],):
        raise ValueError("right-hand side length mismatch")
    return _ilu0_solve_kernel(fact.indptr, fact.indices, fact.data,
                              fact.diag_pos, r)


class IluPreconditioner(Preconditioner):
    def __init__(self, A):
        self.fact = ilu0(A)

    def apply(self, r):
        return ilu0_apply(self.fact, r)


# ---------------------------------------------------------------------------
# smoothing and geometric multigrid

def jacobi_smooth(A, r: np.ndarray, x0: np.ndarray, maxit: int,
                  omega: float = 2.0 / 3.0) -> np.ndarray:
    """``maxit`` sweeps of weighted Jacobi on ``A x = r`` from ``x0``."""
    diag = np.asarray(A.diagonal())
    if np.any(diag == 0.0):
        raise ValueError("Jacobi relaxation needs a nonzero diagonal")
    x = np.array(x0, dtype=float)
    for _ in range(maxit):
        x = x + omega * (r - A @ x) / diag
    return x


def prolongation_3d(n_coarse: int) -> sp.csr_matrix:
    """Trilinear interpolation from an ``n_coarse`` grid to ``2n-1`` points."""
    nf = 2 * n_coarse - 1
    rows, cols, vals = [], [], []
    for i in range(nf):
        if i % 2 == 0:
            rows.append(i), cols.append(i // 2), vals.append(1.0)
        else:
            rows += [i, i]
            cols += [i // 2, i // 2 + 1]
            vals += [0.5, 0.5]
    P1 = sp.csr_matrix((vals, (rows, cols)), shape=(nf, n_coarse))
    return sp.kron(sp.kron(P1, P1), P1).tocsr()  # x index fastest


@dataclass
class GmgHierarchy:
    matrices: list          # fine to coarse
    prolongs: list          # prolongs[l]: level l+1 -> level l
    coarse_lu: object
    grid_sizes: list


def gmg_build(grid: StructuredGrid, fine_operator, levels: int) -> GmgHierarchy:
    """Galerkin hierarchy below a fine operator on the structured grid.

    ``fine_operator`` is either an assembled sparse matrix or a callable
    mapping the grid to one.  Each coarsening halves the cells per edge;
    the restriction is the (scaled) transpose of the trilinear
    prolongation, absorbed into the Galerkin products P^T A P.
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    A0 = fine_operator(grid) if callable(fine_operator) else fine_operator
    if A0.shape != (grid.num_nodes, grid.num_nodes):
        raise ValueError("fine operator shape does not match the grid")
    mats = [sp.csr_matrix(A0)]
    prolongs = []
    sizes = [grid.n]
    n = grid.n
    for _ in range(levels - 1):
        if (n - 1) % 2 != 0 or (n - 1) // 2 + 1 < 3:
            raise ValueError(f"grid with {n} points per edge is not coarsenable")
        nc = (n - 1) // 2 + 1
        P = prolongation_3d(nc)
        mats.append((P.T @ mats[-1] @ P).tocsr())
        prolongs.append(P)
        sizes.append(nc)
        n = nc
    coarse_lu = spla.splu(sp.csc_matrix(mats[-1]))
    return GmgHierarchy(mats, prolongs, coarse_lu, sizes)


def gmg_vcycle(hierarchy: GmgHierarchy, r: np.ndarray, n_pre: int = 1,
               n_post: int = 1, _level: int = 0) -> np.ndarray:
    """One V-cycle for ``A z = r`` with damped-Jacobi smoothing."""
    A = hierarchy.matrices[_level]
    if _level == len(hierarchy.matrices) - 1:
        return hierarchy.coarse_lu.solve(r)
    x = jacobi_smooth(A, r, np.zeros_like(r), n_pre)
    P = hierarchy.prolongs[_level]
    coarse = gmg_vcycle(hierarchy, P.T @ (r - A @ x), n_pre, n_post,
                        _level + 1)
    x = x + P @ coarse
    return jacobi_smooth(A, r, x, n_post)


class GmgPreconditioner(Preconditioner):
    """Fixed number of V-cycles per application, the AMG(m) analogue."""

    def __init__(self, hierarchy: GmgHierarchy, cycles: int = 1,
                 n_pre: int = 1, n_post: int = 1):
        if cycles < 1:
            raise ValueError("cycles must be at least 1")
        self.hierarchy = hierarchy
        self.cycles = cycles
        self.n_pre = n_pre
        self.n_post = n_post

    def apply(self, r):
        A = self.hierarchy.matrices[0]
        z = gmg_vcycle(self.hierarchy, r, self.n_pre, self.n_post)
        for _ in range(self.cycles - 1):
            z = z + gmg_vcycle(self.hierarchy, r - A @ z, self.n_pre,
                               self.n_post)
        return z
