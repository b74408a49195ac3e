import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mdprec.assembly import PhysicalParams, assemble_3d
from mdprec.geometry import StructuredGrid
from mdprec.krylov import (
    ExactPreconditioner,
    GmgPreconditioner,
    IluPreconditioner,
    Preconditioner,
    fgmres,
    gmg_build,
    gmg_vcycle,
    ilu0,
    ilu0_apply,
    jacobi_smooth,
    prolongation_3d,
    spmv,
)


def random_spd(n, seed, shift=None):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    return sp.csr_matrix(A @ A.T + (shift if shift is not None else n) * np.eye(n))


class TestSpmv:
    def test_identity(self):
        A = sp.identity(7, format="csr")
        x = np.arange(7.0)
        assert np.array_equal(spmv(A, x), x)

    def test_small_example(self):
        A = sp.csr_matrix(np.array([[2.0, 0.0], [1.0, 3.0]]))
        assert np.array_equal(spmv(A, np.array([1.0, 1.0])), [2.0, 4.0])

    def test_dense_oracle(self):
        rng = np.random.default_rng(0)
        dense = rng.standard_normal((50, 50))
        dense[rng.random((50, 50)) < 0.6] = 0.0
        A = sp.csr_matrix(dense)
        x = rng.standard_normal(50)
        assert np.max(np.abs(spmv(A, x) - dense @ x)) < 1e-13

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            spmv(sp.identity(3, format="csr"), np.ones(4))


class TestFgmres:
    def test_identity_converges_immediately(self):
        A = sp.identity(40, format="csr")
        b = np.linspace(1, 2, 40)
        x, rep = fgmres(A, None, b)
        assert rep.converged
        assert rep.iterations == 1
        assert np.allclose(x, b)

    def test_exact_inverse_preconditioner(self):
        A = random_spd(100, 1)
        b = np.random.default_rng(2).standard_normal(100)
        x, rep = fgmres(A, ExactPreconditioner(A), b, tol=1e-10)
        assert rep.converged
        assert rep.iterations <= 2
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10

    def test_flexible_with_changing_preconditioner(self):
        # preconditioner rescales by a fresh random SPD diagonal every call
        A = random_spd(100, 3)
        rng = np.random.default_rng(4)

        def precond(r):
            return r * rng.uniform(0.5, 1.5, size=r.shape)

        b = rng.standard_normal(100)
        x, rep = fgmres(A, precond, b, restart=20, tol=1e-8, maxit=2000)
        assert rep.converged
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-8

    def test_monotone_least_squares_residual_within_cycle(self):
        A = random_spd(80, 5, shift=10)
        b = np.random.default_rng(6).standard_normal(80)
        _, rep = fgmres(A, None, b, restart=30, tol=1e-12, maxit=30)
        est = rep.residual_history[1:-1]  # per-iteration estimates
        assert all(b <= a + 1e-15 for a, b in zip(est, est[1:]))

    def test_reported_residual_matches_recomputation(self):
        A = random_spd(60, 7)
        b = np.random.default_rng(8).standard_normal(60)
        x, rep = fgmres(A, IluPreconditioner(A), b, tol=1e-9)
        true = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
        assert abs(true - rep.rel_residual) < 1e-10
        assert rep.residual_history[-1] <= 1e-9

    def test_x0_and_restart_path(self):
        A = random_spd(120, 9, shift=1.0)  # harder: forces restarts
        rng = np.random.default_rng(10)
        b = rng.standard_normal(120)
        x0 = rng.standard_normal(120)
        x, rep = fgmres(A, None, b, restart=5, tol=1e-8, maxit=5000, x0=x0)
        assert rep.converged
        assert rep.iterations > 5  # actually restarted
        r0 = np.linalg.norm(b - A @ x0)  # tolerance is relative to r0
        assert np.linalg.norm(A @ x - b) / r0 < 1e-8

    def test_breakdown_reported_not_fatal(self):
        # with A = I the Krylov space is one-dimensional: instant breakdown
        A = sp.identity(10, format="csr")
        b = np.ones(10)
        x, rep = fgmres(A, None, b, tol=1e-12)
        assert rep.converged
        assert np.allclose(x, b)

    def test_zero_rhs(self):
        A = random_spd(10, 11)
        x, rep = fgmres(A, None, np.zeros(10))
        assert rep.converged
        assert np.all(x == 0)
        assert len(rep.residual_history) >= 1

    def test_maxit_reached_reports_failure(self):
        A = random_spd(100, 12, shift=0.5)
        b = np.random.default_rng(13).standard_normal(100)
        _, rep = fgmres(A, None, b, restart=5, tol=1e-14, maxit=8)
        assert not rep.converged
        assert rep.iterations == 8


class TestIlu0:
    def test_tridiagonal_is_exact_lu(self):
        n = 30
        A = sp.diags([-np.ones(n - 1), 2.5 * np.ones(n), -np.ones(n - 1)],
                     offsets=(-1, 0, 1), format="csr")
        fact = ilu0(A)
        rng = np.random.default_rng(0)
        b = rng.standard_normal(n)
        x = ilu0_apply(fact, b)
        assert np.linalg.norm(A @ x - b) < 1e-12  # no fill-in: exact solve

    def test_diagonal_matrix(self):
        d = np.array([2.0, 4.0, 8.0])
        fact = ilu0(sp.diags(d).tocsr())
        assert np.allclose(ilu0_apply(fact, np.ones(3)), 1.0 / d)

    def test_factor_shares_sparsity_pattern(self):
        A = random_spd(40, 1)
        A.data[np.abs(A.data) < 0.5] = 0.0
        A = sp.csr_matrix(A + sp.identity(40) * 50)
        A.eliminate_zeros()
        A.sort_indices()
        fact = ilu0(A)
        assert np.array_equal(fact.indptr, A.indptr)
        assert np.array_equal(fact.indices, A.indices)

    def test_no_fill_pattern_equals_exact_lu(self):
        # arrow-free matrix whose exact LU has no fill: block diagonal
        blocks = [random_spd(5, s).toarray() for s in range(3)]
        A = sp.block_diag(blocks, format="csr")
        fact = ilu0(A)
        lu = spla.splu(sp.csc_matrix(A), permc_spec="NATURAL",
                       diag_pivot_thresh=0.0)
        b = np.random.default_rng(3).standard_normal(15)
        assert np.max(np.abs(ilu0_apply(fact, b) - lu.solve(b))) < 1e-14

    def test_zero_pivot_names_row(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(ValueError, match="row 1"):
            ilu0(A)

    def test_missing_diagonal_rejected(self):
        A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        A.eliminate_zeros()
        with pytest.raises(ValueError, match="diagonal"):
            ilu0(A)

    def test_preconditions_reduced_problem(self):
        # coupling makes the reduced operator the hard case ILU is for
        from mdprec.assembly import assemble_coupled_system, reduced_operator
        from mdprec.geometry import GraphFamilySpec, generate_graph

        grid = StructuredGrid(13)
        graph = generate_graph(GraphFamilySpec(n_branches=30), 100)
        C = reduced_operator(assemble_coupled_system(grid, graph,
                                                     PhysicalParams()))
        b = np.random.default_rng(4).standard_normal(grid.num_nodes)
        b /= np.linalg.norm(b)
        _, rep_none = fgmres(C, None, b, tol=1e-6, maxit=2000)
        _, rep_ilu = fgmres(C, IluPreconditioner(C), b, tol=1e-6, maxit=2000)
        assert rep_ilu.converged
        assert rep_ilu.iterations * 5 <= rep_none.iterations


class TestJacobi:
    def test_diagonal_exact_in_one_sweep(self):
        A = sp.diags([2.0, 3.0, 4.0]).tocsr()
        r = np.array([2.0, 6.0, 12.0])
        x = jacobi_smooth(A, r, np.zeros(3), maxit=1, omega=1.0)
        assert np.allclose(x, [1.0, 2.0, 3.0])

    def test_omega_zero_is_identity(self):
        A = sp.diags([2.0, 3.0]).tocsr()
        x0 = np.array([5.0, 7.0])
        assert np.array_equal(jacobi_smooth(A, np.ones(2), x0, 3, omega=0.0), x0)

    def test_zero_diagonal_rejected(self):
        A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 2.0]]))
        with pytest.raises(ValueError, match="diagonal"):
            jacobi_smooth(A, np.ones(2), np.zeros(2), 1)

    def test_high_mode_damping_factor(self):
        # eigen-decomposition oracle on the 1D Dirichlet Laplacian
        n = 32
        h = 1.0 / (n + 1)
        A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)],
                     offsets=(-1, 0, 1), format="csr") / h**2
        evals, evecs = np.linalg.eigh(A.toarray())
        v = evecs[:, -1]  # highest-frequency mode
        omega = 2.0 / 3.0
        predicted = 1.0 - omega * evals[-1] * h**2 / 2.0
        x1 = jacobi_smooth(A, np.zeros(n), v, maxit=1, omega=omega)
        measured = (x1 @ v) / (v @ v)
        assert measured == pytest.approx(predicted, rel=0.05)
        assert abs(measured) == pytest.approx(1.0 / 3.0, rel=0.05)


class TestGmg:
    def laplacian(self, n):
        grid = StructuredGrid(n)
        return grid, assemble_3d(grid, PhysicalParams(k_omega=1.0,
                                                      sigma_omega=1.0))

    def test_zero_residual_maps_to_zero(self):
        grid, A = self.laplacian(9)
        hier = gmg_build(grid, A, 3)
        z = gmg_vcycle(hier, np.zeros(grid.num_nodes))
        assert np.all(z == 0)

    def test_builder_callable(self):
        grid = StructuredGrid(5)
        hier = gmg_build(grid, lambda g: assemble_3d(g, PhysicalParams()), 2)
        assert len(hier.matrices) == 2
        assert hier.grid_sizes == [5, 3]

    def test_non_coarsenable_grid_rejected(self):
        grid, A = self.laplacian(6)
        with pytest.raises(ValueError, match="coarsenable"):
            gmg_build(grid, A, 2)

    def test_coarsest_floor_enforced(self):
        grid, A = self.laplacian(5)
        with pytest.raises(ValueError, match="coarsenable"):
            gmg_build(grid, A, 3)  # 5 -> 3 -> would be 2

    def test_prolongation_partition_of_unity(self):
        P = prolongation_3d(3)
        assert np.allclose(P @ np.ones(27), 1.0)

    def test_galerkin_coarse_operator(self):
        grid, A = self.laplacian(9)
        hier = gmg_build(grid, A, 2)
        P = hier.prolongs[0]
        assert abs(hier.matrices[1] - P.T @ A @ P).max() < 1e-15

    def test_iteration_count_grid_independent(self):
        # the textbook multigrid property, checked between 17^3 and 33^3
        counts = []
        for n in (17, 33):
            grid, A = self.laplacian(n)
            hier = gmg_build(grid, A, 3 if n == 17 else 4)
            precond = GmgPreconditioner(hier, cycles=1)
            b = np.random.default_rng(0).standard_normal(grid.num_nodes)
            _, rep = fgmres(A, precond, b, restart=20, tol=1e-8, maxit=200)
            assert rep.converged
            counts.append(rep.iterations)
        assert abs(counts[0] - counts[1]) <= 2

    def test_more_cycles_beat_ilu(self):
        # the AMG(10)-vs-ILU ordering of the baselines, at a small size
        grid = StructuredGrid(9)
        A = assemble_3d(grid, PhysicalParams())
        b = np.random.default_rng(1).standard_normal(grid.num_nodes)
        hier = gmg_build(grid, A, 2)
        _, rep_gmg = fgmres(A, GmgPreconditioner(hier, cycles=10), b, tol=1e-6)
        _, rep_ilu = fgmres(A, IluPreconditioner(A), b, tol=1e-6)
        assert rep_gmg.iterations < rep_ilu.iterations


class TestPreconditionerContract:
    def test_callable_and_class_agree(self):
        A = random_spd(30, 2)
        fact = ilu0(A)

        class Wrap(Preconditioner):
            def apply(self, r):
                return ilu0_apply(fact, r)

        b = np.random.default_rng(3).standard_normal(30)
        x1, _ = fgmres(A, Wrap(), b, tol=1e-10)
        x2, _ = fgmres(A, lambda r: ilu0_apply(fact, r), b, tol=1e-10)
        assert np.allclose(x1, x2)

    def test_bad_preconditioner_type_rejected(self):
        A = random_spd(5, 0)
        with pytest.raises(TypeError):
            fgmres(A, "nope", np.ones(5))
