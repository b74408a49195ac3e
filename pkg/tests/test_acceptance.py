"""Acceptance suite: one test per criterion, each printing PASS/FAIL.

The preconditioning criteria share desk-scale trainings (13^3 grid, 30
training graphs plus a 20% validation split, 60 epochs) through
module-scoped fixtures, so the suite trains five networks once: the
random-augmented model for three seeds plus Krylov-augmented and
unaugmented variants for the ordering, ablation and smoothing checks.
"""

import time

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mdprec.analysis import dft3, shell_energy, shell_mean_magnitude, \
    smallest_singular_triplets
from mdprec.assembly import (PhysicalParams, assemble_3d, assemble_load_3d,
                             assemble_coupled_system, full_operator, full_rhs,
                             l2_error_3d, reduced_operator)
from mdprec.geometry import Graph1D, StructuredGrid, distance_field
from mdprec.harness import CoupledStrategy, sample_graphs, solve_coupled
from mdprec.krylov import (ExactPreconditioner, GmgPreconditioner,
                           IluPreconditioner, fgmres, gmg_build)
from mdprec.neural import (conv3d, conv3d_adjoint, concat_channels,
                           init_unet_params, maxpool3d, maxpool3d_adjoint,
                           split_channels, transposed_conv3d,
                           transposed_conv3d_adjoint, unet_backward,
                           unet_forward)
from mdprec.training import (AugmentationSpec, NeuralPreconditioner,
                             TrainConfig, apply_batched, apply_neural,
                             augment_krylov, augment_random, build_dataset,
                             compute_alpha, generate_rhs, risk, train)

PARAMS = PhysicalParams()
GRID13 = StructuredGrid(13)


def report(num, description, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] criterion {num}: {description} {detail}")
    assert ok, f"criterion {num} failed: {description} {detail}"


def prep_tests(grid, count, seed):
    cases = []
    for graph in sample_graphs(count, seed):
        system = assemble_coupled_system(grid, graph, PARAMS)
        C = reduced_operator(system)
        b = generate_rhs(system)
        cases.append((C, b / np.linalg.norm(b), distance_field(graph, grid)))
    return cases


def mean_iterations(cases, factory, maxit=1000):
    iters, converged = [], []
    for C, b, dfield in cases:
        _, rep = fgmres(C, factory(C, dfield), b, restart=20, tol=1e-6,
                        maxit=maxit)
        iters.append(rep.iterations)
        converged.append(rep.converged)
    return float(np.mean(iters)), all(converged), iters


@pytest.fixture(scope="module")
def test_cases_13():
    return prep_tests(GRID13, 20, 100_000)


@pytest.fixture(scope="module")
def unprec_13(test_cases_13):
    mean, ok, _ = mean_iterations(test_cases_13, lambda C, d: None)
    assert ok
    return mean


@pytest.fixture(scope="module")
def desk_models():
    """Five desk-scale trainings: hf for three seeds, kry and none."""
    models = {}
    for seed in (0, 1, 2):
        t0 = time.time()
        graphs = sample_graphs(38, seed)
        ds = build_dataset(GRID13, graphs, PARAMS,
                           AugmentationSpec("random", 4),
                           val_fraction=0.2, seed=seed)
        params, history = train(ds, TrainConfig(epochs=60, seed=seed))
        models[f"hf{seed}"] = {"params": params, "history": history,
                               "minutes": (time.time() - t0) / 60}
        print(f"trained hf seed {seed}: {models[f'hf{seed}']['minutes']:.1f} "
              f"min, loss {history[0][0]:.3f} -> {history[-1][0]:.4f}")
    for mode, label in (("krylov", "kry"), ("none", "none")):
        graphs = sample_graphs(38, 0)
        ds = build_dataset(GRID13, graphs, PARAMS, AugmentationSpec(mode, 4),
                           val_fraction=0.2, seed=0)
        params, history = train(ds, TrainConfig(
            epochs=60, seed=0, augmentation=AugmentationSpec(mode, 4)))
        models[label] = {"params": params, "history": history}
        print(f"trained {label}: loss {history[0][0]:.3f} -> "
              f"{history[-1][0]:.4f}")
    return models


@pytest.fixture(scope="module")
def model_means(desk_models, test_cases_13):
    means = {}
    for label in ("hf0", "hf1", "hf2", "kry", "none"):
        params = desk_models[label]["params"]
        means[label], _, _ = mean_iterations(
            test_cases_13, lambda C, d: NeuralPreconditioner(params, d))
        print(f"mean iterations [{label}]: {means[label]:.1f}")
    return means


# --------------------------------------------------------------------------
# criterion 1: gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0

    def fd(f, arr, idx, h=1e-5):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        return (fp - fm) / (2 * h)

    def check(f, grad, arrs, probes=4):
        # probes whose finite difference is step-dependent straddle a ReLU
        # or pooling kink (the loss is only piecewise smooth); those points
        # are not differentiable, so they are redrawn rather than compared
        nonlocal worst
        for arr, g in arrs:
            done = 0
            for _ in range(probes * 6):
                if done == probes:
                    break
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                est = fd(f, arr, idx)
                est_half = fd(f, arr, idx, h=0.5e-5)
                scale = max(abs(est), abs(g[idx]), 1e-8)
                if abs(est - est_half) > 1e-3 * scale:
                    continue
                done += 1
                worst = max(worst, abs(est - g[idx]) / scale)
            assert done == probes, "too many probes landed on kinks"

    # conv3d
    x = rng.standard_normal((2, 5, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    bias = rng.standard_normal(3)
    t = rng.standard_normal((3, 5, 5, 5))
    gx, gk, gb = conv3d_adjoint(x, k, t)
    check(lambda: np.sum(conv3d(x, k, bias) * t), None,
          [(x, gx), (k, gk), (bias, gb)])

    # transposed conv
    xt = rng.standard_normal((2, 4, 4, 4))
    kt = rng.standard_normal((2, 3, 2, 2, 2))
    bt = rng.standard_normal(3)
    tt = rng.standard_normal((3, 9, 9, 9))
    gx, gk, gb = transposed_conv3d_adjoint(xt, kt, tt, output_padding=1)
    check(lambda: np.sum(transposed_conv3d(xt, kt, output_padding=1,
                                           bias=bt) * tt), None,
          [(xt, gx), (kt, gk), (bt, gb)])

    # max pooling
    xp = rng.standard_normal((2, 6, 6, 6))
    yp, arg = maxpool3d(xp)
    tp = rng.standard_normal(yp.shape)
    gxp = maxpool3d_adjoint(arg, xp.shape, tp)

    def pool_loss():
        out, _ = maxpool3d(xp)
        return np.sum(out * tp)

    check(pool_loss, None, [(xp, gxp)], probes=8)

    # channel concatenation
    a = rng.standard_normal((2, 4, 4, 4))
    b2 = rng.standard_normal((3, 4, 4, 4))
    tc = rng.standard_normal((5, 4, 4, 4))
    ga, gb2 = split_channels(tc, 2)
    check(lambda: np.sum(concat_channels(a, b2) * tc), None,
          [(a, ga), (b2, gb2)], probes=3)

    # full training loss through the network and one sparse product
    grid = StructuredGrid(9)
    graph = sample_graphs(1, 7)[0]
    ds = build_dataset(grid, [graph], PARAMS, AugmentationSpec("random", 2),
                       val_fraction=0.0, seed=0)
    alpha = compute_alpha(ds)
    params = init_unet_params(0)
    for key, arr in params.arrays():  # generic, kink-free point
        params.set_array(key, arr + 0.05 * rng.standard_normal(arr.shape))
    pairs = ds.train_samples()

    def loss():
        return risk(params, ds, pairs, alpha)

    # analytic gradient of the mean risk, via the network adjoint
    grads_total = None
    for rec_idx, sample in pairs:
        rec = ds.records[rec_idx]
        xin = np.stack([sample.vector.reshape(9, 9, 9),
                        rec.dfield.values.reshape(9, 9, 9)])
        ctx = {}
        u = unet_forward(params, xin, ctx).reshape(-1)
        resid = sample.vector - (rec.operator @ u) / alpha
        gout = -(2.0 / (alpha * len(pairs))) * (rec.operator.T @ resid)
        grads = unet_backward(params, ctx, gout.reshape(1, 9, 9, 9))
        grads_total = grads if grads_total is None else \
            {kk: grads_total[kk] + grads[kk] for kk in grads}
    for key in ("enc1a.kernel", "enc2.kernel", "bottleneck.kernel",
                "up1.kernel", "dec1.kernel", "head2.kernel", "dec2.bias"):
        name, part = key.split(".")
        check(loss, None, [(params.blocks[name][part], grads_total[key])],
              probes=2)

    elapsed = time.time() - t0
    report(1, "gradient suite, max FD relative error < 1e-4",
           worst < 1e-4 and elapsed < 60,
           f"(worst {worst:.2e}, {elapsed:.0f}s)")


# --------------------------------------------------------------------------
# criterion 2: oracle equivalences

def test_criterion_2_oracle_equivalence():
    from test_analysis import naive_dft
    from test_assembly import GAUSS, oracle_trilinear

    rng = np.random.default_rng(1)
    details = []

    # dense assembly oracle at 9^3 (coupling blocks, single segment)
    grid = StructuredGrid(9)
    graph = Graph1D(np.array([[0.31, 0.42, 0.11], [0.58, 0.63, 0.87]]),
                    np.array([[0, 1]]), 1e-3, (0,))
    system = assemble_coupled_system(grid, graph, PARAMS)
    mesh = system.graph_mesh
    n3, n1 = grid.num_nodes, mesh.num_nodes
    M00 = np.zeros((n3, n3))
    M01 = np.zeros((n3, n1))
    for (na, nb), length in zip(mesh.elements, mesh.element_lengths):
        pa, pb = mesh.coords[na], mesh.coords[nb]
        for tq in GAUSS:
            w = length / 2.0
            tri = oracle_trilinear(grid, pa + tq * (pb - pa))
            hat = np.zeros(n1)
            hat[na], hat[nb] = 1 - tq, tq
            M00 += w * np.outer(tri, tri)
            M01 -= w * np.outer(tri, hat)
    M01[:, list(system.dirichlet_nodes)] = 0.0
    err_asm = max(np.max(np.abs(system.M00.toarray() - M00)),
                  np.max(np.abs(system.M01.toarray() - M01)))
    details.append(f"assembly {err_asm:.1e}")

    # DFT against the direct triple sum at 9^3
    v = rng.standard_normal(9**3)
    err_dft = np.max(np.abs(dft3(v).coefficients - naive_dft(v)))
    details.append(f"dft {err_dft:.1e}")

    # partial SVD against the dense decomposition at 200x200
    dense = rng.standard_normal((200, 200))
    dense[rng.random((200, 200)) < 0.9] = 0.0
    dense += 0.5 * np.eye(200)
    trip = smallest_singular_triplets(sp.csr_matrix(dense), 5,
                                      max_iterations=200)
    err_svd = np.max(np.abs(trip.sigmas
                            - np.linalg.svd(dense,
                                            compute_uv=False)[::-1][:5]))
    details.append(f"svd {err_svd:.1e}")

    # batched network application against the serial loop
    params = init_unet_params(3)
    for key, arr in params.arrays():
        params.set_array(key, arr + 0.05 * rng.standard_normal(arr.shape))
    dfield = distance_field(graph, grid)
    rs = [rng.standard_normal(grid.num_nodes) for _ in range(6)]
    batched = apply_batched(params, rs, [dfield] * 6)
    err_batch = max(np.max(np.abs(z - apply_neural(params, r, dfield)))
                    for r, z in zip(rs, batched))
    details.append(f"batched {err_batch:.1e}")

    report(2, "oracle equivalences (assembly/DFT/SVD/batched)",
           err_asm < 1e-12 and err_dft < 1e-10 and err_svd < 1e-8
           and err_batch < 1e-12, "(" + ", ".join(details) + ")")


# --------------------------------------------------------------------------
# criterion 3: solver correctness

def test_criterion_3_solver_correctness():
    rng = np.random.default_rng(2)
    dense = rng.standard_normal((100, 100))
    A = sp.csr_matrix(dense @ dense.T + 100 * np.eye(100))
    b = rng.standard_normal(100)
    x, rep = fgmres(A, ExactPreconditioner(A), b, tol=1e-10)
    ok_exact = rep.converged and rep.iterations <= 2
    true_res = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
    ok_resid = abs(true_res - rep.rel_residual) < 1e-10

    grid = StructuredGrid(9)
    graph = Graph1D(np.array([[0.31, 0.42, 0.11], [0.58, 0.63, 0.87]]),
                    np.array([[0, 1]]), 1e-3, (0,))
    system = assemble_coupled_system(grid, graph, PARAMS)
    u3d, u1d, rep_c = solve_coupled(system, CoupledStrategy(
        tol=1e-12, maxit=50, one_d="schur", three_d="direct"))
    x_dense = np.linalg.solve(full_operator(system).toarray(),
                              full_rhs(system))
    ok_coupled = (rep_c.converged and rep_c.iterations <= 3
                  and np.max(np.abs(u3d - x_dense[:system.n3])) < 1e-9)

    report(3, "solver correctness (exact precond <=2, coupled exact <=3, "
              "residual reporting)",
           ok_exact and ok_resid and ok_coupled,
           f"(exact {rep.iterations} it, coupled {rep_c.iterations} it, "
           f"residual gap {abs(true_res - rep.rel_residual):.1e})")


# --------------------------------------------------------------------------
# criterion 4: FEM convergence order

def test_criterion_4_fem_convergence_order():
    t0 = time.time()
    k, sigma = 1e-3, 1e-3

    def exact(x, y, z):
        return np.cos(np.pi * x) * np.cos(np.pi * y) * np.cos(np.pi * z)

    def forcing(x, y, z):
        return (3 * np.pi**2 * k + sigma) * exact(x, y, z)

    errors = []
    for n in (9, 17, 33):
        grid = StructuredGrid(n)
        A = assemble_3d(grid, PhysicalParams(k_omega=k, sigma_omega=sigma))
        rhs = assemble_load_3d(grid, forcing)
        hier = gmg_build(grid, A, {9: 2, 17: 3, 33: 4}[n])
        u, rep = fgmres(A, GmgPreconditioner(hier, cycles=2), rhs,
                        restart=20, tol=1e-11, maxit=400)
        assert rep.converged
        errors.append(l2_error_3d(grid, u, exact))
    rates = [np.log2(errors[i] / errors[i + 1]) for i in range(2)]
    elapsed = time.time() - t0
    ok = all(1.85 <= r <= 2.15 for r in rates) and elapsed < 120
    report(4, "manufactured-solution order 2.0 +/- 0.15 over 9/17/33",
           ok, f"(rates {rates[0]:.3f}, {rates[1]:.3f}, {elapsed:.0f}s)")


# --------------------------------------------------------------------------
# criteria 5-9: trained preconditioner behavior at desk scale

def test_criterion_5_preconditioning_effect(desk_models, model_means,
                                            unprec_13):
    ok = True
    details = []
    for seed in (0, 1, 2):
        entry = desk_models[f"hf{seed}"]
        ratio = model_means[f"hf{seed}"] / unprec_13
        history = entry["history"]
        loss_halved = history[-1][0] < 0.5 * history[0][0]
        in_budget = entry["minutes"] < 30
        ok = ok and ratio <= 0.5 and loss_halved and in_budget
        details.append(f"seed{seed}: ratio {ratio:.3f}, "
                       f"{entry['minutes']:.0f} min")
    report(5, "random-augmented model halves unpreconditioned iterations "
              "(3 seeds)", ok,
           f"(unprec {unprec_13:.1f}; " + "; ".join(details) + ")")


def test_criterion_6_augmentation_ordering(model_means, unprec_13):
    hf, kry, none = (model_means["hf0"], model_means["kry"],
                     model_means["none"])
    ok = hf <= 1.1 * kry and kry < none and none < unprec_13
    report(6, "augmentation ordering hf <= kry < none < unpreconditioned",
           ok, f"(hf {hf:.1f}, kry {kry:.1f}, none {none:.1f}, "
               f"unprec {unprec_13:.1f})")


def test_criterion_7_distance_channel_ablation(desk_models, model_means,
                                               test_cases_13):
    params = desk_models["hf0"]["params"]
    ablated, _, _ = mean_iterations(
        test_cases_13,
        lambda C, d: NeuralPreconditioner(params, d, zero_distance=True))
    ok = ablated >= model_means["hf0"]
    report(7, "zeroing the distance channel does not improve the hf model",
           ok, f"(ablated {ablated:.1f} vs full {model_means['hf0']:.1f})")


def test_criterion_8_smoothing_effect(desk_models, model_means,
                                      test_cases_13):
    params = desk_models["none"]["params"]
    smoothed, _, _ = mean_iterations(
        test_cases_13,
        lambda C, d: NeuralPreconditioner(params, d, smoothing=(2, 2 / 3),
                                          C=C))
    ok = smoothed <= 0.75 * model_means["none"]
    report(8, "Jacobi pre/post-smoothing cuts the unaugmented model by 25%",
           ok, f"(smoothed {smoothed:.1f} vs plain {model_means['none']:.1f})")


def test_criterion_9_resolution_transfer(desk_models):
    grid25 = StructuredGrid(25)
    cases = prep_tests(grid25, 20, 200_000)
    unprec, _, _ = mean_iterations(cases, lambda C, d: None, maxit=2000)
    params = desk_models["hf0"]["params"]
    neural, all_conv, iters = mean_iterations(
        cases, lambda C, d: NeuralPreconditioner(params, d), maxit=2000)
    ok = all_conv and neural * 2 <= unprec
    report(9, "13^3-trained model transfers to 25^3 with a 2x speedup",
           ok, f"(unprec {unprec:.1f}, neural {neural:.1f}, "
               f"all converged {all_conv})")


# --------------------------------------------------------------------------
# criterion 10: classical baselines

def test_criterion_10_classical_baselines(test_cases_13, unprec_13):
    details = []
    ok = True
    gmg_means = {}
    for n, cases, unprec in ((13, test_cases_13, unprec_13),
                             (21, None, None)):
        grid = StructuredGrid(n)
        if cases is None:
            cases = prep_tests(grid, 20, 300_000)
            unprec, _, _ = mean_iterations(cases, lambda C, d: None)
        ilu, ilu_conv, _ = mean_iterations(cases,
                                           lambda C, d: IluPreconditioner(C))
        gmg, gmg_conv, _ = mean_iterations(
            cases,
            lambda C, d: GmgPreconditioner(gmg_build(grid, C, 3), cycles=10))
        gmg_means[n] = gmg
        ok = ok and ilu_conv and gmg_conv and ilu <= 0.3 * unprec
        details.append(f"n={n}: unprec {unprec:.1f}, ilu {ilu:.1f}, "
                       f"gmg10 {gmg:.1f}")
    ratio = max(gmg_means[21], gmg_means[13]) / min(gmg_means[21],
                                                    gmg_means[13])
    ok = ok and ratio <= 1.5
    report(10, "ILU <= 0.3x unpreconditioned; GMG(10) grid-independent",
           ok, "(" + "; ".join(details) + f"; gmg ratio {ratio:.2f})")


# --------------------------------------------------------------------------
# criterion 11: spectral properties

def test_criterion_11_spectral_properties():
    rng = np.random.default_rng(4)
    v = rng.standard_normal(9**3)
    spec = dft3(v)
    parseval = abs((spec.magnitude**2).sum() - 9**3 * (v**2).sum()) \
        / (9**3 * (v**2).sum())

    cvs = []
    for seed in range(4):
        r = augment_random(13**3, 1, seed)[0]
        means = shell_mean_magnitude(dft3(r, centered=True))
        cvs.append(np.std(means) / np.mean(means))

    grid = StructuredGrid(9)
    fracs = []
    for i, graph in enumerate(sample_graphs(6, 700)):
        system = assemble_coupled_system(grid, graph, PARAMS)
        b = generate_rhs(system)
        fracs.append(shell_energy(dft3(b / np.linalg.norm(b), centered=True),
                                  2)[0])
    ok = parseval < 1e-10 and max(cvs) < 0.2 and np.mean(fracs) > 0.5
    report(11, "Parseval, shell-flat random spectra, low-frequency rhs",
           ok, f"(parseval {parseval:.1e}, max CV {max(cvs):.2f}, "
               f"mean low-shell {np.mean(fracs):.2f})")
