"""Spectral diagnostics for operators and training vectors.

The discrete Fourier transform is evaluated directly (separable,
per-axis matrix products, O(n^4)): the grids in play are awkward FFT
sizes and the analysis is offline, so exactness and testability win.
Near-null vectors of the problem matrices come from Lanczos with full
reorthogonalization on the shifted normal operator ``c*I - A^T A``,
whose top eigenpairs are the smallest singular triplets of ``A``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import DistanceField, StructuredGrid


@dataclass(frozen=True)
class SpectrumResult:
    """Complex DFT coefficients of a grid vector and their magnitude."""

    coefficients: np.ndarray      # complex, (n, n, n)
    magnitude: np.ndarray         # |coefficients|
    centered: bool


def dft3(v: np.ndarray, centered: bool = False) -> SpectrumResult:
    """Separable direct 3D DFT of a grid vector or one-channel tensor.

    Unnormalized forward transform (sum of ``exp(-2πi k·n/N)`` terms);
    the centered variant rotates the axes so the zero frequency sits at
    the array center, leaving magnitudes untouched.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        n = round(v.shape[0] ** (1 / 3))
        if n**3 != v.shape[0]:
            raise ValueError("flat input must have a cubic length")
        v = v.reshape(n, n, n)
    elif v.ndim == 4 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 3 or len(set(v.shape)) != 1:
        raise ValueError(f"need a cubic spatial shape, got {v.shape}")
    n = v.shape[0]
    k = np.arange(n)
    dft_matrix = np.exp(-2j * np.pi * np.outer(k, k) / n)
    out = np.tensordot(dft_matrix, v, axes=([1], [0]))
    out = np.tensordot(dft_matrix, out, axes=([1], [1])).transpose(1, 0, 2)
    out = np.tensordot(dft_matrix, out, axes=([1], [2])).transpose(1, 2, 0)
    if centered:
        out = np.roll(out, (n // 2, n // 2, n // 2), axis=(0, 1, 2))
    return SpectrumResult(out, np.abs(out), centered)


def centered_wavenumbers(n: int) -> np.ndarray:
    """Frequency index along one axis of a centered spectrum."""
    return np.arange(n) - n // 2


def shell_energy(spectrum: SpectrumResult, n_bins: int = 4) -> np.ndarray:
    """Energy fraction per radial frequency shell (equal-width bins)."""
    if not spectrum.centered:
        raise ValueError("shell statistics need a centered spectrum")
    n = spectrum.magnitude.shape[0]
    k = centered_wavenumbers(n)
    kk = np.sqrt(sum(a.astype(float)**2
                     for a in np.meshgrid(k, k, k, indexing="ij")))
    edges = np.linspace(0.0, kk.max() * (1 + 1e-12), n_bins + 1)
    energy = spectrum.magnitude**2
    total = energy.sum()
    out = np.empty(n_bins)
    for i in range(n_bins):
        mask = (kk >= edges[i]) & (kk < edges[i + 1])
        out[i] = energy[mask].sum() / total
    return out


def shell_mean_magnitude(spectrum: SpectrumResult,
                         min_members: int = 8) -> np.ndarray:
    """Mean magnitude over unit-width radial shells with enough members."""
    if not spectrum.centered:
        raise ValueError("shell statistics need a centered spectrum")
    n = spectrum.magnitude.shape[0]
    k = centered_wavenumbers(n)
    kk = np.sqrt(sum(a.astype(float)**2
                     for a in np.meshgrid(k, k, k, indexing="ij")))
    shells = np.floor(kk).astype(int)
    means = []
    for s in range(shells.max() + 1):
        mask = shells == s
        if mask.sum() >= min_members:
            means.append(spectrum.magnitude[mask].mean())
    return np.array(means)


@dataclass
class SvdTriplets:
    """Smallest singular triplets ``(sigma, u, v)`` in ascending order."""

    sigmas: np.ndarray            # ascending
    left: np.ndarray              # (m, count)
    right: np.ndarray             # (n, count), orthonormal columns
    converged: bool


def _power_iteration_norm(A, seed: int = 0, iters: int = 60) -> float:
    """Power-iteration estimate of the largest singular value."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        sigma2 = np.linalg.norm(y)
        if sigma2 == 0.0:
            return 0.0
        x = y / sigma2
    return math.sqrt(sigma2)


def smallest_singular_triplets(A, count: int, tol: float = 1e-8,
                               max_iterations: int | None = None,
                               seed: int = 0) -> SvdTriplets:
    """Lanczos with full reorthogonalization targeting the smallest sigmas.

    Runs on the shifted normal operator ``c*I - A^T A`` with ``c`` just
    above the power-iteration estimate of ``sigma_max**2``, so the wanted
    triplets surface as the top Ritz pairs.  Results are flagged (not
    raised) if residuals miss ``tol * ||A||`` within the budget.
    """
    if count > 10:
        raise ValueError("at most 10 triplets supported")
    A = sp.csr_matrix(A)
    n = A.shape[1]
    count = min(count, n)
    sigma_max = _power_iteration_norm(A, seed)
    if sigma_max == 0.0:
        eye = np.eye(n, A.shape[0])
        return SvdTriplets(np.zeros(count), eye[:, :count].T.copy().T,
                           np.eye(n)[:, :count], True)
    c = 1.01 * sigma_max**2
    budget = max_iterations if max_iterations is not None \
        else min(n, max(12 * count, 150))
    budget = min(budget, n)

    rng = np.random.default_rng(seed + 1)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    Q = [q]
    alphas, betas = [], []
    for j in range(budget):
        w = c * Q[j] - A.T @ (A @ Q[j])
        alphas.append(Q[j] @ w)
        w = w - alphas[j] * Q[j]
        if j > 0:
            w = w - betas[j - 1] * Q[j - 1]
        for q_prev in Q:  # full reorthogonalization
            w -= (q_prev @ w) * q_prev
        beta = np.linalg.norm(w)
        if beta < 1e-13 * c:
            break
        if j < budget - 1:
            betas.append(beta)
            Q.append(w / beta)

    T = np.diag(alphas)
    for i, b in enumerate(betas[:len(alphas) - 1]):
        T[i, i + 1] = T[i + 1, i] = b
    evals, evecs = np.linalg.eigh(T)
    order = np.argsort(evals)[::-1][:count]      # top of shifted operator
    Qm = np.column_stack(Q[:len(alphas)])
    right = Qm @ evecs[:, order]
    sig2 = np.maximum(c - evals[order], 0.0)
    sigmas = np.sqrt(sig2)

    right, _ = np.linalg.qr(right)
    # sigma from the Rayleigh quotient of each Ritz vector; convergence is
    # judged by the two-sided residual A^T u - sigma v (the one-sided
    # A v - sigma u vanishes by construction of u)
    sigmas = np.array([np.linalg.norm(A @ right[:, i])
                       for i in range(right.shape[1])])
    asc = np.argsort(sigmas)
    sigmas = sigmas[asc]
    right = right[:, asc]
    left = np.empty((A.shape[0], len(sigmas)))
    ok = True
    for i in range(len(sigmas)):
        av = A @ right[:, i]
        if sigmas[i] > tol * sigma_max:
            left[:, i] = av / sigmas[i]
            resid = np.linalg.norm(A.T @ left[:, i] - sigmas[i] * right[:, i])
        else:
            left[:, i] = right[:, i] if A.shape[0] == A.shape[1] \
                else np.eye(A.shape[0])[:, 0]
            resid = np.linalg.norm(av)
        if resid > tol * sigma_max:
            ok = False
    if not ok:
        warnings.warn("partial SVD did not reach the residual tolerance; "
                      "results flagged as unconverged")
    return SvdTriplets(sigmas, left, right, ok)


# ---------------------------------------------------------------------------
# the six-column spectral report

@dataclass
class SpectrumReport:
    """Log-magnitude cross-sections, one 2D array per report column."""

    columns: dict                 # name -> (n, n) array
    grid: StructuredGrid


def _cross_section(vec: np.ndarray) -> np.ndarray:
    """Centered k2-k3 magnitude slice at k1 = 0 (log10)."""
    spec = dft3(vec, centered=True)
    n = spec.magnitude.shape[0]
    return np.log10(spec.magnitude[n // 2] + 1e-300)


def _mean_cross_section(vectors) -> np.ndarray:
    mags = []
    for v in vectors:
        spec = dft3(v, centered=True)
        mags.append(spec.magnitude[spec.magnitude.shape[0] // 2])
    return np.log10(np.mean(mags, axis=0) + 1e-300)


def kernel_spectrum_report(system, rhs: np.ndarray, krylov_set: list,
                           random_set: list, n_triplets: int = 3,
                           svd_budget: int | None = None) -> SpectrumReport:
    """Frequency-content summary of operators versus training vectors.

    Columns: near-null right vectors of the 3D stiffness block, of the
    weighted coupling mass block, and of the reduced operator; then the
    normalized physics right-hand side, the Krylov augmentation set and
    the random augmentation set.
    """
    from .assembly import reduced_operator

    w = system.params.coupling_weight
    mats = {
        "stiffness_nullspace": system.K00,
        "coupling_nullspace": (w * system.M00).tocsr(),
        "reduced_nullspace": reduced_operator(system),
    }
    columns = {}
    for name, mat in mats.items():
        trip = smallest_singular_triplets(mat, n_triplets,
                                          max_iterations=svd_budget)
        columns[name] = _mean_cross_section(
            [trip.right[:, i] for i in range(trip.right.shape[1])])
    columns["physics_rhs"] = _cross_section(rhs / np.linalg.norm(rhs))
    if krylov_set:
        columns["krylov_augmentation"] = _mean_cross_section(krylov_set)
    if random_set:
        columns["random_augmentation"] = _mean_cross_section(random_set)
    return SpectrumReport(columns, system.grid)


def write_spectrum_report(report: SpectrumReport, outdir) -> list:
    """One CSV grid per column: rows k2, columns k3, log10 magnitudes."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ks = centered_wavenumbers(report.grid.n)
    written = []
    for name, grid_vals in report.columns.items():
        path = outdir / f"spectrum_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k2_over_k3"] + [str(k) for k in ks])
            for i, k2 in enumerate(ks):
                writer.writerow([str(k2)] + [f"{x:.12g}"
                                             for x in grid_vals[i]])
        written.append(path)
    return written
