"""Finite-element assembly of the coupled 3D-1D system.

The 3D block uses trilinear Q1 hexahedra on the uniform grid (2x2x2 Gauss
quadrature, exact for Q1 element matrices, homogeneous Neumann so no
boundary rows are touched).  The 1D block lives on the refined graph mesh
with linear elements and 2-point Gauss quadrature; the cross-section area
``pi*eps**2`` weights the 1D stiffness.  Coupling mass blocks are built
from a restriction map that evaluates the 3D basis along the graph
(centerline by default, optionally averaged over a circle of radius eps
normal to the local tangent).  The coupling weight ``2*pi*eps`` is kept
out of the stored mass blocks and applied when operators are formed, so
the blocks themselves are independent of the coupling intensity.

Dirichlet conditions (value 1 on the marked 1D nodes) are imposed by
symmetric elimination: rows and columns zeroed, unit diagonal in the 1D
stiffness, and the lifted load split into a 1D part ``rhs1`` and the
(order-eps) 3D part ``rhs0`` contributed through the coupling column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .geometry import Graph1D, GraphMesh1D, StructuredGrid, refine_graph

_GAUSS_1D = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))


@dataclass(frozen=True)
class PhysicalParams:
    """Coefficients of the coupled problem; all strictly positive."""

    k_omega: float = 1e-3
    sigma_omega: float = 1e-3
    k_lambda: float = 1.0
    epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("k_omega", "sigma_omega", "k_lambda", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def coupling_weight(self) -> float:
        """Perimeter weight of the interface term."""
        return 2.0 * math.pi * self.epsilon


def _q1_reference():
    """Corner offsets, Gauss points and shape values on the unit cell.

    Local corner ``l = dx + 2*dy + 4*dz`` matches the global lexicographic
    node ordering.  Returns (corner offsets (8,3), gauss points (8,3),
    shape values (8 gauss, 8 corners), reference gradients (8,8,3)).
    """
    corners = np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1)
                        for dx in (0, 1)])
    # corners generated z-major; reorder so l = dx + 2 dy + 4 dz
    order = np.argsort(corners[:, 0] + 2 * corners[:, 1] + 4 * corners[:, 2])
    corners = corners[order]
    gauss = np.array([(gx, gy, gz) for gz in _GAUSS_1D for gy in _GAUSS_1D
                      for gx in _GAUSS_1D])
    vals = np.empty((8, 8))
    grads = np.empty((8, 8, 3))
    for g, xi in enumerate(gauss):
        for l, c in enumerate(corners):
            phi = np.where(c == 1, xi, 1.0 - xi)
            dphi = np.where(c == 1, 1.0, -1.0)
            vals[g, l] = phi.prod()
            for ax in range(3):
                grads[g, l, ax] = dphi[ax] * phi[(ax + 1) % 3] * phi[(ax + 2) % 3]
    return corners, gauss, vals, grads


_CORNERS, _GAUSS3, _SHAPE_VALS, _SHAPE_GRADS = _q1_reference()


def q1_element_matrices(h: float) -> tuple:
    """Exact 8x8 stiffness and mass matrices of a Q1 cube cell of side h."""
    w = h**3 / 8.0  # equal Gauss weights times the cell volume
    mass = w * (_SHAPE_VALS.T @ _SHAPE_VALS)
    stiff = np.zeros((8, 8))
    for g in range(8):
        stiff += w / h**2 * (_SHAPE_GRADS[g] @ _SHAPE_GRADS[g].T)
    return stiff, mass


def _cell_bases(grid: StructuredGrid):
    n = grid.n
    c = np.arange(n - 1)
    ck, cj, ci = np.meshgrid(c, c, c, indexing="ij")
    base = (ci + cj * n + ck * n * n).ravel()
    offsets = _CORNERS[:, 0] + _CORNERS[:, 1] * n + _CORNERS[:, 2] * n * n
    return base, offsets


def _assemble_from_element(grid: StructuredGrid, elem: np.ndarray) -> sp.csr_matrix:
    base, off = _cell_bases(grid)
    nodes = base[:, None] + off[None, :]                  # (cells, 8)
    rows = np.repeat(nodes, 8, axis=1).ravel()
    cols = np.tile(nodes, (1, 8)).ravel()
    data = np.tile(elem.ravel(), len(base))
    N = grid.num_nodes
    return sp.coo_matrix((data, (rows, cols)), shape=(N, N)).tocsr()


def stiffness_3d(grid: StructuredGrid) -> sp.csr_matrix:
    stiff, _ = q1_element_matrices(grid.h)
    return _assemble_from_element(grid, stiff)


def mass_3d(grid: StructuredGrid) -> sp.csr_matrix:
    _, mass = q1_element_matrices(grid.h)
    return _assemble_from_element(grid, mass)


def assemble_3d(grid: StructuredGrid, params: PhysicalParams) -> sp.csr_matrix:
    """Symmetric positive definite 3D block: diffusion plus reaction."""
    return (params.k_omega * stiffness_3d(grid)
            + params.sigma_omega * mass_3d(grid)).tocsr()


def assemble_load_3d(grid: StructuredGrid, f) -> np.ndarray:
    """Consistent load vector for a callable ``f(x, y, z)`` (same quadrature)."""
    base, off = _cell_bases(grid)
    nodes = base[:, None] + off[None, :]
    origins = np.column_stack([(base % grid.n),
                               (base // grid.n) % grid.n,
                               base // (grid.n * grid.n)]) * grid.h
    load = np.zeros(grid.num_nodes)
    w = grid.h**3 / 8.0
    for g in range(8):
        pts = origins + grid.h * _GAUSS3[g]
        fv = f(pts[:, 0], pts[:, 1], pts[:, 2])
        np.add.at(load, nodes, w * fv[:, None] * _SHAPE_VALS[g][None, :])
    return load


def l2_error_3d(grid: StructuredGrid, u_h: np.ndarray, u_exact) -> float:
    """Quadrature L2 norm of ``u_h - u_exact`` over the cube."""
    base, off = _cell_bases(grid)
    nodes = base[:, None] + off[None, :]
    origins = np.column_stack([(base % grid.n),
                               (base // grid.n) % grid.n,
                               base // (grid.n * grid.n)]) * grid.h
    acc = 0.0
    w = grid.h**3 / 8.0
    for g in range(8):
        pts = origins + grid.h * _GAUSS3[g]
        uh = u_h[nodes] @ _SHAPE_VALS[g]
        acc += w * np.sum((uh - u_exact(pts[:, 0], pts[:, 1], pts[:, 2]))**2)
    return math.sqrt(acc)


def trilinear_eval_matrix(grid: StructuredGrid, points: np.ndarray) -> sp.csr_matrix:
    """Sparse evaluation of the Q1 basis at arbitrary points in the cube.

    Each row holds the 8 trilinear weights of the cell containing the
    point and sums to 1.
    """
    points = np.atleast_2d(points)
    if np.any(points < -1e-12) or np.any(points > 1 + 1e-12):
        bad = points[np.any((points < -1e-12) | (points > 1 + 1e-12), axis=1)][0]
        raise ValueError(f"evaluation point {bad} outside the unit cube")
    n, h = grid.n, grid.h
    scaled = np.clip(points, 0.0, 1.0) / h
    cell = np.minimum(scaled.astype(np.int64), n - 2)
    xi = scaled - cell
    base = cell[:, 0] + cell[:, 1] * n + cell[:, 2] * n * n
    off = _CORNERS[:, 0] + _CORNERS[:, 1] * n + _CORNERS[:, 2] * n * n
    cols = base[:, None] + off[None, :]
    w = np.ones((len(points), 8))
    for ax in range(3):
        t = xi[:, ax][:, None]
        w *= np.where(_CORNERS[:, ax][None, :] == 1, t, 1.0 - t)
    rows = np.repeat(np.arange(len(points)), 8)
    return sp.csr_matrix((w.ravel(), (rows, cols.ravel())),
                         shape=(len(points), grid.num_nodes))


@dataclass(frozen=True)
class RestrictionMap:
    """Evaluation of the 3D basis at the 1D quadrature points.

    ``matrix`` maps 3D nodal vectors to values at the quadrature points
    (rows sum to 1); ``basis_1d`` does the same for the 1D mesh; the
    ``weights`` are the Gauss weights of the arc-length quadrature.
    """

    matrix: sp.csr_matrix        # (Q, N3)
    basis_1d: sp.csr_matrix      # (Q, N1)
    weights: np.ndarray          # (Q,)
    points: np.ndarray           # (Q, 3) centerline quadrature positions


def build_restriction(grid: StructuredGrid, graph_mesh: GraphMesh1D,
                      n_circle: int = 1, radius: float = 0.0) -> RestrictionMap:
    """Two-point Gauss quadrature along the graph with basis evaluation.

    For ``n_circle == 1`` the 3D basis is evaluated on the centerline; for
    larger values it is averaged over ``n_circle`` points on the circle of
    the given radius normal to the local edge tangent.  Fails if any
    circle point leaves the unit cube.
    """
    if n_circle < 1:
        raise ValueError("n_circle must be at least 1")
    a = graph_mesh.coords[graph_mesh.elements[:, 0]]
    b = graph_mesh.coords[graph_mesh.elements[:, 1]]
    n_elem = len(graph_mesh.elements)
    pts = np.empty((2 * n_elem, 3))
    w = np.empty(2 * n_elem)
    vals1d = np.empty((2 * n_elem, 2))
    for g, t in enumerate(_GAUSS_1D):
        pts[g::2] = a + t * (b - a)
        w[g::2] = graph_mesh.element_lengths / 2.0
        vals1d[g::2, 0] = 1.0 - t
        vals1d[g::2, 1] = t

    if n_circle == 1:
        T = trilinear_eval_matrix(grid, pts)
    else:
        tang = b - a
        tang = tang / np.linalg.norm(tang, axis=1, keepdims=True)
        # interleave tangents to match the g::2 quadrature-point layout
        tang2 = np.empty_like(pts)
        tang2[0::2] = tang
        tang2[1::2] = tang
        e1 = np.cross(tang2, np.eye(3)[np.argmin(np.abs(tang2), axis=1)])
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(tang2, e1)
        T = sp.csr_matrix((2 * n_elem, grid.num_nodes))
        for c in range(n_circle):
            theta = 2 * math.pi * c / n_circle
            ring = pts + radius * (math.cos(theta) * e1 + math.sin(theta) * e2)
            T = T + trilinear_eval_matrix(grid, ring)
        T = (T / n_circle).tocsr()

    rows = np.repeat(np.arange(2 * n_elem), 2)
    cols = np.empty((2 * n_elem, 2), dtype=np.int64)
    cols[0::2] = graph_mesh.elements
    cols[1::2] = graph_mesh.elements
    psi = sp.csr_matrix((vals1d.ravel(), (rows, cols.ravel())),
                        shape=(2 * n_elem, graph_mesh.num_nodes))
    return RestrictionMap(T.tocsr(), psi, w, pts)


def stiffness_1d(graph_mesh: GraphMesh1D) -> sp.csr_matrix:
    """Unweighted 1D stiffness on the graph mesh (linear elements)."""
    n1 = graph_mesh.num_nodes
    e = graph_mesh.elements
    inv = 1.0 / graph_mesh.element_lengths
    rows = np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 0], e[:, 1], e[:, 1], e[:, 0]])
    data = np.concatenate([inv, inv, -inv, -inv])
    return sp.coo_matrix((data, (rows, cols)), shape=(n1, n1)).tocsr()


@dataclass(frozen=True)
class CoupledSystem:
    """Assembled blocks of the coupled system after Dirichlet elimination.

    The full operator is ``blockdiag(K00, K11) + w * [[M00, M01], [M10,
    M11]]`` with ``w = 2*pi*eps``; the right-hand side is ``(rhs0, rhs1)``.
    ``M10`` equals ``M01.T`` exactly and ``K11`` carries unit diagonal
    entries on the eliminated Dirichlet rows.
    """

    grid: StructuredGrid
    graph_mesh: GraphMesh1D
    params: PhysicalParams
    K00: sp.csr_matrix
    K11: sp.csr_matrix
    M00: sp.csr_matrix
    M01: sp.csr_matrix
    M10: sp.csr_matrix
    M11: sp.csr_matrix
    rhs0: np.ndarray
    rhs1: np.ndarray
    dirichlet_nodes: tuple

    @property
    def n3(self) -> int:
        return self.K00.shape[0]

    @property
    def n1(self) -> int:
        return self.K11.shape[0]


def _drop_rows_cols(A: sp.csr_matrix, drop_rows, drop_cols) -> sp.coo_matrix:
    coo = A.tocoo()
    keep = np.ones(len(coo.data), dtype=bool)
    if len(drop_rows):
        keep &= ~np.isin(coo.row, drop_rows)
    if len(drop_cols):
        keep &= ~np.isin(coo.col, drop_cols)
    return sp.coo_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])),
                         shape=A.shape)


def assemble_coupled_system(grid: StructuredGrid, graph: Graph1D,
                            params: PhysicalParams,
                            n_circle: int = 1) -> CoupledSystem:
    """Assemble all blocks of the coupled problem for one graph."""
    if graph.radius != params.epsilon:
        raise ValueError("graph radius and params.epsilon must agree")
    if params.epsilon > grid.h:
        raise ValueError(
            f"coupling radius {params.epsilon} exceeds grid spacing {grid.h}")
    mesh = refine_graph(graph, grid.h)
    rest = build_restriction(grid, mesh, n_circle, radius=params.epsilon)

    K00 = assemble_3d(grid, params)
    area = math.pi * params.epsilon**2
    K11_raw = (params.k_lambda * area) * stiffness_1d(mesh)

    W = sp.diags(rest.weights)
    T, psi = rest.matrix, rest.basis_1d
    M00 = (T.T @ W @ T).tocsr()
    M01_raw = (-(T.T @ W @ psi)).tocsr()
    M11_raw = (psi.T @ W @ psi).tocsr()

    dirichlet = np.array(mesh.dirichlet_nodes, dtype=np.int64)
    w = params.coupling_weight
    ones_d = np.ones(len(dirichlet))

    # lift of the unit Dirichlet values into the load, then symmetric
    # row/column elimination with unit diagonal in K11
    A11_raw = (K11_raw + w * M11_raw).tocsc()
    rhs1 = -np.asarray(A11_raw[:, dirichlet] @ ones_d).ravel()
    rhs0 = -w * np.asarray(M01_raw.tocsc()[:, dirichlet] @ ones_d).ravel()
    rhs1[dirichlet] = 1.0

    K11 = _drop_rows_cols(K11_raw, dirichlet, dirichlet)
    K11 = (K11 + sp.coo_matrix((np.ones(len(dirichlet)),
                                (dirichlet, dirichlet)),
                               shape=K11.shape)).tocsr()
    M11 = _drop_rows_cols(M11_raw, dirichlet, dirichlet).tocsr()
    M01 = _drop_rows_cols(M01_raw, [], dirichlet).tocsr()
    M10 = M01.T.tocsr()

    return CoupledSystem(grid, mesh, params, K00, K11.tocsr(), M00, M01,
                         M10, M11, rhs0, rhs1, tuple(int(d) for d in dirichlet))


def reduced_operator(system: CoupledSystem) -> sp.csr_matrix:
    """The 3D operator left after eliminating the 1D unknowns."""
    return (system.K00 + system.params.coupling_weight * system.M00).tocsr()


def reduced_rhs(system: CoupledSystem, z1: np.ndarray) -> np.ndarray:
    """Forcing induced on the 3D block by a 1D vector ``z1``."""
    z1 = np.asarray(z1, dtype=float)
    if z1.shape != (system.n1,):
        raise ValueError(f"expected a vector of length {system.n1}, "
                         f"got shape {z1.shape}")
    return -system.params.coupling_weight * (system.M01 @ z1)


def one_d_operator(system: CoupledSystem) -> sp.csr_matrix:
    """The 1D sub-block solved during rhs generation and back-substitution."""
    return (system.K11 + system.params.coupling_weight * system.M11).tocsr()


def full_operator(system: CoupledSystem) -> sp.csr_matrix:
    w = system.params.coupling_weight
    return sp.bmat([[system.K00 + w * system.M00, w * system.M01],
                    [w * system.M10, system.K11 + w * system.M11]],
                   format="csr")


def full_rhs(system: CoupledSystem) -> np.ndarray:
    return np.concatenate([system.rhs0, system.rhs1])


def export_matrix(path, A) -> None:
    """MatrixMarket coordinate export (debugging aid)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
