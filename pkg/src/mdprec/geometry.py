"""Embedded 1D graphs in the unit cube and their 3D distance fields.

The geometric objects here feed every other module: a structured grid on
the unit cube, a 1D metric graph embedded in it, the graph refined into a
1D finite-element mesh, and the grid sampling of the graph's Euclidean
distance function.  Grid nodes are always ordered lexicographically,
``index = i + j*n + k*n**2`` for a node at ``(i, j, k) * h``; that single
flattening convention is shared with the tensor layout used by the
convolutional preconditioner.
"""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class GraphGenerationError(RuntimeError):
    """Raised when a branch cannot be placed inside the bounding box."""


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform grid on the unit cube with ``n`` points per edge."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 points per edge, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def num_nodes(self) -> int:
        return self.n**3

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape (n**3, 3), lexicographic order."""
        r = np.arange(self.n) * self.h
        kk, jj, ii = np.meshgrid(r, r, r, indexing="ij")
        return np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])


_FACES = {"x-": (0, 0.0), "x+": (0, 1.0), "y-": (1, 0.0), "y+": (1, 1.0),
          "z-": (2, 0.0), "z+": (2, 1.0)}


@dataclass(frozen=True)
class GraphFamilySpec:
    """Parameters of the random bifurcating-tree family.

    Trees grow from a root placed on one cube face; each tip spawns one or
    two children whose directions turn by at most ``max_turn_deg`` and
    whose lengths decay geometrically.  ``n_branches`` is the exact number
    of edges of the generated graph.
    """

    n_branches: int
    radius: float = 1e-3
    root_face: str = "z-"
    initial_length: float = 0.35
    length_decay: float = 0.85
    max_turn_deg: float = 45.0
    branch_prob: float = 0.7
    min_length: float = 0.02
    bbox: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        if not 1 <= self.n_branches <= 256:
            raise ValueError("n_branches must be between 1 and 256")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.root_face not in _FACES:
            raise ValueError(f"unknown root face {self.root_face!r}")


@dataclass(frozen=True)
class Graph1D:
    """A 1D metric graph embedded in the closed unit cube.

    ``dirichlet_vertices`` are the vertex indices holding the unit
    Dirichlet value of the coupled problem; by construction these are the
    degree-1 vertices lying on the root face.
    """

    vertices: np.ndarray          # (V, 3)
    edges: np.ndarray             # (E, 2) int
    radius: float
    dirichlet_vertices: tuple     # vertex indices, sorted

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64))
        validate_graph(self)

    @property
    def edge_lengths(self) -> np.ndarray:
        a = self.vertices[self.edges[:, 0]]
        b = self.vertices[self.edges[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    @property
    def total_length(self) -> float:
        return float(self.edge_lengths.sum())


def validate_graph(graph: Graph1D) -> None:
    """Check the Graph1D invariants, raising ValueError on violation."""
    v, e = graph.vertices, graph.edges
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError("vertices must have shape (V, 3)")
    if np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
        raise ValueError("all vertices must lie in the closed unit cube")
    if e.ndim != 2 or e.shape[1] != 2:
        raise ValueError("edges must have shape (E, 2)")
    if np.any(e < 0) or np.any(e >= len(v)):
        raise ValueError("edge endpoint out of range")
    if np.any(graph.edge_lengths <= 0):
        raise ValueError("every edge must have positive length")
    if graph.radius <= 0:
        raise ValueError("radius must be positive")
    if len(graph.dirichlet_vertices) == 0:
        raise ValueError("dirichlet_vertices must be non-empty")
    if any(not 0 <= d < len(v) for d in graph.dirichlet_vertices):
        raise ValueError("dirichlet vertex out of range")
    # connectivity, component-wise over vertices that carry edges
    adj = [[] for _ in range(len(v))]
    for a, b in e:
        adj[a].append(b)
        adj[b].append(a)
    used = sorted(set(e.ravel().tolist()))
    if used:
        seen = {used[0]}
        stack = [used[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if not set(used) <= seen:
            raise ValueError("graph edges form more than one connected component")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthonormal_frame(d: np.ndarray) -> tuple:
    """Two unit vectors orthogonal to the unit vector ``d`` (deterministic)."""
    a = np.zeros(3)
    a[np.argmin(np.abs(d))] = 1.0
    e1 = _unit(np.cross(d, a))
    e2 = np.cross(d, e1)
    return e1, e2


def _tilt(d: np.ndarray, theta: float, phi: float) -> np.ndarray:
    e1, e2 = _orthonormal_frame(d)
    return _unit(math.cos(theta) * d + math.sin(theta)
                 * (math.cos(phi) * e1 + math.sin(phi) * e2))


def generate_graph(spec: GraphFamilySpec, seed: int) -> Graph1D:
    """Grow a random bifurcating tree; pure function of ``(spec, seed)``.

    Raises GraphGenerationError if a branch cannot be placed inside the
    bounding box after 100 retries.
    """
    rng = np.random.default_rng(seed)
    lo = np.array(spec.bbox[0], dtype=float)
    hi = np.array(spec.bbox[1], dtype=float)
    axis, coord = _FACES[spec.root_face]

    root = lo + (hi - lo) * (0.25 + 0.5 * rng.random(3))
    root[axis] = coord
    normal = np.zeros(3)
    normal[axis] = 1.0 if coord == 0.0 else -1.0
    direction = _tilt(normal, math.radians(15.0) * rng.random(),
                      2 * math.pi * rng.random())

    verts = [root]
    edges = []
    # (vertex id, direction, branch length, depth); root spawns a single
    # child so it stays a degree-1 vertex and carries the Dirichlet value
    frontier = deque([(0, direction, spec.initial_length, 0)])
    max_turn = math.radians(spec.max_turn_deg)

    while len(edges) < spec.n_branches:
        if not frontier:
            raise GraphGenerationError("growth frontier exhausted")
        vid, d, length, depth = frontier.popleft()
        n_children = 1 if depth == 0 else (2 if rng.random() < spec.branch_prob else 1)
        for _ in range(n_children):
            if len(edges) >= spec.n_branches:
                break
            base = max(spec.min_length,
                       length * spec.length_decay * rng.uniform(0.7, 1.3))
            for attempt in range(100):
                # widen the cone and shorten the step as retries accumulate,
                # so only genuinely impossible specs are rejected
                turn = max_turn + attempt / 100.0 * (math.pi - max_turn)
                nd = _tilt(d, turn * rng.random(), 2 * math.pi * rng.random())
                lc = base * 0.95**attempt
                p = verts[vid] + lc * nd
                if np.all(p >= lo) and np.all(p <= hi):
                    break
            else:
                raise GraphGenerationError(
                    f"could not place branch {len(edges)} inside the box "
                    f"after 100 retries (seed {seed})")
            verts.append(p)
            edges.append((vid, len(verts) - 1))
            frontier.append((len(verts) - 1, nd, lc, depth + 1))

    vertices = np.array(verts)
    edge_arr = np.array(edges, dtype=np.int64)
    degree = np.zeros(len(vertices), dtype=int)
    for a, b in edge_arr:
        degree[a] += 1
        degree[b] += 1
    on_face = np.abs(vertices[:, axis] - coord) <= 1e-12
    dirichlet = tuple(int(i) for i in np.nonzero((degree == 1) & on_face)[0])
    return Graph1D(vertices, edge_arr, spec.radius, dirichlet)


@dataclass(frozen=True)
class GraphMesh1D:
    """1D finite-element mesh of a graph: subdivided edges, shared vertices."""

    coords: np.ndarray            # (N, 3) node positions
    elements: np.ndarray          # (M, 2) node index pairs
    element_lengths: np.ndarray   # (M,)
    dirichlet_nodes: tuple        # node indices

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @property
    def total_length(self) -> float:
        return float(self.element_lengths.sum())


def refine_graph(graph: Graph1D, h_target: float) -> GraphMesh1D:
    """Subdivide every edge into elements no longer than ``h_target``.

    Graph vertices come first in the node ordering (so Dirichlet vertex
    ids carry over unchanged), followed by the interior nodes of each
    edge in edge order.
    """
    if h_target <= 0:
        raise ValueError("h_target must be positive")
    coords = [graph.vertices]
    elements = []
    lengths = []
    next_node = len(graph.vertices)
    for (a, b), length in zip(graph.edges, graph.edge_lengths):
        m = max(1, math.ceil(length / h_target))
        pa, pb = graph.vertices[a], graph.vertices[b]
        if m > 1:
            t = np.arange(1, m)[:, None] / m
            coords.append(pa + t * (pb - pa))
        chain = [a] + list(range(next_node, next_node + m - 1)) + [b]
        next_node += m - 1
        for u, v in zip(chain[:-1], chain[1:]):
            elements.append((u, v))
            lengths.append(length / m)
    return GraphMesh1D(np.vstack(coords), np.array(elements, dtype=np.int64),
                       np.array(lengths), tuple(graph.dirichlet_vertices))


@dataclass(frozen=True)
class DistanceField:
    """Per-node Euclidean distance to the nearest point of the graph."""

    grid: StructuredGrid
    values: np.ndarray            # (n**3,) lexicographic order

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.shape != (self.grid.num_nodes,):
            raise ValueError("distance field length must equal the node count")


def distance_field(graph: Graph1D, grid: StructuredGrid) -> DistanceField:
    """Exact point-to-segment distance, minimized over all edges."""
    pts = grid.node_coords()
    d = np.full(len(pts), np.inf)
    for a, b in graph.edges:
        pa = graph.vertices[a]
        ab = graph.vertices[b] - pa
        t = np.clip((pts - pa) @ ab / (ab @ ab), 0.0, 1.0)
        proj = pa + t[:, None] * ab
        np.minimum(d, np.linalg.norm(pts - proj, axis=1), out=d)
    return DistanceField(grid, d)


# ---------------------------------------------------------------------------
# file formats

def save_graph(graph: Graph1D, path) -> None:
    """Write a graph as JSON: vertices, edges, radius, dirichlet set."""
    doc = {
        "vertices": [[float(x) for x in v] for v in graph.vertices],
        "edges": [[int(a), int(b)] for a, b in graph.edges],
        "radius": float(graph.radius),
        "dirichlet": [int(i) for i in graph.dirichlet_vertices],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_graph(path) -> Graph1D:
    with open(path) as fh:
        doc = json.load(fh)
    return Graph1D(np.array(doc["vertices"], dtype=float),
                   np.array(doc["edges"], dtype=np.int64),
                   float(doc["radius"]), tuple(doc["dirichlet"]))


_FIELD_MAGIC = b"MDF1"


def write_grid_vector(path, n: int, values: np.ndarray) -> None:
    """Binary grid-vector file: magic ``MDF1``, u32 n, n**3 little-endian f64."""
    values = np.asarray(values, dtype="<f8").ravel()
    if values.size != n**3:
        raise ValueError(f"expected {n**3} values for n={n}, got {values.size}")
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(values.tobytes())


def read_grid_vector(path) -> tuple:
    """Read an ``MDF1`` file, returning ``(n, values)``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FIELD_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_FIELD_MAGIC!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        data = fh.read()
    values = np.frombuffer(data, dtype="<f8")
    if values.size != n**3:
        raise ValueError("truncated grid-vector file")
    return int(n), values.astype(float)


def save_distance_field(dfield: DistanceField, path) -> None:
    write_grid_vector(path, dfield.grid.n, dfield.values)


def load_distance_field(path) -> DistanceField:
    n, values = read_grid_vector(path)
    return DistanceField(StructuredGrid(n), values)
