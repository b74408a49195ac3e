"""Training sets and unsupervised training of the neural preconditioner.

Each training graph contributes one physics right-hand side (the coupling
forcing induced by its 1D solve, normalized to the unit sphere) plus a
small augmentation set: either orthonormal Krylov basis vectors of the
reduced operator seeded by that right-hand side, or random unit vectors.
Training minimizes the mean squared preconditioned-residual mismatch
``|| v - alpha^-1 C U(v, d) ||^2`` over all samples with Adam; ``alpha``
is the mean root-mean-square diagonal of the training operators and only
rescales the optimization target, so the trained network is applied
unscaled inside the solver (FGMRES is insensitive to a positive scaling
of the preconditioned directions).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import (CoupledSystem, PhysicalParams, assemble_coupled_system,
                       one_d_operator, reduced_operator, reduced_rhs)
from .geometry import (DistanceField, Graph1D, StructuredGrid, distance_field,
                       load_distance_field, load_graph, read_grid_vector,
                       save_distance_field, save_graph)
from .krylov import IluPreconditioner, Preconditioner, fgmres, jacobi_smooth
from .neural import (UNetParams, adam_step, channel_to_grid, grid_to_channel,
                     init_grad_store, init_unet_params, unet_backward,
                     unet_forward)


class SolveError(RuntimeError):
    """An inner solve required during data generation did not converge."""


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; carries the batch id."""

    def __init__(self, batch_id: int):
        super().__init__(f"non-finite loss in batch {batch_id}")
        self.batch_id = batch_id


SAMPLE_TAGS = ("physics", "krylov", "random")


@dataclass(frozen=True)
class TrainingSample:
    """A unit vector paired with the graph it belongs to."""

    vector: np.ndarray
    tag: str
    graph_index: int

    def __post_init__(self):
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"sample vectors live on the unit sphere "
                             f"(norm was {norm})")
        if self.tag not in SAMPLE_TAGS:
            raise ValueError(f"unknown sample tag {self.tag!r}")


@dataclass
class GraphRecord:
    """Everything one graph contributes: operator, field and samples."""

    graph: Graph1D
    dfield: DistanceField
    operator: object              # reduced 3D operator (CSR)
    samples: list


@dataclass(frozen=True)
class AugmentationSpec:
    """none | krylov(count, shift) | random(count)."""

    mode: str = "random"
    count: int = 4
    shift: int = 5

    def __post_init__(self):
        if self.mode not in ("none", "krylov", "random"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


@dataclass
class Dataset:
    grid: StructuredGrid
    params: PhysicalParams
    records: list
    train_indices: tuple
    val_indices: tuple
    augmentation: AugmentationSpec

    def train_samples(self):
        return [(i, s) for i in self.train_indices
                for s in self.records[i].samples]

    def val_samples(self):
        return [(i, s) for i in self.val_indices
                for s in self.records[i].samples]


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 5
    learning_rate: float = 1e-3
    lr_decay: float = 0.97
    alpha: float | None = None    # computed from the dataset when None
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")


def generate_rhs(system: CoupledSystem, tol: float = 1e-4) -> np.ndarray:
    """Physics forcing for the reduced problem: solve the 1D block, couple.

    The 1D sub-block is solved with ILU(0)-preconditioned FGMRES to the
    given relative tolerance (loose by design; the training set only
    needs the right direction).
    """
    A11 = one_d_operator(system)
    x1, report = fgmres(A11, IluPreconditioner(A11), system.rhs1,
                        restart=20, tol=tol, maxit=500)
    if not report.converged:
        raise SolveError(f"1D solve stalled at residual {report.rel_residual}")
    return reduced_rhs(system, x1)


def augment_krylov(C, b: np.ndarray, p: int = 4, p_prime: int = 5) -> list:
    """Orthonormal Krylov vectors ``q_{p'} .. q_{p'+p-1}`` of span(b, Cb, ...).

    Arnoldi with modified Gram-Schmidt (one reorthogonalization sweep)
    starting from ``q_0 = b/||b||``.  On breakdown the vectors built so
    far past the shift are returned with a warning.
    """
    norm_b = np.linalg.norm(b)
    if norm_b == 0:
        raise ValueError("augmentation needs a nonzero seed vector")
    basis = [b / norm_b]
    for _ in range(p_prime + p - 1):
        w = C @ basis[-1]
        for _ in range(2):  # MGS with a second sweep for orthogonality
            for q in basis:
                w -= (w @ q) * q
        norm_w = np.linalg.norm(w)
        if norm_w < 1e-12:
            warnings.warn(f"Krylov space exhausted after {len(basis)} vectors")
            break
        basis.append(w / norm_w)
    return basis[p_prime:p_prime + p]


def augment_random(n: int, m: int, seed: int) -> list:
    """m unit vectors drawn uniformly on the sphere (normalized normals)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(m):
        v = rng.standard_normal(n)
        out.append(v / np.linalg.norm(v))
    return out


def _unit(v):
    return v / np.linalg.norm(v)


def build_graph_record(grid: StructuredGrid, graph: Graph1D,
                       params: PhysicalParams, augmentation: AugmentationSpec,
                       graph_index: int, seed: int,
                       rhs_tol: float = 1e-4) -> GraphRecord:
    system = assemble_coupled_system(grid, graph, params)
    C = reduced_operator(system)
    dfield = distance_field(graph, grid)
    b = generate_rhs(system, rhs_tol)
    samples = [TrainingSample(_unit(b), "physics", graph_index)]
    if augmentation.mode == "krylov":
        vecs = augment_krylov(C, b, augmentation.count, augmentation.shift)
        samples += [TrainingSample(v, "krylov", graph_index) for v in vecs]
    elif augmentation.mode == "random":
        vecs = augment_random(grid.num_nodes, augmentation.count, seed)
        samples += [TrainingSample(v, "random", graph_index) for v in vecs]
    return GraphRecord(graph, dfield, C, samples)


def build_dataset(grid: StructuredGrid, graphs: list, params: PhysicalParams,
                  augmentation: AugmentationSpec = AugmentationSpec(),
                  val_fraction: float = 0.2, seed: int = 0,
                  rhs_tol: float = 1e-4) -> Dataset:
    """Assemble one record per graph; the trailing fraction validates."""
    records = [build_graph_record(grid, g, params, augmentation, i,
                                  seed=seed * 100_003 + i, rhs_tol=rhs_tol)
               for i, g in enumerate(graphs)]
    n_val = int(round(val_fraction * len(graphs)))
    n_train = len(graphs) - n_val
    return Dataset(grid, params, records, tuple(range(n_train)),
                   tuple(range(n_train, len(graphs))), augmentation)


def compute_alpha(dataset: Dataset) -> float:
    """Mean over training graphs of ||diag(C)||_2 / sqrt(N_h)."""
    n_h = dataset.grid.num_nodes
    vals = [np.linalg.norm(dataset.records[i].operator.diagonal())
            / math.sqrt(n_h) for i in dataset.train_indices]
    return float(np.mean(vals))


def _sample_input(dataset: Dataset, rec_idx: int, v: np.ndarray) -> np.ndarray:
    n = dataset.grid.n
    return np.concatenate([grid_to_channel(v, n),
                           grid_to_channel(dataset.records[rec_idx]
                                           .dfield.values, n)])


def risk(params: UNetParams, dataset: Dataset, pairs: list,
         alpha: float) -> float:
    """Mean squared residual mismatch over ``(record_index, sample)`` pairs."""
    total = 0.0
    for rec_idx, sample in pairs:
        x = _sample_input(dataset, rec_idx, sample.vector)
        u = channel_to_grid(unet_forward(params, x))
        resid = sample.vector - (dataset.records[rec_idx].operator @ u) / alpha
        total += resid @ resid
    return total / len(pairs)


def train(dataset: Dataset, config: TrainConfig) -> tuple:
    """Minimize the empirical risk; returns ``(params, history)``.

    ``history`` holds one ``(train_loss, val_loss)`` pair per epoch; the
    train entry is the running mean over that epoch's mini-batches, the
    validation entry is recomputed at the epoch's final parameters.
    """
    alpha = config.alpha if config.alpha is not None else compute_alpha(dataset)
    params = init_unet_params(config.seed)
    if config.epochs == 0:
        return params, []
    store = init_grad_store(params)
    rng = np.random.default_rng(config.seed)
    train_pairs = dataset.train_samples()
    val_pairs = dataset.val_samples()
    history = []
    batch_id = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            chosen = [train_pairs[i] for i in
                      order[start:start + config.batch_size]]
            xs = np.stack([_sample_input(dataset, ri, s.vector)
                           for ri, s in chosen])
            ctx = {}
            us = unet_forward(params, xs, ctx)
            grad_out = np.empty_like(us)
            batch_loss = 0.0
            for k, (ri, s) in enumerate(chosen):
                C = dataset.records[ri].operator
                u = us[k, 0].reshape(-1)
                resid = s.vector - (C @ u) / alpha
                batch_loss += resid @ resid
                g = -(2.0 / (alpha * len(chosen))) * (C.T @ resid)
                grad_out[k, 0] = g.reshape(us.shape[2:])
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(batch_id)
            epoch_loss += batch_loss
            grads = unet_backward(params, ctx, grad_out)
            for key in store.grads:
                store.grads[key] = grads[key]
            params = adam_step(params, store, lr)
            batch_id += 1
        val_loss = risk(params, dataset, val_pairs, alpha) if val_pairs \
            else float("nan")
        history.append((epoch_loss / len(train_pairs), val_loss))
    return params, history


# ---------------------------------------------------------------------------
# applying the trained network

def apply_neural(params: UNetParams, r: np.ndarray, dfield: DistanceField,
                 smoothing: tuple | None = None, C=None,
                 zero_distance: bool = False) -> np.ndarray:
    """One preconditioner application ``z ~ C^-1 r``.

    The residual is normalized onto the unit sphere the network was
    trained on and the output rescaled, making the map positively
    homogeneous of degree one by construction.  With ``smoothing =
    (maxit, omega)`` the network correction is wrapped in Jacobi pre- and
    post-relaxation sweeps on ``C``.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (dfield.grid.num_nodes,):
        raise ValueError("residual length must match the grid")
    if smoothing is not None:
        if C is None:
            raise ValueError("smoothing needs the reduced operator")
        maxit, omega = smoothing
        z = jacobi_smooth(C, r, np.zeros_like(r), maxit, omega)
        z = z + apply_neural(params, r - C @ z, dfield,
                             zero_distance=zero_distance)
        return jacobi_smooth(C, r, z, maxit, omega)
    norm_r = np.linalg.norm(r)
    if norm_r == 0.0:
        return np.zeros_like(r)
    n = dfield.grid.n
    dvals = np.zeros(dfield.grid.num_nodes) if zero_distance else dfield.values
    x = np.concatenate([grid_to_channel(r / norm_r, n),
                        grid_to_channel(dvals, n)])
    return norm_r * channel_to_grid(unet_forward(params, x))


def apply_batched(params: UNetParams, residuals: list,
                  dfields: list) -> list:
    """Batched network pass over ``(r, dfield)`` pairs of one spatial size."""
    if len(residuals) != len(dfields):
        raise ValueError("need one distance field per residual")
    sizes = {d.grid.n for d in dfields}
    if len(sizes) != 1:
        raise ValueError("batched application needs a single spatial size")
    n = sizes.pop()
    norms = [np.linalg.norm(np.asarray(r, dtype=float)) for r in residuals]
    xs = np.stack([
        np.concatenate([grid_to_channel(np.asarray(r, dtype=float)
                                        / (nrm if nrm else 1.0), n),
                        grid_to_channel(d.values, n)])
        for r, nrm, d in zip(residuals, norms, dfields)])
    out = unet_forward(params, xs)
    return [nrm * out[i, 0].reshape(-1) for i, nrm in enumerate(norms)]


class NeuralPreconditioner(Preconditioner):
    """Stateless apply-wrapper binding trained weights to one graph."""

    def __init__(self, params: UNetParams, dfield: DistanceField,
                 smoothing: tuple | None = None, C=None,
                 zero_distance: bool = False):
        self.params = params
        self.dfield = dfield
        self.smoothing = smoothing
        self.C = C
        self.zero_distance = zero_distance

    def apply(self, r):
        return apply_neural(self.params, r, self.dfield, self.smoothing,
                            self.C, self.zero_distance)


# ---------------------------------------------------------------------------
# dataset directory format

_SAMPLES_MAGIC = b"MDS1"
_TAG_CODES = {"physics": 0, "krylov": 1, "random": 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


def _write_samples(path, samples) -> None:
    with open(path, "wb") as fh:
        fh.write(_SAMPLES_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            fh.write(struct.pack("<I", _TAG_CODES[s.tag]))
            fh.write(np.asarray(s.vector, dtype="<f8").tobytes())


def _read_samples(path, graph_index: int) -> list:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _SAMPLES_MAGIC:
        raise ValueError(f"bad samples magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    if count == 0:
        return []
    body = len(raw) - 8
    if body % count:
        raise ValueError("truncated samples file")
    n_h = (body // count - 4) // 8
    samples = []
    offset = 8
    for _ in range(count):
        (code,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        vec = np.frombuffer(raw, dtype="<f8", count=n_h, offset=offset)
        offset += 8 * n_h
        samples.append(TrainingSample(vec.astype(float), _TAG_NAMES[code],
                                      graph_index))
    return samples


def save_dataset(dataset: Dataset, outdir) -> None:
    """Per-graph records (graph JSON, distance field, samples) plus meta."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": dataset.grid.n,
        "params": {
            "k_omega": dataset.params.k_omega,
            "sigma_omega": dataset.params.sigma_omega,
            "k_lambda": dataset.params.k_lambda,
            "epsilon": dataset.params.epsilon,
        },
        "n_graphs": len(dataset.records),
        "train_indices": list(dataset.train_indices),
        "val_indices": list(dataset.val_indices),
        "augmentation": {"mode": dataset.augmentation.mode,
                         "count": dataset.augmentation.count,
                         "shift": dataset.augmentation.shift},
    }
    with open(outdir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    for i, rec in enumerate(dataset.records):
        save_graph(rec.graph, outdir / f"graph_{i:04d}.json")
        save_distance_field(rec.dfield, outdir / f"dfield_{i:04d}.bin")
        _write_samples(outdir / f"samples_{i:04d}.bin", rec.samples)


def load_dataset(path) -> Dataset:
    """Load records and re-assemble each graph's reduced operator."""
    from pathlib import Path

    path = Path(path)
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    grid = StructuredGrid(meta["n"])
    params = PhysicalParams(**meta["params"])
    records = []
    for i in range(meta["n_graphs"]):
        graph = load_graph(path / f"graph_{i:04d}.json")
        dfield = load_distance_field(path / f"dfield_{i:04d}.bin")
        samples = _read_samples(path / f"samples_{i:04d}.bin", i)
        system = assemble_coupled_system(grid, graph, params)
        records.append(GraphRecord(graph, dfield, reduced_operator(system),
                                   samples))
    aug = AugmentationSpec(**meta["augmentation"])
    return Dataset(grid, params, records, tuple(meta["train_indices"]),
                   tuple(meta["val_indices"]), aug)
