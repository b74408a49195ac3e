"""Experiment runners behind the command-line interface.

A single JSON document configures every mode: reduced-problem
preconditioner benchmarks over a sweep of random test graphs, the fully
coupled solve with the block preconditioner, training-set generation and
training, the spectral report, and the batched-application benchmark.
Runs are deterministic for a fixed config and seed (graph seeds are
derived from the sweep seed); timing columns are volatile by nature and
excluded from that guarantee.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from . import analysis, assembly, geometry, krylov, neural, training

CSV_HEADER = ("graph_id,n,N_h,precond,iterations,converged,rel_residual,"
              "time_ms,time_per_iter_ms")


@dataclass
class ReportRow:
    graph_id: str
    n: int
    n_h: int
    precond: str
    iterations: int
    converged: bool
    rel_residual: float
    time_ms: float
    time_per_iter_ms: float


@dataclass
class ReportTable:
    """Per-run rows plus aggregate statistics of the iteration counts."""

    rows: list = field(default_factory=list)

    def iterations(self, converged_only=False):
        rows = [r for r in self.rows if r.converged or not converged_only]
        return np.array([r.iterations for r in rows], dtype=float)

    def aggregate(self) -> dict:
        its = self.iterations()
        mean = float(its.mean()) if len(its) else float("nan")
        return {
            "mean_iterations": mean,
            "delta_plus": float(its.max() - mean) if len(its) else 0.0,
            "delta_minus": float(mean - its.min()) if len(its) else 0.0,
            "mean_time_ms": float(np.mean([r.time_ms for r in self.rows]))
            if self.rows else 0.0,
            "all_converged": all(r.converged for r in self.rows),
        }


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_report_csv(table: ReportTable, path) -> None:
    """Fixed-header CSV; aggregate appended as pseudo-rows."""
    agg = table.aggregate()
    lines = [CSV_HEADER]
    for r in table.rows:
        lines.append(",".join(_fmt(v) for v in (
            r.graph_id, r.n, r.n_h, r.precond, r.iterations, r.converged,
            r.rel_residual, r.time_ms, r.time_per_iter_ms)))
    n = table.rows[0].n if table.rows else 0
    label = table.rows[0].precond if table.rows else ""
    for name in ("mean_iterations", "delta_plus", "delta_minus"):
        lines.append(",".join(_fmt(v) for v in (
            name, n, n**3, label, agg[name], agg["all_converged"],
            "", agg["mean_time_ms"] if name == "mean_iterations" else "",
            "")))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# configuration

_DEFAULTS = {
    "params": {"k_omega": 1e-3, "sigma_omega": 1e-3, "k_lambda": 1.0,
               "epsilon": 1e-3},
    "graphs": {"count": 20, "seed": 1000, "min_branches": 2,
               "max_branches": 100},
    "fgmres": {"restart": 20, "tol": 1e-6, "maxit": 1000},
    "coupled": {"tol": 1e-15, "maxit": 2000, "restart": 20,
                "inner_iterations": 3, "one_d": "ilu0"},
    "train": {"epochs": 60, "batch_size": 5, "learning_rate": 1e-3,
              "lr_decay": 0.97, "seed": 0, "val_fraction": 0.2,
              "augmentation": {"mode": "random", "count": 4, "shift": 5},
              "rhs_tol": 1e-4},
    "precond": {"type": "none"},
    "batch_sizes": [1, 5, 10, 20, 50, 100],
    "timing_reps": 3,
    "svd_budget": 300,
}

MODES = ("generate-graphs", "gen-dataset", "train", "solve", "solve-coupled",
         "bench", "spectrum", "batch-bench")


@dataclass
class ExperimentConfig:
    mode: str
    n: object                     # int or list of ints
    params: assembly.PhysicalParams
    graphs: dict
    precond: dict
    fgmres: dict
    coupled: dict
    train: dict
    batch_sizes: list
    timing_reps: int
    svd_budget: int
    out: str

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        mode = doc.get("mode")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        merged = {}
        for key, default in _DEFAULTS.items():
            if isinstance(default, dict):
                merged[key] = {**default, **doc.get(key, {})}
            else:
                merged[key] = doc.get(key, default)
        params = assembly.PhysicalParams(**merged["params"])
        cfg = ExperimentConfig(
            mode=mode, n=doc.get("n", 13), params=params,
            graphs=merged["graphs"], precond=merged["precond"],
            fgmres=merged["fgmres"], coupled=merged["coupled"],
            train=merged["train"], batch_sizes=merged["batch_sizes"],
            timing_reps=merged["timing_reps"],
            svd_budget=merged["svd_budget"], out=doc.get("out", "runs/out"))
        cfg.validate()
        return cfg

    def validate(self):
        if self.precond.get("type", "none") not in ("none", "ilu0", "gmg",
                                                    "neural", "exact"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")
        if self.precond.get("type") == "neural":
            ckpt = self.precond.get("checkpoint")
            if not ckpt or not Path(ckpt).exists():
                raise ValueError("neural preconditioner needs an existing "
                                 "checkpoint file")
        if self.mode == "batch-bench" \
                and self.precond.get("type") != "neural":
            raise ValueError("batch-bench needs a neural checkpoint")
        for size in self.grid_sizes():
            if size < 2:
                raise ValueError("grid size must be at least 2")

    def grid_sizes(self) -> list:
        return list(self.n) if isinstance(self.n, (list, tuple)) else [self.n]


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if seed_override is not None:
        doc.setdefault("graphs", {})["seed"] = seed_override
        doc.setdefault("train", {})["seed"] = seed_override
    if out_override is not None:
        doc["out"] = str(out_override)
    return ExperimentConfig.from_dict(doc)


def sample_graphs(count: int, seed: int, min_branches: int = 2,
                  max_branches: int = 100,
                  radius: float = 1e-3) -> list:
    """Test/training pools: branch counts log-uniform over the family range."""
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(count):
        n_branches = max(1, int(round(np.exp(
            rng.uniform(math.log(min_branches), math.log(max_branches))))))
        spec = geometry.GraphFamilySpec(n_branches=n_branches, radius=radius)
        graphs.append(geometry.generate_graph(spec, seed + i))
    return graphs


def graphs_from_config(cfg: ExperimentConfig) -> list:
    g = cfg.graphs
    return sample_graphs(g["count"], g["seed"], g["min_branches"],
                         g["max_branches"], cfg.params.epsilon)


def build_preconditioner(spec: dict, grid: geometry.StructuredGrid,
                         C, dfield: geometry.DistanceField):
    """Instantiate the configured preconditioner for one reduced operator."""
    kind = spec.get("type", "none")
    if kind == "none":
        return None
    if kind == "ilu0":
        return krylov.IluPreconditioner(C)
    if kind == "exact":
        return krylov.ExactPreconditioner(C)
    if kind == "gmg":
        levels = spec.get("levels", _default_levels(grid.n))
        hier = krylov.gmg_build(grid, C, levels)
        return krylov.GmgPreconditioner(hier, cycles=spec.get("cycles", 10))
    if kind == "neural":
        params = neural.load_checkpoint(spec["checkpoint"])
        smoothing = spec.get("smoothing")
        smooth = (smoothing["maxit"], smoothing.get("omega", 2.0 / 3.0)) \
            if smoothing else None
        return training.NeuralPreconditioner(
            params, dfield, smoothing=smooth, C=C,
            zero_distance=spec.get("zero_distance", False))
    raise ValueError(f"unknown preconditioner type {kind!r}")


def _default_levels(n: int) -> int:
    levels = 1
    while (n - 1) % 2 == 0 and (n - 1) // 2 + 1 >= 3:
        n = (n - 1) // 2 + 1
        levels += 1
    return levels


def precond_label(spec: dict) -> str:
    kind = spec.get("type", "none")
    if kind == "gmg":
        return f"gmg({spec.get('cycles', 10)})"
    if kind == "neural":
        tags = []
        if spec.get("smoothing"):
            tags.append("smoothed")
        if spec.get("zero_distance"):
            tags.append("nodist")
        return "neural" + ("+" + "+".join(tags) if tags else "")
    return kind


# ---------------------------------------------------------------------------
# reduced-problem benchmark

def run_reduced_benchmark(cfg: ExperimentConfig) -> dict:
    """Preconditioner sweep over test graphs; one table per grid size.

    Per-run failures become non-converged rows; the sweep never aborts.
    Timing columns report the median of ``timing_reps`` repeated solves.
    """
    tables = {}
    label = precond_label(cfg.precond)
    fg = cfg.fgmres
    for n in cfg.grid_sizes():
        grid = geometry.StructuredGrid(n)
        table = ReportTable()
        for i, graph in enumerate(graphs_from_config(cfg)):
            gid = f"g{cfg.graphs['seed'] + i}"
            try:
                system = assembly.assemble_coupled_system(grid, graph,
                                                          cfg.params)
                C = assembly.reduced_operator(system)
                b = training.generate_rhs(system, cfg.train["rhs_tol"])
                b = b / np.linalg.norm(b)
                dfield = geometry.distance_field(graph, grid)
                precond = build_preconditioner(cfg.precond, grid, C, dfield)
                times = []
                for _ in range(max(1, cfg.timing_reps)):
                    x, report = krylov.fgmres(C, precond, b,
                                              restart=fg["restart"],
                                              tol=fg["tol"],
                                              maxit=fg["maxit"])
                    times.append(report.wall_time)
                wall = float(np.median(times)) * 1e3
                table.rows.append(ReportRow(
                    gid, n, grid.num_nodes, label, report.iterations,
                    report.converged, report.rel_residual, wall,
                    wall / report.iterations if report.iterations else 0.0))
            except Exception as exc:  # record, keep sweeping
                table.rows.append(ReportRow(gid, n, grid.num_nodes, label, 0,
                                            False, float("nan"), 0.0, 0.0))
                print(f"run {gid} at n={n} failed: {exc}")
        tables[n] = table
    return tables


def iteration_rates(tables: dict) -> list:
    """log(m2/m1)/log(Nh2/Nh1) between consecutive grid sizes."""
    sizes = sorted(tables)
    out = []
    for a, b in zip(sizes, sizes[1:]):
        m1 = tables[a].aggregate()["mean_iterations"]
        m2 = tables[b].aggregate()["mean_iterations"]
        rate = math.log(m2 / m1) / math.log(b**3 / a**3)
        out.append({"n_from": a, "n_to": b, "rate": rate})
    return out


def write_benchmark(tables: dict, outdir, label: str) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for n, table in tables.items():
        write_report_csv(table, outdir / f"bench_{label}_n{n}.csv")
    rates = iteration_rates(tables)
    if rates:
        lines = ["precond,n_from,n_to,rate_iterations"]
        lines += [f"{label},{r['n_from']},{r['n_to']},{_fmt(r['rate'])}"
                  for r in rates]
        (outdir / f"rates_{label}.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# coupled solve

@dataclass
class CoupledStrategy:
    """Block right preconditioner for the full 3D-1D system.

    The 1D block is applied via ILU(0) triangular solves (or a direct
    factorization); the 3D block runs a fixed number of inner FGMRES
    iterations on the reduced operator with the configured inner
    preconditioner, making the outer iteration flexible by necessity.
    """

    tol: float = 1e-15
    maxit: int = 2000
    restart: int = 20
    inner_iterations: int = 3
    one_d: str = "ilu0"           # "ilu0" | "direct" | "schur"
    three_d: object = None        # preconditioner spec dict, or "direct"


def solve_coupled(system: assembly.CoupledSystem,
                  strategy: CoupledStrategy) -> tuple:
    """Outer FGMRES on the full block system; returns (u3d, u1d, report).

    Eliminated Dirichlet values are reimposed exactly on the returned 1D
    component.
    """
    A = assembly.full_operator(system)
    F = assembly.full_rhs(system)
    n3 = system.n3
    w = system.params.coupling_weight
    A11 = assembly.one_d_operator(system)
    C = assembly.reduced_operator(system)

    if strategy.one_d == "direct":
        lu11 = spla.splu(A11.tocsc())
        apply_1d = lu11.solve
    elif strategy.one_d == "schur":
        # the ideal triangular preconditioner: with the true Schur
        # complement here and an exact 3D solve, the preconditioned
        # operator is identity plus a nilpotent part, so the outer
        # iteration finishes in two steps up to roundoff
        lu_c0 = spla.splu(C.tocsc())
        coupling = np.column_stack([lu_c0.solve(col) for col in
                                    (w * system.M01).toarray().T])
        schur = A11.toarray() - (w * system.M10).toarray() @ coupling
        apply_1d = lambda r: np.linalg.solve(schur, r)  # noqa: E731
    else:
        fact = krylov.ilu0(A11)
        apply_1d = lambda r: krylov.ilu0_apply(fact, r)  # noqa: E731

    if strategy.three_d == "direct":
        lu_c = spla.splu(C.tocsc())
        apply_3d = lu_c.solve
    else:
        spec = strategy.three_d or {"type": "none"}
        dfield = None
        if spec.get("type") == "neural":
            # rebuild the distance field from the mesh geometry reference
            dfield = _dfield_from_system(system)
        inner = build_preconditioner(spec, system.grid, C, dfield)
        m = strategy.inner_iterations

        def apply_3d(r):
            z, _ = krylov.fgmres(C, inner, r, restart=m, tol=1e-300, maxit=m)
            return z

    def block_precond(r):
        z1 = apply_1d(r[n3:])
        z0 = apply_3d(r[:n3] - w * (system.M01 @ z1))
        return np.concatenate([z0, z1])

    x, report = krylov.fgmres(A, block_precond, F, restart=strategy.restart,
                              tol=strategy.tol, maxit=strategy.maxit)
    u3d, u1d = x[:n3], x[n3:].copy()
    u1d[list(system.dirichlet_nodes)] = 1.0  # eliminated values are known
    return u3d, u1d, report


def _dfield_from_system(system: assembly.CoupledSystem):
    verts = system.graph_mesh.coords
    edges = system.graph_mesh.elements
    graph = geometry.Graph1D(verts, edges, system.params.epsilon,
                             tuple(system.dirichlet_nodes))
    return geometry.distance_field(graph, system.grid)


def run_coupled(cfg: ExperimentConfig) -> dict:
    tables = {}
    cp = cfg.coupled
    strategy = CoupledStrategy(tol=cp["tol"], maxit=cp["maxit"],
                               restart=cp["restart"],
                               inner_iterations=cp["inner_iterations"],
                               one_d=cp["one_d"],
                               three_d=cp.get("three_d", cfg.precond))
    label = "coupled+" + (strategy.three_d if isinstance(strategy.three_d, str)
                          else precond_label(strategy.three_d))
    for n in cfg.grid_sizes():
        grid = geometry.StructuredGrid(n)
        table = ReportTable()
        for i, graph in enumerate(graphs_from_config(cfg)):
            gid = f"g{cfg.graphs['seed'] + i}"
            try:
                system = assembly.assemble_coupled_system(grid, graph,
                                                          cfg.params)
                t0 = time.perf_counter()
                u3d, u1d, report = solve_coupled(system, strategy)
                wall = (time.perf_counter() - t0) * 1e3
                table.rows.append(ReportRow(
                    gid, n, grid.num_nodes, label, report.iterations,
                    report.converged, report.rel_residual, wall,
                    wall / report.iterations if report.iterations else 0.0))
            except Exception as exc:
                table.rows.append(ReportRow(gid, n, grid.num_nodes, label, 0,
                                            False, float("nan"), 0.0, 0.0))
                print(f"coupled run {gid} at n={n} failed: {exc}")
        tables[n] = table
    return tables


# ---------------------------------------------------------------------------
# training and dataset generation

def build_dataset_from_config(cfg: ExperimentConfig) -> training.Dataset:
    n = cfg.grid_sizes()[0]
    grid = geometry.StructuredGrid(n)
    graphs = graphs_from_config(cfg)
    aug = training.AugmentationSpec(**cfg.train["augmentation"])
    return training.build_dataset(grid, graphs, cfg.params, aug,
                                  val_fraction=cfg.train["val_fraction"],
                                  seed=cfg.train["seed"],
                                  rhs_tol=cfg.train["rhs_tol"])


def run_training(cfg: ExperimentConfig) -> dict:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset_dir = cfg.train.get("dataset_dir")
    if dataset_dir:
        dataset = training.load_dataset(dataset_dir)
    else:
        dataset = build_dataset_from_config(cfg)
    config = training.TrainConfig(
        epochs=cfg.train["epochs"], batch_size=cfg.train["batch_size"],
        learning_rate=cfg.train["learning_rate"],
        lr_decay=cfg.train["lr_decay"],
        augmentation=dataset.augmentation, seed=cfg.train["seed"])
    params, history = training.train(dataset, config)
    ckpt = outdir / "model.ckpt"
    neural.save_checkpoint(params, ckpt)
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{_fmt(tr)},{_fmt(va)}"
              for e, (tr, va) in enumerate(history)]
    (outdir / "loss_history.csv").write_text("\n".join(lines) + "\n")
    summary = {"checkpoint": str(ckpt), "epochs": len(history),
               "alpha": training.compute_alpha(dataset),
               "final_train_loss": history[-1][0] if history else None,
               "final_val_loss": history[-1][1] if history else None}
    (outdir / "train_summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def run_dataset_generation(cfg: ExperimentConfig) -> Path:
    dataset = build_dataset_from_config(cfg)
    outdir = Path(cfg.out)
    training.save_dataset(dataset, outdir)
    return outdir


def run_graph_generation(cfg: ExperimentConfig) -> Path:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    n = cfg.grid_sizes()[0]
    grid = geometry.StructuredGrid(n)
    for i, graph in enumerate(graphs_from_config(cfg)):
        geometry.save_graph(graph, outdir / f"graph_{i:04d}.json")
        geometry.save_distance_field(geometry.distance_field(graph, grid),
                                     outdir / f"dfield_{i:04d}.bin")
    return outdir


# ---------------------------------------------------------------------------
# spectrum and batched-application benchmarks

def run_spectrum(cfg: ExperimentConfig) -> Path:
    n = cfg.grid_sizes()[0]
    grid = geometry.StructuredGrid(n)
    graph = graphs_from_config(cfg)[0]
    system = assembly.assemble_coupled_system(grid, graph, cfg.params)
    C = assembly.reduced_operator(system)
    b = training.generate_rhs(system, cfg.train["rhs_tol"])
    aug = cfg.train["augmentation"]
    kry = training.augment_krylov(C, b, aug["count"], aug["shift"])
    rnd = training.augment_random(grid.num_nodes, aug["count"],
                                  cfg.graphs["seed"])
    report = analysis.kernel_spectrum_report(system, b, kry, rnd,
                                             svd_budget=cfg.svd_budget)
    outdir = Path(cfg.out)
    analysis.write_spectrum_report(report, outdir)
    return outdir


def run_batch_bench(cfg: ExperimentConfig) -> list:
    """Serial-vs-batched preconditioner pass; outputs must agree to 1e-12."""
    n = cfg.grid_sizes()[0]
    grid = geometry.StructuredGrid(n)
    params = neural.load_checkpoint(cfg.precond["checkpoint"])
    graphs = graphs_from_config(cfg)
    pool = []
    for graph in graphs:
        system = assembly.assemble_coupled_system(grid, graph, cfg.params)
        b = training.generate_rhs(system, cfg.train["rhs_tol"])
        pool.append((b / np.linalg.norm(b),
                     geometry.distance_field(graph, grid)))
    rows = []
    for size in cfg.batch_sizes:
        rs = [pool[i % len(pool)][0] for i in range(size)]
        dfields = [pool[i % len(pool)][1] for i in range(size)]
        t0 = time.perf_counter()
        serial = [training.apply_neural(params, r, d)
                  for r, d in zip(rs, dfields)]
        t_serial = time.perf_counter() - t0
        t0 = time.perf_counter()
        batched = training.apply_batched(params, rs, dfields)
        t_batch = time.perf_counter() - t0
        dev = max(float(np.max(np.abs(a - b))) for a, b in zip(serial,
                                                               batched))
        if dev > 1e-12:
            raise AssertionError(f"batched apply deviates by {dev}")
        rows.append({"batch": size, "time_serial_ms": t_serial * 1e3,
                     "time_batched_ms": t_batch * 1e3,
                     "speedup": t_serial / t_batch, "max_deviation": dev})
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = ["batch,time_serial_ms,time_batched_ms,speedup,max_deviation"]
    lines += [",".join(_fmt(r[k]) for k in
                       ("batch", "time_serial_ms", "time_batched_ms",
                        "speedup", "max_deviation")) for r in rows]
    (outdir / "batch_bench.csv").write_text("\n".join(lines) + "\n")
    return rows


def run(cfg: ExperimentConfig):
    """Dispatch a config to its mode's runner."""
    if cfg.mode == "bench" or cfg.mode == "solve":
        tables = run_reduced_benchmark(cfg)
        write_benchmark(tables, cfg.out, precond_label(cfg.precond))
        return tables
    if cfg.mode == "solve-coupled":
        tables = run_coupled(cfg)
        outdir = Path(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        for n, table in tables.items():
            write_report_csv(table, outdir / f"coupled_n{n}.csv")
        return tables
    if cfg.mode == "train":
        return run_training(cfg)
    if cfg.mode == "gen-dataset":
        return run_dataset_generation(cfg)
    if cfg.mode == "generate-graphs":
        return run_graph_generation(cfg)
    if cfg.mode == "spectrum":
        return run_spectrum(cfg)
    if cfg.mode == "batch-bench":
        return run_batch_bench(cfg)
    raise ValueError(f"unhandled mode {cfg.mode!r}")
