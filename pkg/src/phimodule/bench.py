"""Memory and runtime scaling of the pipeline on carbyne chains.

Each (n, k) point runs three phases (graph + Laplacian, eigensolve, forward
pass) under ``tracemalloc``, which counts every allocation made through
Python's allocator, including numpy buffers.  Peak bytes are measured
relative to the traced memory held when the phase starts.
"""

from __future__ import annotations

import csv
import gc
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .batch import PreparedSystem, collate
from .datagen import gen_carbyne_chain
from .eigensolver import lobpcg
from .molgraph import build_radius_graph, build_weighted_laplacian
from .phi import PhiConfig, PhiModel, phi_forward
from .potential import HostConfig

__all__ = ["BenchRecord", "BenchConfig", "scale_sweep", "loglog_slope", "write_bench_csv",
           "BENCH_COLUMNS"]

BENCH_COLUMNS = ("n", "k", "phase", "peak_bytes", "wall_s", "status")
PHASES = ("laplacian", "eigensolve", "forward")


@dataclass
class BenchRecord:
    n_atoms: int
    k: int
    phase: str
    peak_bytes: int
    wall_seconds: float
    status: str = "ok"


@dataclass
class BenchConfig:
    repetitions: int = 3
    max_iter: int = 20
    tol: float = 1e-8
    memory_limit: int | None = None   # bytes per phase; exceeded -> "oom" row
    spacing: float = 1.3
    n_features: int = 8
    n_rbf: int = 8
    n_interactions: int = 1
    cutoff: float = 6.0
    seed: int = 0


class _Budget(MemoryError):
    pass


def _measure(fn, limit):
    gc.collect()
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    try:
        out = fn()
        wall = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    if limit is not None and peak > limit:
        raise _Budget(peak)
    return out, max(int(peak), 1), wall


def scale_sweep(n_list, k_list, cfg: BenchConfig | None = None) -> list[BenchRecord]:
    """Median wall time and peak traced bytes per (n, k, phase)."""
    cfg = cfg or BenchConfig()
    if list(n_list) != sorted(n_list) or list(k_list) != sorted(k_list):
        raise ValueError("n_list and k_list must be sorted")
    records = []
    for n in n_list:
        system = gen_carbyne_chain(int(n), cfg.spacing)
        host = HostConfig(n_features=cfg.n_features, n_interactions=cfg.n_interactions,
                          n_rbf=cfg.n_rbf, cutoff=cfg.cutoff)
        for k in k_list:
            model = PhiModel(host, PhiConfig(k=int(k), hidden_channels=cfg.n_features),
                             seed=cfg.seed)
            state = {}
            failed = False
            for phase in PHASES:
                if failed:
                    records.append(BenchRecord(int(n), int(k), phase, 1, float("nan"), "skipped"))
                    continue

                def run(phase=phase):
                    if phase == "laplacian":
                        g = build_radius_graph(system, cfg.cutoff)
                        return g, build_weighted_laplacian(g)
                    if phase == "eigensolve":
                        return lobpcg(state["L"], int(k), tol=cfg.tol, max_iter=cfg.max_iter,
                                      seed=cfg.seed)
                    prepared = PreparedSystem(system, state["graph"], state["L"], state["basis"])
                    return phi_forward(collate([prepared], int(k)), model).energy.data

                peaks, walls = [], []
                try:
                    for _ in range(cfg.repetitions):
                        out, peak, wall = _measure(run, cfg.memory_limit)
                        peaks.append(peak)
                        walls.append(wall)
                except MemoryError as exc:
                    peak = int(exc.args[0]) if isinstance(exc, _Budget) else 1
                    records.append(BenchRecord(int(n), int(k), phase, max(peak, 1),
                                               float("nan"), "oom"))
                    failed = True
                    continue
                if phase == "laplacian":
                    state["graph"], state["L"] = out
                elif phase == "eigensolve":
                    state["basis"] = out
                records.append(BenchRecord(int(n), int(k), phase, int(max(peaks)),
                                           float(np.median(walls)), "ok"))
    return records


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def write_bench_csv(path, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in records:
            w.writerow([r.n_atoms, r.k, r.phase, r.peak_bytes, repr(r.wall_seconds), r.status])
