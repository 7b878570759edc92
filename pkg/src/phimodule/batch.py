"""Per-system preprocessing and block-diagonal batch assembly.

Everything here is geometry-only and carries no gradient: radius graph,
Laplacian and its partial eigendecomposition are computed once per system
and concatenated into a batch without padding along the node axis.  The
spectral arrays are padded along the *mode* axis (``k``) so a graph with
fewer than ``k`` atoms simply has zero columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .eigensolver import NonConvergenceError, SpectralBasis, lobpcg
from .molgraph import (
    DEFAULT_CUTOFF,
    DEFAULT_MAX_NEIGHBORS,
    AtomicSystem,
    BatchedLaplacian,
    RadiusGraph,
    block_diag_batch,
    build_radius_graph,
    build_weighted_laplacian,
)

__all__ = ["PreparedSystem", "GraphBatch", "prepare_system", "collate", "random_psd_laplacian"]


@dataclass
class PreparedSystem:
    system: AtomicSystem
    graph: RadiusGraph
    laplacian: sp.csr_matrix
    basis: SpectralBasis | None
    laplacian_kind: str = "distance"


def random_psd_laplacian(n: int, seed) -> sp.csr_matrix:
    """Dense random symmetric PSD matrix with spectrum scaled into [0, 2]."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    M = A @ A.T
    top = np.linalg.eigvalsh(M)[-1]
    M *= 2.0 / top if top > 0 else 0.0
    M = 0.5 * (M + M.T)
    return sp.csr_matrix(M)


def prepare_system(system: AtomicSystem, k: int | None, cutoff: float = DEFAULT_CUTOFF,
                   max_neighbors: int = DEFAULT_MAX_NEIGHBORS, tol: float = 1e-8,
                   seed: int = 0, largest: bool = False,
                   laplacian: sp.spmatrix | None = None, extra_modes: int = 0) -> PreparedSystem:
    """Graph + Laplacian + ``k`` eigenpairs (``k=None`` skips the eigensolve).

    ``extra_modes`` requests additional eigenpairs beyond ``k`` (used by the
    force code to check the gap above the last retained mode).
    """
    graph = build_radius_graph(system, cutoff, max_neighbors)
    kind = "distance"
    if laplacian is None:
        L = build_weighted_laplacian(graph)
    else:
        L = sp.csr_matrix(laplacian)
        kind = "custom"
    basis = None
    if k is not None:
        k_eff = min(k + extra_modes, system.n_atoms)
        basis = lobpcg(L, k_eff, tol=tol, seed=seed, largest=largest)
        if not basis.converged:
            basis = lobpcg(L, k_eff, tol=tol, seed=seed + 1, largest=largest, max_iter=2000)
            if not basis.converged and basis.residual_norms.max() > math.sqrt(tol):
                raise NonConvergenceError(
                    f"eigensolver did not converge for a {system.n_atoms}-atom system "
                    f"(residual {basis.residual_norms.max():.3e})")
    return PreparedSystem(system, graph, L, basis, kind)


@dataclass
class GraphBatch:
    positions: np.ndarray          # (N, 3)
    numbers: np.ndarray            # (N,)
    graph_index: np.ndarray        # (N,)
    n_graphs: int
    n_atoms: np.ndarray            # (G,)
    src: np.ndarray                # (E,) global node ids
    dst: np.ndarray
    distances: np.ndarray          # (E,)
    edge_graph: np.ndarray         # (E,)
    laplacian: BatchedLaplacian
    L: sp.csr_matrix               # assembled block-diagonal Laplacian
    U: np.ndarray | None           # (N, k) padded along modes
    lam: np.ndarray | None         # (G, k)
    mode_mask: np.ndarray | None   # (G, k)
    energies: np.ndarray | None
    laplacian_kind: str = "distance"

    @property
    def n_nodes(self) -> int:
        return len(self.numbers)

    @property
    def k(self) -> int:
        return 0 if self.U is None else self.U.shape[1]


def collate(items: list[PreparedSystem], k: int | None = None) -> GraphBatch:
    """Concatenate prepared systems into one block-diagonal batch."""
    if not items:
        raise ValueError("cannot collate an empty batch")
    sizes = np.array([it.system.n_atoms for it in items])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    N, G = int(sizes.sum()), len(items)
    pos = np.concatenate([it.system.positions for it in items])
    numbers = np.concatenate([it.system.atomic_numbers for it in items])
    gidx = np.repeat(np.arange(G), sizes)
    src = np.concatenate([it.graph.src + s for it, s in zip(items, starts)])
    dst = np.concatenate([it.graph.dst + s for it, s in zip(items, starts)])
    dists = np.concatenate([it.graph.distances for it in items])
    egraph = np.repeat(np.arange(G), [it.graph.n_edges for it in items])
    lap = block_diag_batch([it.laplacian for it in items])
    L = lap.assemble()
    energies = None
    if all(it.system.energy is not None for it in items):
        energies = np.array([it.system.energy for it in items], dtype=np.float64)

    U = lam = mask = None
    if k is not None:
        if any(it.basis is None for it in items):
            raise ValueError("spectral basis missing; prepare systems with k set")
        U = np.zeros((N, k))
        lam = np.zeros((G, k))
        mask = np.zeros((G, k))
        for g, (it, s) in enumerate(zip(items, starts)):
            kk = min(k, it.basis.k)
            U[s: s + sizes[g], :kk] = it.basis.U[:, :kk]
            lam[g, :kk] = it.basis.lam[:kk]
            mask[g, :kk] = 1.0
    kinds = {it.laplacian_kind for it in items}
    return GraphBatch(pos, numbers, gidx, G, sizes, src.astype(np.intp), dst.astype(np.intp),
                      dists, egraph, lap, L, U, lam, mask, energies,
                      kinds.pop() if len(kinds) == 1 else "mixed")
