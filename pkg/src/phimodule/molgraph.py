"""Atomic systems, XYZ I/O, radius graphs and distance-weighted Laplacians."""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .elements import number_to_symbol, symbol_to_number

__all__ = [
    "AtomicSystem",
    "RadiusGraph",
    "BatchedLaplacian",
    "parse_xyz",
    "read_xyz",
    "write_xyz",
    "format_xyz",
    "build_radius_graph",
    "build_weighted_laplacian",
    "block_diag_batch",
    "DEFAULT_CUTOFF",
    "DEFAULT_MAX_NEIGHBORS",
]

DEFAULT_CUTOFF = 6.0
DEFAULT_MAX_NEIGHBORS = 50
_COINCIDENT = 1e-6


@dataclass
class AtomicSystem:
    positions: np.ndarray
    atomic_numbers: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    charges: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        n = len(self.atomic_numbers)
        if n < 1:
            raise ValueError("an atomic system needs at least one atom")
        if len(self.positions) != n:
            raise ValueError(f"{len(self.positions)} positions for {n} atoms")
        if np.any(self.atomic_numbers < 1):
            raise ValueError("atomic numbers must be >= 1")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64).reshape(n, 3)
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=np.float64).reshape(n)
        if n > 1 and cKDTree(self.positions).query_pairs(_COINCIDENT):
            raise ValueError("coincident atoms (distance <= 1e-6 A)")

    def __len__(self) -> int:
        return len(self.atomic_numbers)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def copy(self) -> "AtomicSystem":
        return AtomicSystem(
            self.positions.copy(),
            self.atomic_numbers.copy(),
            self.energy,
            None if self.forces is None else self.forces.copy(),
            None if self.charges is None else self.charges.copy(),
            dict(self.info),
        )


# -- XYZ --------------------------------------------------------------------

def _parse_comment(line: str) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError:
        tokens = line.split()
    out = {}
    for tok in tokens:
        if "=" in tok:
            key, _, value = tok.partition("=")
            out[key.strip().lower()] = value.strip()
    return out


def _properties_layout(spec: str) -> dict[str, tuple[int, int]]:
    """Column ranges per property from an extended-XYZ ``Properties`` string."""
    parts = spec.split(":")
    if len(parts) % 3:
        raise ValueError(f"malformed Properties string {spec!r}")
    layout, col = {}, 0
    for name, _kind, width in zip(parts[::3], parts[1::3], parts[2::3]):
        w = int(width)
        layout[name.lower()] = (col, col + w)
        col += w
    return layout


def parse_xyz(text: str) -> list[AtomicSystem]:
    """Parse one or more (extended-)XYZ frames."""
    lines = text.splitlines()
    systems = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].strip()
        try:
            n = int(head)
        except ValueError:
            raise ValueError(f"line {i + 1}: malformed atom count {head!r}") from None
        if n < 1:
            raise ValueError(f"line {i + 1}: atom count must be positive")
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        info = _parse_comment(comment)
        layout = _properties_layout(info["properties"]) if "properties" in info else {
            "species": (0, 1), "pos": (1, 4)}
        width = max(stop for _, stop in layout.values())
        rows = lines[i + 2: i + 2 + n]
        if len(rows) < n:
            raise ValueError(f"line {i + 1}: frame truncated, expected {n} atoms")
        z = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3))
        charges = np.empty(n) if "charge" in layout else None
        forces = np.empty((n, 3)) if "forces" in layout else None
        for a, row in enumerate(rows):
            cols = row.split()
            if len(cols) < width:
                raise ValueError(f"line {i + 3 + a}: expected {width} columns, got {len(cols)}")
            s0, _ = layout["species"]
            z[a] = symbol_to_number(cols[s0])
            p0, p1 = layout["pos"]
            pos[a] = [float(c) for c in cols[p0:p1]]
            if charges is not None:
                charges[a] = float(cols[layout["charge"][0]])
            if forces is not None:
                f0, f1 = layout["forces"]
                forces[a] = [float(c) for c in cols[f0:f1]]
        energy = float(info["energy"]) if "energy" in info else None
        extra = {k: v for k, v in info.items() if k not in ("energy", "properties")}
        systems.append(AtomicSystem(pos, z, energy, forces, charges, extra))
        i += 2 + n
    return systems


def read_xyz(path) -> list[AtomicSystem]:
    with open(path) as fh:
        return parse_xyz(fh.read())


def format_xyz(systems) -> str:
    if isinstance(systems, AtomicSystem):
        systems = [systems]
    out = []
    for s in systems:
        props = "species:S:1:pos:R:3"
        if s.charges is not None:
            props += ":charge:R:1"
        if s.forces is not None:
            props += ":forces:R:3"
        comment = [f"Properties={props}"]
        if s.energy is not None:
            comment.append(f"energy={float(s.energy)!r}")
        for k, v in s.info.items():
            comment.append(f"{k}={v}")
        out.append(str(s.n_atoms))
        out.append(" ".join(comment))
        for a in range(s.n_atoms):
            cols = [number_to_symbol(int(s.atomic_numbers[a]))]
            cols += [repr(float(x)) for x in s.positions[a]]
            if s.charges is not None:
                cols.append(repr(float(s.charges[a])))
            if s.forces is not None:
                cols += [repr(float(x)) for x in s.forces[a]]
            out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def write_xyz(path, systems) -> None:
    with open(path, "w") as fh:
        fh.write(format_xyz(systems))


# -- graphs -----------------------------------------------------------------

@dataclass
class RadiusGraph:
    """Symmetric directed edge list; ``src[e] -> dst[e]`` with length ``distances[e]``."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    distances: np.ndarray
    cutoff: float
    max_neighbors: int

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def build_radius_graph(system, cutoff: float = DEFAULT_CUTOFF,
                       max_neighbors: int = DEFAULT_MAX_NEIGHBORS) -> RadiusGraph:
    """Radius graph with per-atom neighbor cap, symmetrized by union."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = system.positions if isinstance(system, AtomicSystem) else np.asarray(system, float)
    n = len(pos)
    if n == 1:
        empty = np.zeros(0, dtype=np.int64)
        return RadiusGraph(1, empty, empty.copy(), np.zeros(0), cutoff, max_neighbors)
    kq = min(max_neighbors + 1, n)
    tree = cKDTree(pos)
    dist, nbr = tree.query(pos, k=kq, distance_upper_bound=cutoff * (1 + 1e-9) + 1e-12)
    dist = dist.reshape(n, kq)
    nbr = nbr.reshape(n, kq)
    rows = np.repeat(np.arange(n), kq)
    cols = nbr.reshape(-1)
    ok = (cols < n) & (cols != rows)
    rows, cols = rows[ok], cols[ok]
    # exact distance test, independent of the tree's bound handling
    d = np.linalg.norm(pos[cols] - pos[rows], axis=1)
    keep = d <= cutoff
    rows, cols = rows[keep], cols[keep]
    pairs = np.concatenate([np.stack([rows, cols], 1), np.stack([cols, rows], 1)])
    pairs = np.unique(pairs, axis=0)
    src, dst = pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)
    dists = np.linalg.norm(pos[dst] - pos[src], axis=1)
    return RadiusGraph(n, src, dst, dists, float(cutoff), int(max_neighbors))


def build_weighted_laplacian(graph: RadiusGraph, weights: np.ndarray | None = None) -> sp.csr_matrix:
    """Symmetric normalized Laplacian ``I - D^-1/2 W D^-1/2`` with ``W_ij = d_ij``.

    Rows and columns of isolated nodes are left at zero.
    """
    w = graph.distances if weights is None else np.asarray(weights, float)
    if np.any(w < 0):
        raise ValueError("negative edge distance")
    n = graph.n_nodes
    deg = np.bincount(graph.src, weights=w, minlength=n)
    connected = deg > 0
    inv_sqrt = np.zeros(n)
    inv_sqrt[connected] = 1.0 / np.sqrt(deg[connected])
    # pair the two scale factors first so entries (i, j) and (j, i) round identically
    off = -w * (inv_sqrt[graph.src] * inv_sqrt[graph.dst])
    diag = np.flatnonzero(connected)
    rows = np.concatenate([graph.src, diag])
    cols = np.concatenate([graph.dst, diag])
    vals = np.concatenate([off, np.ones(len(diag))])
    L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    L.sum_duplicates()
    L.sort_indices()
    return L


@dataclass
class BatchedLaplacian:
    blocks: list
    offsets: list[tuple[int, int]]

    @property
    def n_nodes(self) -> int:
        return self.offsets[-1][1] if self.offsets else 0

    def __len__(self) -> int:
        return len(self.blocks)

    def assemble(self) -> sp.csr_matrix:
        """Explicit block-diagonal matrix (tests and node-space residuals)."""
        n = self.n_nodes
        if not self.blocks:
            return sp.csr_matrix((0, 0))
        data = np.concatenate([b.data for b in self.blocks])
        indices = np.concatenate([b.indices + lo for b, (lo, _) in zip(self.blocks, self.offsets)])
        nnz = np.cumsum([0] + [b.nnz for b in self.blocks])
        indptr = np.concatenate([[0]] + [b.indptr[1:] + z for b, z in zip(self.blocks, nnz)])
        return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def block_diag_batch(mats) -> BatchedLaplacian:
    offsets, start = [], 0
    blocks = []
    for m in mats:
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"block must be square, got {m.shape}")
        blocks.append(sp.csr_matrix(m))
        offsets.append((start, start + m.shape[0]))
        start += m.shape[0]
    return BatchedLaplacian(blocks, offsets)
