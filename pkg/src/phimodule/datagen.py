"""Synthetic point-charge molecules with exact energies, and carbyne chains.

Energies are in reduced units: charges in e, distances in Angstrom and a
Coulomb constant of one.  Charges are written to the systems for
diagnostics only; models never read them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .molgraph import AtomicSystem

__all__ = [
    "SyntheticSpec",
    "CHARGED_PAIRS",
    "NEUTRAL_FILLER",
    "coulomb_lj_energy",
    "gen_point_charge_set",
    "gen_carbyne_chain",
    "split_indices",
    "split_dataset",
    "GenerationError",
]

# (cation Z, anion Z, |q|); each species always carries the same charge so
# that charges are a function of the element and therefore learnable
CHARGED_PAIRS = ((3, 9, 1.0), (11, 17, 1.0), (12, 8, 0.5))
NEUTRAL_FILLER = 6
CHARGE_QUANTUM = 1.0 / 64.0


class GenerationError(RuntimeError):
    pass


@dataclass
class SyntheticSpec:
    n_molecules: int = 2000
    atoms_min: int = 8
    atoms_max: int = 16
    box: float = 9.0
    seed: int = 0
    box_min: float | None = None
    charge_scheme: str = "neutral-pairs"
    lj_epsilon: float = 0.02
    lj_sigma: float = 2.2
    max_attempts: int = 1000

    def __post_init__(self):
        if self.atoms_min < 2:
            raise ValueError("atoms_min must be >= 2")
        if self.atoms_max < self.atoms_min:
            raise ValueError("atoms_max < atoms_min")
        if self.n_molecules < 0:
            raise ValueError("n_molecules must be >= 0")
        if self.box <= 0:
            raise ValueError("box must be positive")
        if self.box_min is not None and not 0 < self.box_min <= self.box:
            raise ValueError("box_min must lie in (0, box]")
        if self.charge_scheme not in ("neutral-pairs", "random-neutralized"):
            raise ValueError(f"unknown charge scheme {self.charge_scheme!r}")


def coulomb_lj_energy(system: AtomicSystem, lj_epsilon: float = 0.0,
                      lj_sigma: float = 1.0) -> float:
    """``sum_{i<j} q_i q_j / d_ij + 4 eps ((s/d)^12 - (s/d)^6)``."""
    if system.charges is None:
        raise ValueError("system has no charges")
    if system.n_atoms < 2:
        return 0.0
    d = pdist(system.positions)
    if np.any(d <= 1e-6):
        raise ValueError("coincident atoms")
    q = system.charges
    i, j = np.triu_indices(system.n_atoms, 1)
    e = np.sum(q[i] * q[j] / d)
    if lj_epsilon:
        s6 = (lj_sigma / d) ** 6
        e += np.sum(4.0 * lj_epsilon * (s6 * s6 - s6))
    return float(e)


def _species(n: int, scheme: str, rng: np.random.Generator):
    if scheme == "neutral-pairs":
        n_pairs = n // 2
        pick = rng.integers(0, len(CHARGED_PAIRS), n_pairs)
        z, q = [], []
        for p in pick:
            cat, an, mag = CHARGED_PAIRS[p]
            z += [cat, an]
            q += [mag, -mag]
        if n % 2:
            z.append(NEUTRAL_FILLER)
            q.append(0.0)
        order = rng.permutation(n)
        return np.array(z)[order], np.array(q)[order]
    # random-neutralized: dyadic charges so the balancing atom makes the sum exactly zero
    q = np.round(rng.uniform(-1.0, 1.0, n) / CHARGE_QUANTUM) * CHARGE_QUANTUM
    q[-1] = -np.sum(q[:-1])
    z = rng.choice([pair[i] for pair in CHARGED_PAIRS for i in (0, 1)], n)
    return z, q


def _place(n: int, spec: SyntheticSpec, box: float, rng: np.random.Generator) -> np.ndarray:
    dmin = 0.8 * spec.lj_sigma
    for _ in range(spec.max_attempts):
        pos = np.empty((n, 3))
        placed = 0
        for _ in range(200 * n):
            cand = rng.uniform(0.0, box, 3)
            if placed == 0 or np.min(np.linalg.norm(pos[:placed] - cand, axis=1)) >= dmin:
                pos[placed] = cand
                placed += 1
                if placed == n:
                    return pos
    raise GenerationError(f"could not place {n} atoms in box {box} with d_min {dmin:.3f}")


def gen_point_charge_set(spec: SyntheticSpec) -> list[AtomicSystem]:
    """Reproducible labelled molecules; one Philox stream per molecule."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_molecules)
    out = []
    for m, ss in enumerate(children):
        rng = np.random.Generator(np.random.Philox(ss))
        n = int(rng.integers(spec.atoms_min, spec.atoms_max + 1))
        z, q = _species(n, spec.charge_scheme, rng)
        box = spec.box if spec.box_min is None else float(rng.uniform(spec.box_min, spec.box))
        pos = _place(n, spec, box, rng)
        sys_ = AtomicSystem(pos, z, charges=q, info={"index": m})
        sys_.energy = coulomb_lj_energy(sys_, spec.lj_epsilon, spec.lj_sigma)
        out.append(sys_)
    return out


def gen_carbyne_chain(n_atoms: int, spacing: float = 1.3) -> AtomicSystem:
    """Collinear carbon atoms along x at uniform spacing."""
    if n_atoms < 2:
        raise ValueError("a chain needs at least 2 atoms")
    pos = np.zeros((n_atoms, 3))
    pos[:, 0] = spacing * np.arange(n_atoms)
    return AtomicSystem(pos, np.full(n_atoms, 6))


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Seed-stable shuffle into train/val/test index arrays."""
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise ValueError("split fractions must sum to 1")
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split_dataset(systems, seed: int, fractions=(0.8, 0.1, 0.1)):
    tr, va, te = split_indices(len(systems), seed, fractions)
    return [systems[i] for i in tr], [systems[i] for i in va], [systems[i] for i in te]
