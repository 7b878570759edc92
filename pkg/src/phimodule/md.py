"""NVE molecular dynamics with velocity Verlet and energy-drift diagnostics.

Units: amu, eV, Angstrom, fs.  One amu*A^2/fs^2 is ``ENERGY_UNIT`` eV, so
``a = F / m / ENERGY_UNIT`` and ``E_kin = 0.5 m v^2 * ENERGY_UNIT``.
Passing ``unit=1`` gives plain reduced units (used by analytic tests).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .elements import atomic_mass
from .molgraph import AtomicSystem, format_xyz

__all__ = [
    "ENERGY_UNIT",
    "BOLTZMANN_EV",
    "MDState",
    "velocity_verlet_step",
    "kinetic_energy",
    "maxwell_boltzmann",
    "nve_run",
    "energy_drift",
    "drift_trend",
    "model_force_fn",
    "lj_force_fn",
    "restraint_force_fn",
    "combine_force_fns",
    "write_drift_csv",
]

ENERGY_UNIT = 103.642696562  # eV per amu*A^2/fs^2
BOLTZMANN_EV = 8.617333262e-5  # eV/K

ForceFn = Callable[[np.ndarray], tuple[np.ndarray, float]]


@dataclass
class MDState:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    time: float = 0.0
    unit: float = ENERGY_UNIT
    trace: list = field(default_factory=list)  # (t, e_total, e_kin, e_pot)
    forces: np.ndarray | None = None
    potential: float | None = None
    force_evals: int = 0
    steps: int = 0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.array(self.velocities, dtype=np.float64).reshape(-1, 3)
        self.masses = np.array(self.masses, dtype=np.float64).reshape(-1)
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if not (len(self.masses) == len(self.positions) == len(self.velocities)):
            raise ValueError("positions, velocities and masses disagree in length")

    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)

    def record(self) -> None:
        ek = kinetic_energy(self.velocities, self.masses, self.unit)
        if self.trace and self.time <= self.trace[-1][0]:
            raise ValueError("trace times must increase")
        self.trace.append((self.time, ek + self.potential, ek, self.potential))


def kinetic_energy(velocities, masses, unit: float = ENERGY_UNIT) -> float:
    return float(0.5 * unit * np.sum(masses[:, None] * velocities * velocities))


def _evaluate(state: MDState, force_fn: ForceFn) -> None:
    f, e = force_fn(state.positions)
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)) or not math.isfinite(e):
        raise FloatingPointError(f"non-finite force or energy at t = {state.time} fs")
    state.forces, state.potential = f, float(e)
    state.force_evals += 1


def velocity_verlet_step(state: MDState, force_fn: ForceFn, dt: float) -> MDState:
    """One step; reuses the cached forces so each step costs one evaluation."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.forces is None:
        _evaluate(state, force_fn)
    inv_m = 1.0 / (state.masses[:, None] * state.unit)
    a0 = state.forces * inv_m
    state.positions = state.positions + dt * state.velocities + 0.5 * dt * dt * a0
    _evaluate(state, force_fn)
    a1 = state.forces * inv_m
    state.velocities = state.velocities + 0.5 * dt * (a0 + a1)
    state.time += dt
    state.steps += 1
    return state


def maxwell_boltzmann(masses, temperature: float, rng: np.random.Generator,
                      unit: float = ENERGY_UNIT) -> np.ndarray:
    """Gaussian velocities at ``temperature`` with the total momentum removed."""
    masses = np.asarray(masses, dtype=np.float64)
    sigma = np.sqrt(BOLTZMANN_EV * temperature / (masses * unit))
    v = rng.standard_normal((len(masses), 3)) * sigma[:, None]
    if len(masses) > 1:
        v -= (masses[:, None] * v).sum(axis=0) / masses.sum()
    return v


def nve_run(system: AtomicSystem, force_fn: ForceFn, steps: int, dt: float = 0.5,
            temperature: float = 300.0, seed: int = 0, velocities=None,
            masses=None, unit: float = ENERGY_UNIT, trajectory_path: str | None = None,
            trajectory_every: int = 100) -> MDState:
    """Integrate ``steps`` velocity-Verlet steps, recording the total energy each step."""
    m = np.array([atomic_mass(int(z)) for z in system.atomic_numbers]) if masses is None \
        else np.asarray(masses, dtype=np.float64)
    if velocities is None:
        rng = np.random.Generator(np.random.Philox(seed))
        velocities = maxwell_boltzmann(m, temperature, rng, unit)
    state = MDState(system.positions, velocities, m, unit=unit)
    _evaluate(state, force_fn)
    state.record()
    traj = open(trajectory_path, "w") if trajectory_path else None
    try:
        for i in range(steps):
            velocity_verlet_step(state, force_fn, dt)
            state.record()
            if traj and (i + 1) % trajectory_every == 0:
                frame = AtomicSystem(state.positions, system.atomic_numbers,
                                     energy=state.trace[-1][1], forces=state.forces,
                                     info={"time_fs": repr(state.time)})
                traj.write(format_xyz(frame))
    finally:
        if traj:
            traj.close()
    return state


def energy_drift(trace) -> tuple[float, float, bool]:
    """``(max |E(t) - E(0)| / |E(0)|, least-squares slope per ps, absolute_flag)``.

    With a zero initial energy the absolute drift (and absolute slope) is
    reported instead and the flag is set.
    """
    arr = np.asarray(trace, dtype=np.float64)
    if arr.ndim != 2 or len(arr) < 2:
        raise ValueError("trace needs at least two points")
    t, e = arr[:, 0], arr[:, 1]
    e0 = e[0]
    absolute = e0 == 0.0
    dev = e - e0
    scale = 1.0 if absolute else abs(e0)
    slope = np.polyfit(t, dev / scale, 1)[0] * 1000.0
    return float(np.max(np.abs(dev)) / scale), float(slope), bool(absolute)


def drift_trend(trace, n_blocks: int = 20, confidence: float = 0.95) -> dict:
    """Slope of block-averaged total energy with a t-based confidence interval.

    Block means over long windows are close to independent even though the
    per-step energy is strongly autocorrelated.  ``consistent_with_zero`` is
    True when the interval contains 0.
    """
    arr = np.asarray(trace, dtype=np.float64)
    t, e = arr[:, 0], arr[:, 1]
    n_blocks = min(n_blocks, len(t) // 2)
    if n_blocks < 3:
        raise ValueError("trace too short for a trend test")
    edges = np.linspace(0, len(t), n_blocks + 1).astype(int)
    tb = np.array([t[a:b].mean() for a, b in zip(edges[:-1], edges[1:])])
    eb = np.array([e[a:b].mean() for a, b in zip(edges[:-1], edges[1:])])
    res = stats.linregress(tb, eb)
    q = stats.t.ppf(0.5 + confidence / 2.0, n_blocks - 2)
    lo, hi = res.slope - q * res.stderr, res.slope + q * res.stderr
    return {"slope": float(res.slope), "stderr": float(res.stderr), "ci": (float(lo), float(hi)),
            "consistent_with_zero": bool(lo <= 0.0 <= hi), "n_blocks": n_blocks}


def write_drift_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_fs", "e_total", "e_kin", "e_pot"])
        for row in trace:
            w.writerow([repr(float(x)) for x in row])


# -- force providers --------------------------------------------------------------------

def model_force_fn(model, template: AtomicSystem, mode: str = "autodiff",
                   seed: int = 0) -> ForceFn:
    """Forces and energy of a trained or fixed model at new positions."""
    from .potential import forces

    def fn(pos):
        sys_ = AtomicSystem(pos, template.atomic_numbers)
        return forces(sys_, model, mode=mode, seed=seed)

    return fn


def lj_force_fn(epsilon: float, sigma: float) -> ForceFn:
    """All-pairs Lennard-Jones (no cutoff)."""

    def fn(pos):
        diff = pos[:, None, :] - pos[None, :, :]
        r2 = np.sum(diff * diff, axis=-1)
        np.fill_diagonal(r2, np.inf)
        s6 = (sigma * sigma / r2) ** 3
        e = 0.5 * np.sum(np.where(np.isfinite(r2), 4.0 * epsilon * (s6 * s6 - s6), 0.0))
        coef = 24.0 * epsilon * (2.0 * s6 * s6 - s6) / r2
        return np.sum(coef[:, :, None] * diff, axis=1), float(e)

    return fn


def restraint_force_fn(k_spring: float, radius: float) -> ForceFn:
    """Flat-bottom harmonic wall on each atom's distance from the centroid.

    Zero inside ``radius``; the net force is not zero in general, so the
    centroid is defined with equal weights and the reaction is spread evenly,
    which keeps the total force (and momentum) conserved.
    """

    def fn(pos):
        c = pos.mean(axis=0)
        d = pos - c
        r = np.linalg.norm(d, axis=1)
        over = np.maximum(r - radius, 0.0)
        e = 0.5 * k_spring * np.sum(over * over)
        safe = np.where(r > 0, r, 1.0)
        g = (k_spring * over / safe)[:, None] * d  # dE/dx_i ignoring the centroid term
        g = g - g.mean(axis=0)
        return -g, float(e)

    return fn


def combine_force_fns(*fns: ForceFn) -> ForceFn:
    def fn(pos):
        f_total, e_total = None, 0.0
        for f in fns:
            fi, ei = f(pos)
            f_total = fi if f_total is None else f_total + fi
            e_total += ei
        return f_total, e_total

    return fn
