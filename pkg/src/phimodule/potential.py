"""Minimal continuous-filter message-passing host potential.

Atoms are embedded by element, refined by interaction layers whose filters
are generated from a Gaussian expansion of interatomic distances, and read
out as a sum of per-atom energies.  The Phi-Module plugs in between
interaction layers (see :mod:`phimodule.phi`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

__all__ = [
    "HostConfig",
    "init_host_params",
    "embed",
    "rbf_expand",
    "cosine_window",
    "edge_distances",
    "interaction_step",
    "readout_energy",
    "forces",
    "DegenerateSpectrumWarning",
]

log = logging.getLogger(__name__)


@dataclass
class HostConfig:
    n_features: int = 64
    n_interactions: int = 3
    n_rbf: int = 32
    cutoff: float = 6.0
    max_neighbors: int = 50
    z_max: int = 100
    activation: str = "shifted-softplus"


def _dense(rng, fan_in, fan_out, scale=1.0):
    bound = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_host_params(cfg: HostConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    F, R = cfg.n_features, cfg.n_rbf
    p = {"embedding": rng.standard_normal((cfg.z_max, F)) / math.sqrt(F)}
    for l in range(cfg.n_interactions):
        p[f"interaction{l}.filter"] = _dense(rng, R, F)
        p[f"interaction{l}.node"] = _dense(rng, F, F)
        p[f"interaction{l}.update1.weight"] = _dense(rng, F, F)
        p[f"interaction{l}.update1.bias"] = np.zeros(F)
        p[f"interaction{l}.update2.weight"] = _dense(rng, F, F)
        p[f"interaction{l}.update2.bias"] = np.zeros(F)
    H = max(F // 2, 1)
    p["readout1.weight"] = _dense(rng, F, H)
    p["readout1.bias"] = np.zeros(H)
    p["readout2.weight"] = _dense(rng, H, 1)
    p["readout2.bias"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def embed(atomic_numbers, table: Tensor) -> Tensor:
    """Row lookup ``h0[i] = table[Z_i - 1]``."""
    z = np.asarray(atomic_numbers, dtype=np.intp)
    if z.size and (z.min() < 1 or z.max() > table.shape[0]):
        raise ValueError(f"atomic number outside embedding table (1..{table.shape[0]})")
    return T.gather(table, z - 1)


def rbf_centers(cfg: HostConfig) -> tuple[np.ndarray, float]:
    centers = np.linspace(0.0, cfg.cutoff, cfg.n_rbf)
    spacing = centers[1] - centers[0] if cfg.n_rbf > 1 else cfg.cutoff
    return centers, 0.5 / spacing**2


def cosine_window(d, cutoff: float) -> Tensor:
    """``0.5 (cos(pi d / r_c) + 1)``; callers only pass ``d <= r_c``."""
    return 0.5 * (T.cos(T.as_tensor(d) * (math.pi / cutoff)) + 1.0)


def rbf_expand(d, cfg: HostConfig) -> Tensor:
    """Gaussian expansion of distances, multiplied by the cosine window."""
    d = T.as_tensor(d)
    if d.data.size and (d.data.min() < 0 or d.data.max() > cfg.cutoff * (1 + 1e-12)):
        raise ValueError("distances must lie in [0, cutoff]")
    centers, gamma = rbf_centers(cfg)
    col = T.reshape(d, (-1, 1))
    diff = col - centers[None, :]
    g = T.exp(T.square(diff) * (-gamma))
    return g * T.reshape(cosine_window(d, cfg.cutoff), (-1, 1))


def edge_distances(positions: Tensor, src, dst) -> Tensor:
    vec = T.gather(positions, dst) - T.gather(positions, src)
    return T.sqrt(T.tsum(T.square(vec), axis=1))


def interaction_step(h: Tensor, src, dst, rbf: Tensor, params: dict, layer: int,
                     activation: str = "shifted-softplus") -> Tensor:
    """``h' = h + update(sum_j (h_j W_node) * filter(e_ij))``."""
    pre = f"interaction{layer}."
    n = h.shape[0]
    x = h @ params[pre + "node"]
    if len(src):
        filt = rbf @ params[pre + "filter"]
        m = T.scatter_add(T.gather(x, src) * filt, dst, n)
    else:
        m = T.Tensor._wrap(np.zeros_like(x.data))
    v = T.activation(T.linear(m, params[pre + "update1.weight"], params[pre + "update1.bias"]),
                     activation)
    v = T.linear(v, params[pre + "update2.weight"], params[pre + "update2.bias"])
    return h + v


def readout_energy(h: Tensor, graph_index, n_graphs: int, params: dict,
                   activation: str = "shifted-softplus", scale: float = 1.0,
                   shift: float = 0.0, n_atoms=None) -> Tensor:
    """Sum of per-atom energies per graph (``scale * sum + shift * n_atoms``)."""
    a = T.activation(T.linear(h, params["readout1.weight"], params["readout1.bias"]), activation)
    e_atom = T.reshape(T.linear(a, params["readout2.weight"], params["readout2.bias"]), (-1,))
    e = T.scatter_add(e_atom, graph_index, n_graphs)
    if scale != 1.0:
        e = e * scale
    if shift != 0.0:
        if n_atoms is None:
            n_atoms = np.bincount(np.asarray(graph_index), minlength=n_graphs)
        e = e + shift * np.asarray(n_atoms, dtype=np.float64)
    return e


class DegenerateSpectrumWarning(UserWarning):
    pass


def forces(system, model, mode: str = "autodiff", step: float = 1e-4,
           degeneracy_tol: float = 1e-8, seed: int = 0):
    """Forces ``-dE/dx`` for a single system.

    ``autodiff`` differentiates the tape through the host and alpha-Net and
    adds Hellmann-Feynman terms for the Laplacian eigenvalues; ``fd-oracle``
    uses central differences of the full energy (graph, Laplacian and
    eigenpairs rebuilt at every displaced geometry).

    Returns ``(forces (n, 3), energy)``.
    """
    import warnings

    from .phi import predict_energy, phi_forward, prepare_for_model

    if mode == "fd-oracle":
        return _fd_forces(system, model, step, seed), predict_energy(system, model, seed=seed)
    if mode != "autodiff":
        raise ValueError(f"unknown force mode {mode!r}")

    prepared, batch = prepare_for_model(system, model, seed=seed, extra_modes=1)
    if model.phi is not None and prepared.basis is not None:
        lam = prepared.basis.lam
        k = min(model.phi.k, len(lam))
        check = lam[: min(k + 1, len(lam))]
        if len(check) > 1 and np.min(np.diff(check)) < degeneracy_tol:
            warnings.warn("degenerate Laplacian eigenvalues; using finite-difference forces",
                          DegenerateSpectrumWarning, stacklevel=2)
            return _fd_forces(system, model, step, seed), predict_energy(system, model, seed=seed)
    pos = Tensor(system.positions, requires_grad=True)
    with Tape() as tape:
        out = phi_forward(batch, model, positions=pos, energy_form="spectral")
        energy = T.tsum(out.energy)
    if len(tape) == 0:
        return np.zeros_like(system.positions), float(energy.data)
    grads = tape.backward(energy)
    return -grads[pos], float(energy.data)


def _fd_forces(system, model, step, seed):
    from .phi import predict_energy

    work = system.copy()
    f = np.zeros_like(system.positions)
    for i in range(system.n_atoms):
        for c in range(3):
            x0 = work.positions[i, c]
            work.positions[i, c] = x0 + step
            ep = predict_energy(work, model, seed=seed)
            work.positions[i, c] = x0 - step
            em = predict_energy(work, model, seed=seed)
            work.positions[i, c] = x0
            f[i, c] = -(ep - em) / (2.0 * step)
    return f
