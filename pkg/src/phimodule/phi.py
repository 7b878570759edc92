"""The Phi-Module: learned potential/charge pairs in the Laplacian eigenbasis.

After every interaction layer of the host, the alpha-Net maps node features
to per-graph coefficient vectors ``alpha_phi`` and ``alpha_rho``.  They are
accumulated into node potentials ``phi = U alpha_phi`` and charges
``rho = U Lambda alpha_rho``.  The electrostatic energy ``0.5 * rho . phi``
is added to the host energy, and two self-supervised penalties are
returned: the Poisson residual ``||L phi - rho||`` and the net charge
``|sum rho|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .batch import GraphBatch, PreparedSystem, collate, prepare_system
from .eigensolver import SpectralBasis
from .potential import (
    HostConfig,
    edge_distances,
    embed,
    init_host_params,
    interaction_step,
    rbf_expand,
    readout_energy,
)
from .tensor import Tensor

__all__ = [
    "PhiConfig",
    "PhiState",
    "Spectral",
    "PhiModel",
    "ForwardOutput",
    "init_alpha_params",
    "alpha_net_forward",
    "accumulate",
    "pde_residual",
    "spectral_residual",
    "net_charge_penalty",
    "electrostatic_energy",
    "electrostatic_energy_spectral",
    "laplacian_rayleigh",
    "phi_forward",
    "prepare_for_model",
    "predict_energy",
]


@dataclass
class PhiConfig:
    k: int = 9
    beta: float = 1e-4
    gamma: float = 1e-4
    kernel_size: int = 1
    hidden_channels: int | None = None
    largest: bool = False
    eig_tol: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


def init_alpha_params(cfg: PhiConfig, n_features: int, rng: np.random.Generator,
                      zero: bool = False, head_scale: float = 0.1) -> dict[str, Tensor]:
    C = cfg.hidden_channels or max(n_features // 2, 1)
    K = cfg.kernel_size

    def conv(cin, cout):
        bound = math.sqrt(6.0 / (K * cin + cout))
        return rng.uniform(-bound, bound, (K, cin, cout))

    def head(cin, cout):
        bound = head_scale * math.sqrt(6.0 / (cin + cout))
        return rng.uniform(-bound, bound, (cin, cout))

    p = {
        "alpha.conv1.weight": conv(n_features, C),
        "alpha.conv1.bias": np.zeros(C),
        "alpha.conv2.weight": conv(C, C),
        "alpha.conv2.bias": np.zeros(C),
        "alpha.head_phi.weight": head(C, cfg.k),
        "alpha.head_phi.bias": np.zeros(cfg.k),
        "alpha.head_rho.weight": head(C, cfg.k),
        "alpha.head_rho.bias": np.zeros(cfg.k),
    }
    if zero:
        p = {k: np.zeros_like(v) for k, v in p.items()}
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def alpha_net_forward(h: Tensor, params: dict, graph_index, n_graphs: int,
                      activation: str = "shifted-softplus") -> tuple[Tensor, Tensor]:
    """conv -> act -> conv -> act -> mean pool -> two affine heads, per graph."""
    x = T.conv1d_nodes(h, params["alpha.conv1.weight"], graph_index) + params["alpha.conv1.bias"]
    x = T.activation(x, activation)
    x = T.conv1d_nodes(x, params["alpha.conv2.weight"], graph_index) + params["alpha.conv2.bias"]
    x = T.activation(x, activation)
    pooled = T.global_mean_pool(x, graph_index, n_graphs)
    a_phi = T.linear(pooled, params["alpha.head_phi.weight"], params["alpha.head_phi.bias"])
    a_rho = T.linear(pooled, params["alpha.head_rho.weight"], params["alpha.head_rho.bias"])
    return a_phi, a_rho


@dataclass
class Spectral:
    """Padded eigenpairs of a batch: ``U`` (N, k), ``lam``/``mask`` (G, k)."""

    U: np.ndarray
    lam: np.ndarray
    mask: np.ndarray
    graph_index: np.ndarray

    @property
    def n_graphs(self) -> int:
        return self.lam.shape[0]

    @property
    def k(self) -> int:
        return self.lam.shape[1]

    @classmethod
    def from_batch(cls, batch: GraphBatch) -> "Spectral":
        return cls(batch.U, batch.lam, batch.mode_mask, batch.graph_index)

    @classmethod
    def from_basis(cls, basis: SpectralBasis) -> "Spectral":
        n, k = basis.U.shape
        return cls(basis.U, basis.lam[None, :].copy(), np.ones((1, k)), np.zeros(n, dtype=np.intp))


@dataclass
class PhiState:
    phi: Tensor
    rho: Tensor
    alpha_phi_acc: Tensor
    alpha_rho_acc: Tensor
    layers: int = 0

    @classmethod
    def zeros(cls, n_nodes: int, n_graphs: int, k: int) -> "PhiState":
        z = Tensor._wrap
        return cls(z(np.zeros(n_nodes)), z(np.zeros(n_nodes)),
                   z(np.zeros((n_graphs, k))), z(np.zeros((n_graphs, k))))


def _expand(coeffs: Tensor, spec: Spectral) -> Tensor:
    """Node-space signal ``U alpha`` with one coefficient vector per graph."""
    return T.gather_rowdot(coeffs, spec.graph_index, spec.U)


def accumulate(state: PhiState, spec: Spectral, alpha_phi, alpha_rho) -> PhiState:
    """``phi += U a_phi``, ``rho += U Lambda a_rho`` (assignment on the first layer)."""
    alpha_phi, alpha_rho = T.as_tensor(alpha_phi), T.as_tensor(alpha_rho)
    if alpha_phi.ndim == 1:
        alpha_phi = T.reshape(alpha_phi, (1, -1))
        alpha_rho = T.reshape(alpha_rho, (1, -1))
    if alpha_phi.shape != spec.lam.shape or alpha_rho.shape != spec.lam.shape:
        raise ValueError(f"coefficient shape {alpha_phi.shape} does not match k={spec.k}")
    a_phi = alpha_phi * spec.mask
    a_rho = alpha_rho * spec.mask
    d_phi = _expand(a_phi, spec)
    d_rho = _expand(a_rho * spec.lam, spec)
    if state.layers == 0:
        return PhiState(d_phi, d_rho, a_phi, a_rho, 1)
    return PhiState(state.phi + d_phi, state.rho + d_rho,
                    state.alpha_phi_acc + a_phi, state.alpha_rho_acc + a_rho,
                    state.layers + 1)


def pde_residual(state: PhiState, L, graph_index=None, n_graphs: int = 1) -> Tensor:
    """Per-graph ``||L phi - rho||_2`` (unweighted)."""
    r = T.spmv(L, state.phi) - state.rho
    gidx = np.zeros(len(r), dtype=np.intp) if graph_index is None else graph_index
    return T.segment_norm(r, gidx, n_graphs)


def spectral_residual(state: PhiState, lam) -> Tensor:
    """Per-graph ``||Lambda (a_phi - a_rho)||_2``; equals the node form inside span(U)."""
    diff = (state.alpha_phi_acc - state.alpha_rho_acc) * lam
    G, k = diff.shape
    return T.segment_norm(T.reshape(diff, (-1,)), np.repeat(np.arange(G), k), G)


def net_charge_penalty(state: PhiState, graph_index=None, n_graphs: int = 1) -> Tensor:
    gidx = np.zeros(len(state.rho), dtype=np.intp) if graph_index is None else graph_index
    return T.tabs(T.scatter_add(state.rho, gidx, n_graphs))


def electrostatic_energy(state: PhiState, graph_index=None, n_graphs: int = 1) -> Tensor:
    """Per-graph ``0.5 * sum_i rho_i phi_i``."""
    gidx = np.zeros(len(state.rho), dtype=np.intp) if graph_index is None else graph_index
    return 0.5 * T.scatter_add(state.rho * state.phi, gidx, n_graphs)


def electrostatic_energy_spectral(state: PhiState, lam) -> Tensor:
    """Basis-independent form ``0.5 * a_rho^T Lambda a_phi`` per graph."""
    return 0.5 * T.tsum(state.alpha_rho_acc * lam * state.alpha_phi_acc, axis=1)


def laplacian_rayleigh(distances: Tensor, batch: GraphBatch) -> Tensor:
    """``u_m^T L(x) u_m`` for every retained mode, differentiable in the distances.

    With ``u_m`` held fixed this equals ``lambda_m`` and its gradient is the
    Hellmann-Feynman derivative ``u^T (dL/dx) u``.
    """
    N, G = batch.n_nodes, batch.n_graphs
    U = batch.U
    deg = T.scatter_add(distances, batch.src, N)
    denom = T.sqrt(T.gather(deg, batch.src) * T.gather(deg, batch.dst))
    f = T.reshape(distances / denom, (-1, 1))
    uu = U[batch.src] * U[batch.dst]
    off = T.scatter_add(f * uu, batch.edge_graph, G)
    connected = np.bincount(batch.src, minlength=N) > 0
    diag = np.zeros((G, U.shape[1]))
    np.add.at(diag, batch.graph_index, (U * U) * connected[:, None])
    return diag - off


class PhiModel:
    """Host potential with an optional Phi-Module (``phi=None`` is the bare host).

    Host and alpha-Net parameters come from independent seed streams, so a
    bare host and a Phi-augmented model built with the same seed share
    identical host weights.
    """

    def __init__(self, host: HostConfig | None = None, phi: PhiConfig | None = None,
                 seed: int = 0, alpha_init: str = "random"):
        self.host = host or HostConfig()
        self.phi = phi
        self.seed = seed
        host_ss, alpha_ss = np.random.SeedSequence(seed).spawn(2)
        self.params: dict[str, Tensor] = init_host_params(
            self.host, np.random.Generator(np.random.Philox(host_ss)))
        if phi is not None:
            self.params.update(init_alpha_params(
                phi, self.host.n_features, np.random.Generator(np.random.Philox(alpha_ss)),
                zero=(alpha_init == "zero")))
        self.energy_scale = 1.0
        self.energy_shift = 0.0

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "PhiModel":
        other = PhiModel.__new__(PhiModel)
        other.host, other.phi, other.seed = self.host, self.phi, self.seed
        other.params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        other.energy_scale, other.energy_shift = self.energy_scale, self.energy_shift
        return other

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())


@dataclass
class ForwardOutput:
    energy: Tensor
    e_model: Tensor
    e_es: Tensor | None = None
    l_pde: Tensor | None = None
    l_net: Tensor | None = None
    state: PhiState | None = None
    extras: dict = field(default_factory=dict)


def phi_forward(batch: GraphBatch, model: PhiModel, positions: Tensor | None = None,
                energy_form: str = "node") -> ForwardOutput:
    """Message passing with the Phi-Module for one batch.

    ``energy_form='node'`` evaluates ``0.5 rho.phi`` on the nodes;
    ``'spectral'`` uses ``0.5 a_rho Lambda a_phi`` and, when ``positions``
    carries a gradient, tape-differentiable eigenvalues (forces).
    """
    hc, params = model.host, model.params
    if positions is None:
        d = Tensor._wrap(batch.distances)
    else:
        d = edge_distances(positions, batch.src, batch.dst)
    rbf = rbf_expand(d, hc)
    h = embed(batch.numbers, params["embedding"])
    G = batch.n_graphs
    spec = state = None
    if model.phi is not None:
        if batch.U is None:
            raise ValueError("batch has no spectral basis; collate with k")
        spec = Spectral.from_batch(batch)
        state = PhiState.zeros(batch.n_nodes, G, spec.k)
    for t in range(hc.n_interactions):
        h = interaction_step(h, batch.src, batch.dst, rbf, params, t, hc.activation)
        if spec is not None:
            a_phi, a_rho = alpha_net_forward(h, params, batch.graph_index, G, hc.activation)
            state = accumulate(state, spec, a_phi, a_rho)
    e_model = readout_energy(h, batch.graph_index, G, params, hc.activation,
                             model.energy_scale, model.energy_shift, batch.n_atoms)
    if spec is None:
        return ForwardOutput(e_model, e_model)
    if energy_form == "node":
        e_es = electrostatic_energy(state, batch.graph_index, G)
    elif energy_form == "spectral":
        if positions is not None and positions.requires_grad and batch.laplacian_kind == "distance":
            lam = laplacian_rayleigh(d, batch) * spec.mask
        else:
            lam = spec.lam
        e_es = electrostatic_energy_spectral(state, lam)
    else:
        raise ValueError(f"unknown energy_form {energy_form!r}")
    l_pde = pde_residual(state, batch.L, batch.graph_index, G)
    l_net = net_charge_penalty(state, batch.graph_index, G)
    return ForwardOutput(e_model + e_es, e_model, e_es, l_pde, l_net, state)


def prepare_for_model(system, model: PhiModel, seed: int = 0, extra_modes: int = 0,
                      laplacian=None) -> tuple[PreparedSystem, GraphBatch]:
    k = model.phi.k if model.phi is not None else None
    tol = model.phi.eig_tol if model.phi is not None else 1e-8
    largest = model.phi.largest if model.phi is not None else False
    prepared = prepare_system(system, k, model.host.cutoff, model.host.max_neighbors,
                              tol=tol, seed=seed, largest=largest, laplacian=laplacian,
                              extra_modes=extra_modes if k is not None else 0)
    return prepared, collate([prepared], k)


def predict_energy(system, model: PhiModel, seed: int = 0) -> float:
    _, batch = prepare_for_model(system, model, seed=seed)
    return float(phi_forward(batch, model).energy.data[0])
