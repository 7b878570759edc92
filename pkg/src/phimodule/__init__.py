"""Spectral electrostatics plug-in for message-passing interatomic potentials.

A learned potential ``phi`` and charge ``rho`` are expanded in the low end of
the distance-weighted normalized graph Laplacian spectrum, tied together by a
discrete Poisson residual, and contribute ``0.5 * rho . phi`` to the energy of
a SchNet-style host model.
"""

from .batch import GraphBatch, PreparedSystem, collate, prepare_system
from .datagen import SyntheticSpec, gen_carbyne_chain, gen_point_charge_set, split_dataset
from .eigensolver import SpectralBasis, dense_eig_oracle, lobpcg
from .molgraph import AtomicSystem, build_radius_graph, build_weighted_laplacian, read_xyz, write_xyz
from .phi import PhiConfig, PhiModel, phi_forward, predict_energy
from .potential import HostConfig, forces
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train_run

__version__ = "0.1.0"

__all__ = [
    "AtomicSystem",
    "GraphBatch",
    "HostConfig",
    "PhiConfig",
    "PhiModel",
    "PreparedSystem",
    "SpectralBasis",
    "SyntheticSpec",
    "TrainConfig",
    "build_radius_graph",
    "build_weighted_laplacian",
    "collate",
    "dense_eig_oracle",
    "evaluate",
    "forces",
    "gen_carbyne_chain",
    "gen_point_charge_set",
    "load_checkpoint",
    "lobpcg",
    "phi_forward",
    "predict_energy",
    "prepare_system",
    "read_xyz",
    "save_checkpoint",
    "split_dataset",
    "train_run",
    "write_xyz",
]
