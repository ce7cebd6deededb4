"""Convolutional-recurrent autoencoder surrogate for 1D linear advection,
trained with an MSE split into dissipation (amplitude) and dispersion
(phase) errors."""

__version__ = "0.1.0"

from .decomposition import (
    ErrorDecomposition,
    LossWeights,
    SignalStats,
    composite_loss,
    decompose,
    decompose_batched,
    decompose_gradient,
    signal_stats,
)
from .model import AbcranModel, ArchConfig, load_model, rollout, save_model
from .pde_data import (
    GridSpec,
    InitialProfile,
    ParameterGrid,
    WaveDataset,
    exact_solution,
    generate_dataset,
    make_parameter_grid,
    read_dataset,
    write_dataset,
)
from .trainer import TrainConfig, TrainReport, fit, sweep_alpha_beta

__all__ = [
    "AbcranModel", "ArchConfig", "ErrorDecomposition", "GridSpec", "InitialProfile",
    "LossWeights", "ParameterGrid", "SignalStats", "TrainConfig", "TrainReport",
    "WaveDataset", "composite_loss", "decompose", "decompose_batched", "decompose_gradient",
    "exact_solution", "fit", "generate_dataset", "load_model", "make_parameter_grid",
    "read_dataset", "rollout", "save_model", "signal_stats", "sweep_alpha_beta", "write_dataset",
]
