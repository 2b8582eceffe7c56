"""Federated learning with a server-set decay factor and client-chosen local epochs."""

from .analysis import check_bound_quadratic, export_records, load_records, convergence_bound
from .datasets import Dataset, generate_synthetic, load_idx, partition_iid, partition_shards
from .federation import ALGORITHMS, FederationConfig, RoundRecord, run_experiment, simulate
from .game import best_response_tau, optimal_gamma, quantize_tau, verify_equilibrium
from .learner import ModelSpec, gradient, local_train, loss

__all__ = [
    "ALGORITHMS", "Dataset", "FederationConfig", "ModelSpec", "RoundRecord",
    "best_response_tau", "check_bound_quadratic", "export_records", "generate_synthetic",
    "gradient", "load_idx", "load_records", "local_train", "loss", "optimal_gamma",
    "partition_iid", "partition_shards", "quantize_tau", "run_experiment", "simulate",
    "convergence_bound", "verify_equilibrium",
]
