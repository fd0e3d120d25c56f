"""Blind membership inference by differential comparison of kernel set distances."""

from diffmi.data import (
    AttackConfig,
    MembershipPrediction,
    ProbeDataset,
    ProbeRecord,
    load_predictions,
    load_probe_records,
    save_predictions,
    save_probe_records,
)
from diffmi.kernels import KernelSpec, MmdState, kernel_eval, median_heuristic_sigma, mmd
from diffmi.projection import ProjectionSpec, project

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "KernelSpec",
    "MembershipPrediction",
    "MmdState",
    "ProbeDataset",
    "ProbeRecord",
    "ProjectionSpec",
    "kernel_eval",
    "load_predictions",
    "load_probe_records",
    "median_heuristic_sigma",
    "mmd",
    "project",
    "save_predictions",
    "save_probe_records",
]
