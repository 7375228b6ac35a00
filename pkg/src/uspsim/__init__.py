"""Deterministic simulator and planner for unified Ulysses + Ring sequence parallelism."""
from .costmodel import ClusterConfig, ModelConfig, Strategy, cost_report
from .numerics import reference_attention, reference_attention_grad
from .simcomm import ProcessGroup, ProcessMesh, spawn
from .usp import simulate_usp, zigzag_partition

__all__ = [
    "ClusterConfig", "ModelConfig", "ProcessGroup", "ProcessMesh", "Strategy",
    "cost_report", "reference_attention", "reference_attention_grad", "simulate_usp",
    "spawn", "zigzag_partition",
]
__version__ = "0.1.0"
