"""Capsule-network mixture of experts on plain numpy."""
from mixcaps.capsule import CapsuleExpert, ExpertConfig, RoutingState, margin_loss, route, squash
from mixcaps.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from mixcaps.data import Dataset, GeneratorParams, generate_dataset, read_dataset, write_dataset
from mixcaps.em import MMState, ResponsibilityRecord, em_posterior, mm_update, routing_as_moe_report
from mixcaps.gate import GateConfig, GateNetwork, MixCaps, mix
from mixcaps.gradcheck import gradient_check
from mixcaps.kernels import BACKEND
from mixcaps.presets import PRESETS, build_model, build_preset
from mixcaps.train import (
    MetricsReport,
    TrainConfig,
    auc_score,
    bootstrap_evaluate,
    evaluate,
    gate_correlation,
    noise_sweep,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CapsuleExpert", "Dataset", "ExpertConfig", "GateConfig", "GateNetwork", "GeneratorParams",
    "MMState", "MetricsReport", "MixCaps", "ModelCheckpoint", "PRESETS", "ResponsibilityRecord",
    "RoutingState", "TrainConfig", "auc_score", "bootstrap_evaluate", "build_model", "build_preset",
    "em_posterior", "evaluate", "gate_correlation", "generate_dataset", "gradient_check", "load_checkpoint",
    "margin_loss", "mix", "mm_update", "noise_sweep", "read_dataset", "route", "routing_as_moe_report",
    "save_checkpoint", "squash", "train", "write_dataset",
]
