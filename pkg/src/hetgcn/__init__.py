"""Heterogeneous dynamic graph encoder and goal-based decoder for motion forecasting."""

from .decoder import DecoderConfig, LossConfig, PredictionSet, compute_loss
from .encoder import EncoderConfig, encode_scenario
from .graph import DynamicHeteroGraph, GraphBatch, GraphConfig, assemble_dynamic_graph
from .metrics import MetricsReport, ensemble, evaluate
from .model import HeteroGCN, ModelConfig
from .scenario import Scenario, SyntheticSpec, generate_synthetic_scenario, load_scenario, normalize_scenario
from .training import RunConfig, load_model, predict_scenarios, train

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig", "DynamicHeteroGraph", "EncoderConfig", "GraphBatch", "GraphConfig",
    "HeteroGCN", "LossConfig", "MetricsReport", "ModelConfig", "PredictionSet", "RunConfig",
    "Scenario", "SyntheticSpec", "assemble_dynamic_graph", "compute_loss", "encode_scenario",
    "ensemble", "evaluate", "generate_synthetic_scenario", "load_model", "load_scenario",
    "normalize_scenario", "predict_scenarios", "train",
]
