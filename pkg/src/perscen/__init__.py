"""Two-tower multi-scenario matching with per-user feature graphs,
a shared preference codebook and scenario-gated fusion."""

from ._kernels import backend
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import PreparedData, prepare, prepare_from_files
from .model import Perscen, match_score
from .retrieval import (
    EvalReport,
    ScenarioIndex,
    build_index,
    evaluate,
    evaluate_popularity,
    hits_at_k,
    recall_at_k,
    retrieve_topk,
)
from .schema import FeatureSchema, FieldSpec, InteractionLog, parse_schema
from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic
from .training import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "backend", "load_checkpoint", "save_checkpoint", "RunConfig", "TrainConfig", "PreparedData",
    "prepare", "prepare_from_files", "Perscen", "match_score", "EvalReport", "ScenarioIndex",
    "build_index", "evaluate", "evaluate_popularity", "hits_at_k", "recall_at_k", "retrieve_topk",
    "FeatureSchema", "FieldSpec", "InteractionLog", "parse_schema", "SyntheticSpec",
    "generate_synthetic", "write_synthetic", "TrainResult", "train",
]
