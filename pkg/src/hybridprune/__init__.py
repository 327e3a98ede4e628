"""Structured pruning, architecture search and distillation for toy Mamba2/Attention/FFN hybrids."""

__version__ = "0.1.0"

from .distiller import KDConfig, distill, kd_loss, lr_schedule
from .importance import ActivationStats, ScoreSet, compute_scores, layer_importance_kld
from .model import HybridModel, ModelConfig, init_model, model_forward, param_count
from .pruner import PrunePlan, apply_plan, build_plan, rank_group_constrained
from .searcher import Candidate, enumerate_candidates, run_search, select_winner
from .ssm import ssm_scan

__all__ = [
    "ActivationStats", "Candidate", "HybridModel", "KDConfig", "ModelConfig", "PrunePlan", "ScoreSet",
    "apply_plan", "build_plan", "compute_scores", "distill", "enumerate_candidates", "init_model", "kd_loss",
    "layer_importance_kld", "lr_schedule", "model_forward", "param_count", "rank_group_constrained",
    "run_search", "select_winner", "ssm_scan",
]
