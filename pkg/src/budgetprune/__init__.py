"""Budgeted structured pruning of FFN channels and KV head groups in small decoder LMs."""

__version__ = "0.1.0"

from .config import ModelConfig, get_preset  # noqa: E402
from .registry import alpha, build_registry, mask_cost  # noqa: E402
from .projection import SCORE_P, VALUE_PER_COST, RankingRule, project  # noqa: E402
from .memory import estimate_memory  # noqa: E402

__all__ = [
    "ModelConfig",
    "RankingRule",
    "SCORE_P",
    "VALUE_PER_COST",
    "alpha",
    "build_registry",
    "estimate_memory",
    "get_preset",
    "mask_cost",
    "project",
]
