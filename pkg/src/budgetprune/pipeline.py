"""Glue shared by the CLI and the end-to-end checks: data splits, mask files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .config import ModelConfig
from .data import TokenDataset, sample_windows, split_corpus, tile_windows
from .gates import GateHyperParams, GateRun, train_gates
from .model import Checkpoint
from .registry import BudgetSpec, PrunableRegistry, build_registry

WINDOW = 129  # 128 next-token predictions per window
CALIBRATION_WINDOWS = 512
DATA_SEED = 1


@dataclass
class Splits:
    calibration: TokenDataset
    held_out: TokenDataset


def make_splits(
    corpus: np.ndarray,
    n_calibration: int = CALIBRATION_WINDOWS,
    window: int = WINDOW,
    data_seed: int = DATA_SEED,
    max_held_out: Optional[int] = None,
) -> Splits:
    """Calibration windows sampled from the head of the corpus, held-out windows tiled over its tail."""
    train, held = split_corpus(corpus)
    return Splits(sample_windows(train, n_calibration, window, data_seed), tile_windows(held, window, max_held_out))


def prune(
    ckpt: Checkpoint,
    splits: Splits,
    keep_ratio=0.5,
    cost_scale=1,
    target="both",
    hp: Optional[GateHyperParams] = None,
    seed: int = 0,
    on_step=None,
) -> tuple[PrunableRegistry, BudgetSpec, GateRun]:
    registry, spec = build_registry(ckpt.config, keep_ratio, cost_scale, target)
    run = train_gates(ckpt, registry, spec.budget, splits.calibration, hp, seed=seed, on_step=on_step)
    return registry, spec, run


def save_mask(path: Union[str, Path], config: ModelConfig, spec: BudgetSpec, mask, extra: Optional[dict] = None) -> None:
    doc = {
        "config": config.to_dict(),
        "budget": spec.to_dict(),
        "mask": np.asarray(mask).astype(int).tolist(),
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=1))


def load_mask(path: Union[str, Path]) -> tuple[ModelConfig, PrunableRegistry, BudgetSpec, np.ndarray, dict]:
    """Mask file back to (config, registry, budget, bool mask, raw document)."""
    doc = json.loads(Path(path).read_text())
    config = ModelConfig.from_dict(doc["config"])
    b = doc["budget"]
    registry, spec = build_registry(config, b["keep_ratio"], b["cost_scale"], b["target_filter"])
    mask = np.asarray(doc["mask"], dtype=bool)
    if mask.shape != (len(registry),):
        raise ValueError(f"{path}: mask has {mask.size} entries, registry has {len(registry)}")
    return config, registry, spec, mask, doc
