"""Backbone pretraining on a byte corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import Checkpoint, forward, init_checkpoint, lm_loss
from .optim import AdamW

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)


def pretrain_backbone(
    config: ModelConfig,
    corpus: np.ndarray,
    steps: int = 2000,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
    window: int = 129,
    warmup: int = 100,
    weight_decay: float = 0.0,
    log_every: int = 0,
) -> PretrainResult:
    """AdamW-train a fresh model on random corpus windows.

    The learning rate warms up linearly then decays with a cosine to 10% of
    ``lr``. Same ``seed`` gives a bit-identical checkpoint.
    """
    corpus = np.asarray(corpus)
    if corpus.size == 0:
        raise ValueError("corpus is empty")
    if len(corpus) < window:
        raise ValueError("corpus shorter than one window")
    ckpt = init_checkpoint(config, seed=seed)
    names = sorted(ckpt.tensors)
    params = [ckpt.tensors[n] for n in names]
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    losses: list[float] = []
    for step in range(steps):
        starts = rng.integers(0, len(corpus) - window + 1, size=batch_size)
        batch = np.stack([corpus[s : s + window] for s in starts])
        leaves = {n: T.Tensor(ckpt.tensors[n], requires_grad=True) for n in names}
        try:
            with T.Tape() as tape:
                loss = lm_loss(forward(ckpt, batch[:, :-1], weights=leaves), batch)
                tape.backward(loss)
        except T.NonFiniteError as e:
            raise TrainingDiverged(f"step {step}: {e}; last loss {losses[-1] if losses else None}") from e
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {step}: loss {value}")
        losses.append(value)
        if step < warmup:
            opt.lr = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(steps - warmup, 1)
            opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.step([tape.grad(leaves[n]) for n in names])
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    ckpt.meta["pretrain"] = {"steps": steps, "lr": lr, "seed": seed, "batch_size": batch_size, "window": window}
    return PretrainResult(ckpt, losses)
