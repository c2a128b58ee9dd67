"""Loss and perplexity over token windows."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import tensor as T
from .data import TokenDataset
from .model import Checkpoint, GateHooks, forward


def window_nll(ckpt: Checkpoint, windows: np.ndarray, hooks: Optional[GateHooks] = None) -> tuple[float, int]:
    """Summed next-token NLL and token count for a batch of windows."""
    windows = np.atleast_2d(windows)
    logits = forward(ckpt, windows[:, :-1], hooks).data.astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    tgt = windows[:, 1:]
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    return float((lse - picked).sum()), tgt.size


def mean_loss(
    ckpt: Checkpoint,
    dataset: TokenDataset,
    hooks: Optional[GateHooks] = None,
    batch_size: int = 32,
    workers: int = 1,
) -> float:
    """Token-mean cross-entropy over every window of ``dataset``.

    With ``workers > 1`` batches are scored on a thread pool; partial sums
    are combined in batch order so the result does not depend on scheduling.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    batches = [dataset.windows[s : s + batch_size] for s in range(0, len(dataset), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: window_nll(ckpt, b, hooks), batches))
    else:
        parts = [window_nll(ckpt, b, hooks) for b in batches]
    total, count = 0.0, 0
    for s, n in parts:
        total += s
        count += n
    loss = total / count
    if not math.isfinite(loss):
        raise T.NonFiniteError("non-finite evaluation loss")
    return loss


def perplexity(ckpt: Checkpoint, dataset: TokenDataset, hooks: Optional[GateHooks] = None, workers: int = 1) -> float:
    return math.exp(mean_loss(ckpt, dataset, hooks, workers=workers))
