"""Per-unit scale calibration on a frozen mask.

Each retained unit gets one multiplier ``gamma`` (initialized to 1) that
acts at the same injection point as its gate. Only the gammas are trained;
the mask and the backbone are left alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import TokenDataset
from .evaluation import mean_loss
from .gates import hooks_from_units
from .model import Checkpoint, GateHooks, window_loss
from .optim import AdamW
from .registry import PrunableRegistry

log = logging.getLogger(__name__)

ANOMALY_THRESHOLD = 2.0


@dataclass
class ScaleHyperParams:
    lr: float = 1e-2
    epochs: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    shuffle: bool = True

    def to_dict(self) -> dict:
        return {"lr": self.lr, "epochs": self.epochs, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "shuffle": self.shuffle}


@dataclass
class ScaleState:
    retained: np.ndarray  # global indices with mask == 1, ascending
    gamma: np.ndarray
    n_units: int
    losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    reverted: bool = False

    @property
    def n_trainable(self) -> int:
        return len(self.gamma)

    def multipliers(self, dtype=np.float64) -> np.ndarray:
        """Per-unit multiplier vector: gamma on retained units, 0 on pruned ones."""
        out = np.zeros(self.n_units, dtype=dtype)
        out[self.retained] = self.gamma
        return out

    def anomalies(self) -> list[int]:
        """Retained units whose scale moved by more than the anomaly threshold."""
        return [int(i) for i, g in zip(self.retained, self.gamma) if abs(g - 1.0) > ANOMALY_THRESHOLD]

    def to_dict(self) -> dict:
        return {
            "retained": self.retained.tolist(),
            "gamma": self.gamma.tolist(),
            "n_units": self.n_units,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "reverted": self.reverted,
            "anomalies": self.anomalies(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleState":
        return cls(np.asarray(d["retained"], dtype=np.int64), np.asarray(d["gamma"], dtype=np.float64),
                   int(d["n_units"]), initial_loss=d.get("initial_loss", float("nan")),
                   final_loss=d.get("final_loss", float("nan")), reverted=d.get("reverted", False))


def scaled_hooks(ckpt: Checkpoint, registry: PrunableRegistry, mask, gamma: Optional[ScaleState] = None) -> GateHooks:
    """Array hooks for a masked (and optionally scaled) forward."""
    dtype = ckpt.tensors["norm"].dtype
    z = gamma.multipliers(dtype) if gamma is not None else np.asarray(mask, dtype=dtype)
    return hooks_from_units(z, registry, ckpt)


def calibrate_scales(
    ckpt: Checkpoint,
    mask,
    registry: PrunableRegistry,
    dataset: TokenDataset,
    hp: Optional[ScaleHyperParams] = None,
    seed: int = 0,
    steps: Optional[int] = None,
) -> ScaleState:
    """AdamW over the retained-unit scales on the calibration windows.

    ``steps`` caps the number of updates (default: ``epochs`` passes). If the
    trained scales end up with a higher calibration loss than the identity
    scales, the identity is kept and ``reverted`` is set.
    """
    hp = hp or ScaleHyperParams()
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (len(registry),):
        raise ValueError("mask does not match registry")
    for members in registry.group_members:
        if not mask[members].any():
            raise ValueError("mask leaves a (layer, kind) group empty")
    retained = np.flatnonzero(mask)
    state = ScaleState(retained, np.ones(len(retained), dtype=np.float64), len(registry))
    dtype = ckpt.tensors["norm"].dtype
    state.initial_loss = mean_loss(ckpt, dataset, scaled_hooks(ckpt, registry, mask, state))
    opt = AdamW([state.gamma], lr=hp.lr, betas=hp.betas, eps=hp.eps, weight_decay=hp.weight_decay)
    rng = np.random.default_rng(seed)
    total = steps if steps is not None else hp.epochs * len(dataset)
    step = 0
    while step < total:
        order = rng.permutation(len(dataset)) if hp.shuffle else np.arange(len(dataset))
        for w in order:
            if step >= total:
                break
            leaf = T.Tensor(state.gamma.astype(dtype), requires_grad=True)
            with T.Tape() as tape:
                z = T.scatter(leaf, retained, len(registry))
                loss = window_loss(ckpt, dataset[w], hooks_from_units(z, registry, ckpt))
                tape.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise T.NonFiniteError(f"calibration step {step}: loss {value}")
            state.losses.append(value)
            opt.step([tape.grad(leaf).astype(np.float64)])
            step += 1
    state.final_loss = mean_loss(ckpt, dataset, scaled_hooks(ckpt, registry, mask, state))
    if state.final_loss > state.initial_loss:
        log.warning("calibration raised loss %.5f -> %.5f; keeping identity scales",
                    state.initial_loss, state.final_loss)
        state.gamma[:] = 1.0
        state.final_loss = state.initial_loss
        state.reverted = True
    return state
