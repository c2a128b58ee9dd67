"""Gate learning with a hard budgeted forward and a soft backward.

Each step projects the current probabilities ``p = sigmoid(s / tau)`` to a
feasible hard mask, runs the frozen model with that mask as its gate
multipliers, and back-propagates the loss into the scores as if the
multipliers had been ``p``. Only the scores are updated (AdamW, no weight
decay).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import TokenDataset
from .model import Checkpoint, GateHooks, window_loss
from .optim import AdamW
from .projection import HardMask, RankingRule, RankVariant, SCORE_P, project
from .registry import KINDS, PrunableRegistry, UnitKind, mask_cost

log = logging.getLogger(__name__)


class BudgetViolation(AssertionError):
    pass


def gate_probabilities(scores: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / tau
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def surrogate_gates(mask, p: T.Tensor) -> T.Tensor:
    """Multipliers equal to ``mask`` whose gradient flows to ``p`` unchanged."""
    return T.straight_through(np.asarray(mask), p)


def score_gradient(dL_dz, p, tau: float) -> np.ndarray:
    """Chain the multiplier gradient through ``p = sigmoid(s / tau)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    dL_dz = np.asarray(dL_dz, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if dL_dz.shape != p.shape:
        raise ValueError("gradient and probability vectors differ in length")
    return dL_dz * p * (1.0 - p) / tau


def hooks_from_units(z, registry: PrunableRegistry, ckpt: Checkpoint) -> GateHooks:
    """Split a flat per-unit multiplier vector (array or tensor) into per-layer hooks.

    Injection points with no registered units get no multiplier.
    """
    ffn, kv = [], []
    for layer in range(ckpt.config.n_layers):
        for kind, out in ((UnitKind.FFN_CHANNEL, ffn), (UnitKind.KV_GROUP, kv)):
            sl = registry.layer_slice(layer, kind)
            if sl.stop == sl.start:
                out.append(None)
            elif isinstance(z, T.Tensor):
                out.append(T.take(z, sl))
            else:
                out.append(np.asarray(z)[sl])
    return GateHooks(ffn, kv)


@dataclass
class GateHyperParams:
    lr: float = 1e-2
    tau: float = 1.5
    epochs: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    snapshot_interval: Optional[int] = None
    rule: RankingRule = SCORE_P
    shuffle: bool = True

    def interval_for(self, total_steps: int) -> int:
        if self.snapshot_interval:
            return self.snapshot_interval
        return 200 if total_steps >= 1000 else 50

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "tau": self.tau, "epochs": self.epochs, "betas": list(self.betas), "eps": self.eps,
            "weight_decay": self.weight_decay, "snapshot_interval": self.snapshot_interval,
            "rank": self.rule.variant.value, "scan": self.rule.scan.value,
            "gumbel_scale": self.rule.gumbel_scale, "shuffle": self.shuffle,
        }


@dataclass
class GateState:
    scores: np.ndarray
    tau: float
    optimizer: AdamW

    @classmethod
    def init(cls, n: int, hp: GateHyperParams) -> "GateState":
        scores = np.zeros(n, dtype=np.float64)
        opt = AdamW([scores], lr=hp.lr, betas=hp.betas, eps=hp.eps, weight_decay=hp.weight_decay)
        return cls(scores, hp.tau, opt)

    @property
    def p(self) -> np.ndarray:
        return gate_probabilities(self.scores, self.tau)


@dataclass
class StabilityTrace:
    interval: int
    kinds: np.ndarray
    steps: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    def add(self, step: int, mask: np.ndarray) -> None:
        self.steps.append(step)
        self.masks.append(mask.copy())


def mask_stability(trace: StabilityTrace, overall: bool = False) -> dict[str, list[float]]:
    """Per kind, the fraction of units whose on/off state is unchanged between consecutive snapshots.

    With ``overall`` an ``"all"`` series over every unit is added.
    """
    if len(trace.masks) < 2:
        raise ValueError("need at least two snapshots")
    groups = [(kind.value, trace.kinds == k) for k, kind in enumerate(KINDS)]
    if overall:
        groups.append(("all", np.ones(len(trace.kinds), dtype=bool)))
    out = {}
    for name, sel in groups:
        if not sel.any():
            continue
        out[name] = [float(np.mean(a[sel] == b[sel])) for a, b in zip(trace.masks[:-1], trace.masks[1:])]
    return out


@dataclass
class GateRun:
    state: GateState
    mask: HardMask
    trace: StabilityTrace
    losses: list[float]
    polarization: list[float]
    guard_counts: list[int]
    eviction_counts: list[int]
    max_step_cost: Fraction
    project_seconds: float
    total_seconds: float
    steps_per_epoch: int
    hyperparams: GateHyperParams

    def stability(self) -> dict[str, list[float]]:
        return mask_stability(self.trace, overall=True)

    def log_dict(self) -> dict:
        stab = self.stability() if len(self.trace.masks) >= 2 else {}
        return {
            "hyperparams": self.hyperparams.to_dict(),
            "loss": self.losses,
            "polarization": self.polarization,
            "stability": stab,
            "snapshot_steps": self.trace.steps,
            "guard_interventions": self.guard_counts,
            "evictions": self.eviction_counts,
            "max_step_cost": str(self.max_step_cost),
            "budget": str(self.mask.budget),
            "final_cost": str(self.mask.consumed_cost),
            "sort_time_fraction": self.project_seconds / self.total_seconds if self.total_seconds else 0.0,
        }


def _step_rule(rule: RankingRule, seed: int, step: int) -> RankingRule:
    if rule.variant is RankVariant.GUMBEL_TOPK:
        base = rule.gumbel_seed if rule.gumbel_seed is not None else seed
        return replace(rule, gumbel_seed=(base * 1_000_003 + step) % (2**63))
    return rule


def final_rule(rule: RankingRule) -> RankingRule:
    """Noise-free rule used for the deployable mask."""
    if rule.variant is RankVariant.GUMBEL_TOPK:
        return replace(rule, variant=RankVariant.SCORE_P, gumbel_seed=None)
    return rule


def train_gates(
    ckpt: Checkpoint,
    registry: PrunableRegistry,
    budget: Fraction,
    dataset: TokenDataset,
    hp: Optional[GateHyperParams] = None,
    seed: int = 0,
    state: Optional[GateState] = None,
    on_step: Optional[Callable[[int, HardMask, float], None]] = None,
) -> GateRun:
    hp = hp or GateHyperParams()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = state or GateState.init(len(registry), hp)
    rng = np.random.default_rng(seed)
    dtype = ckpt.tensors["norm"].dtype
    steps_per_epoch = len(dataset)
    total = hp.epochs * steps_per_epoch
    interval = hp.interval_for(total)
    trace = StabilityTrace(interval, registry.kinds.copy())
    losses, polar, guards, evicts = [], [], [], []
    max_cost = Fraction(0)
    t_proj = 0.0
    t0 = time.perf_counter()
    trace.add(0, project(state.p, registry, budget, _step_rule(hp.rule, seed, 0)).mask)
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(steps_per_epoch) if hp.shuffle else np.arange(steps_per_epoch)
        for w in order:
            p = state.p
            t1 = time.perf_counter()
            hm = project(p, registry, budget, _step_rule(hp.rule, seed, step))
            t_proj += time.perf_counter() - t1
            cost = mask_cost(hm.mask, registry)
            if cost > budget:
                raise BudgetViolation(f"step {step}: mask cost {cost} exceeds budget {budget}")
            max_cost = max(max_cost, cost)
            guards.append(len(hm.guard_interventions))
            evicts.append(len(hm.evictions))

            p_leaf = T.Tensor(p.astype(dtype), requires_grad=True)
            with T.Tape() as tape:
                z = surrogate_gates(hm.as_float(dtype), p_leaf)
                loss = window_loss(ckpt, dataset[w], hooks_from_units(z, registry, ckpt))
                tape.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise T.NonFiniteError(f"step {step}: loss {value}")
            losses.append(value)
            state.optimizer.step([score_gradient(tape.grad(p_leaf), p, state.tau)])
            polar.append(float(np.mean(np.abs(state.p - 0.5))))
            step += 1
            if step % interval == 0:
                snap = project(state.p, registry, budget, _step_rule(hp.rule, seed, -step))
                trace.add(step, snap.mask)
            if on_step is not None:
                on_step(step, hm, value)
        log.info("epoch %d mean loss %.4f", epoch, float(np.mean(losses[-steps_per_epoch:])))
    final = project(state.p, registry, budget, final_rule(hp.rule))
    return GateRun(
        state=state,
        mask=final,
        trace=trace,
        losses=losses,
        polarization=polar,
        guard_counts=guards,
        eviction_counts=evicts,
        max_step_cost=max_cost,
        project_seconds=t_proj,
        total_seconds=time.perf_counter() - t0,
        steps_per_epoch=steps_per_epoch,
        hyperparams=hp,
    )
