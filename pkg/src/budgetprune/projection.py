"""Budget-feasible projection of gate probabilities onto a hard mask.

Units are ranked (by ``p``, by ``p / c`` or by Gumbel-perturbed logits),
stably sorted so ties go to the lower global index, and scanned once. In the
default ``skip`` scan a unit is kept iff its cost fits in what is left of the
budget; ``halt`` stops at the first unit that does not fit. Any ``(layer,
kind)`` group left empty gets its highest-``p`` unit forced on, and if that
overshoots the budget the lowest-``p`` kept units from non-singleton groups
are evicted until the mask is feasible again.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .registry import KINDS, PrunableRegistry, UnitKind, exact


class RankVariant(str, Enum):
    SCORE_P = "p"
    VALUE_PER_COST = "p-over-c"
    GUMBEL_TOPK = "gumbel"


class ScanRule(str, Enum):
    SKIP = "skip"
    HALT = "halt"


class InfeasibleBudget(ValueError):
    """The budget cannot hold one unit per group."""


@dataclass(frozen=True)
class RankingRule:
    variant: RankVariant = RankVariant.SCORE_P
    gumbel_seed: Optional[int] = None
    gumbel_scale: float = 1.0
    scan: ScanRule = ScanRule.SKIP


SCORE_P = RankingRule()
VALUE_PER_COST = RankingRule(RankVariant.VALUE_PER_COST)


@dataclass
class HardMask:
    mask: np.ndarray  # bool over the registry
    consumed_cost: Fraction
    budget: Fraction
    guard_interventions: list[int] = field(default_factory=list)
    evictions: list[int] = field(default_factory=list)

    @property
    def n_kept(self) -> int:
        return int(self.mask.sum())

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.mask.astype(dtype)


def ranking_keys(p: np.ndarray, registry: PrunableRegistry, rule: RankingRule) -> np.ndarray:
    if rule.variant is RankVariant.SCORE_P:
        return p
    if rule.variant is RankVariant.VALUE_PER_COST:
        with np.errstate(divide="ignore", invalid="ignore"):
            keys = p / registry.costs
        # zero-cost units are free: rank them first
        return np.where(registry.costs == 0, np.inf, keys)
    if rule.variant is RankVariant.GUMBEL_TOPK:
        rng = np.random.default_rng(rule.gumbel_seed)
        with np.errstate(divide="ignore"):
            logits = np.log(p) - np.log1p(-p)
        return logits + rule.gumbel_scale * rng.gumbel(size=p.shape)
    raise ValueError(f"unknown ranking variant {rule.variant}")


def descending_order(keys: np.ndarray) -> np.ndarray:
    """Indices by descending key; equal keys keep ascending index order."""
    return np.argsort(-keys, kind="stable")


def _check_guard_feasible(registry: PrunableRegistry, cap: int) -> None:
    need = sum(int(registry.int_costs[m].min()) for m in registry.group_members)
    if need > cap:
        raise InfeasibleBudget(
            f"budget {Fraction(cap, registry.denominator)} cannot keep one unit in each of "
            f"{len(registry.group_members)} groups (needs at least {Fraction(need, registry.denominator)})"
        )


def project(
    p,
    registry: PrunableRegistry,
    budget: Union[Fraction, float, int],
    rule: RankingRule = SCORE_P,
) -> HardMask:
    p = np.asarray(p, dtype=np.float64)
    n = len(registry)
    if p.shape != (n,):
        raise ValueError(f"probability vector has shape {p.shape}, expected ({n},)")
    if not np.all((p >= 0) & (p <= 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    budget = exact(budget)
    cap = registry.budget_units(budget)
    _check_guard_feasible(registry, cap)

    order = descending_order(ranking_keys(p, registry, rule))
    costs = registry.int_costs.tolist()
    keep = np.zeros(n, dtype=bool)
    remaining = cap
    halt = rule.scan is ScanRule.HALT
    for i in order.tolist():
        c = costs[i]
        if c <= remaining:
            keep[i] = True
            remaining -= c
        elif halt:
            break
    used = cap - remaining

    counts = np.bincount(registry.group_ids, weights=keep, minlength=len(registry.group_members)).astype(int)
    forced = []
    for g, members in enumerate(registry.group_members):
        if counts[g] == 0:
            i = int(members[np.argmax(p[members])])
            keep[i] = True
            used += costs[i]
            counts[g] = 1
            forced.append(i)

    evicted = []
    if used > cap:
        kept = np.flatnonzero(keep)
        # lowest p first; among equal p the later-ranked (higher index) unit goes first
        for i in kept[np.lexsort((-kept, p[kept]))].tolist():
            if used <= cap:
                break
            g = registry.group_ids[i]
            if counts[g] <= 1:
                continue
            keep[i] = False
            counts[g] -= 1
            used -= costs[i]
            evicted.append(i)
    if used > cap:
        raise InfeasibleBudget("guard-forced units exceed the budget and nothing can be evicted")
    consumed = Fraction(used, registry.denominator)
    assert consumed <= budget
    return HardMask(keep, consumed, budget, forced, evicted)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def allocation_stats(p, registry: PrunableRegistry, hm: HardMask) -> dict:
    """Keep ratio, budget share and mean utility of the kept units, per kind."""
    p = np.asarray(p, dtype=np.float64)
    spent = registry.int_costs[hm.mask].sum()
    row = {}
    for kind in KINDS:
        sel = registry.kind_mask(kind)
        kept = sel & hm.mask
        name = kind.value
        row[f"{name}_keep"] = float(kept.sum() / sel.sum()) if sel.any() else float("nan")
        row[f"{name}_budget_share"] = float(registry.int_costs[kept].sum() / spent) if spent else 0.0
        row[f"{name}_mean_p"] = float(p[kept].mean()) if kept.any() else float("nan")
        row[f"{name}_kept_count"] = int(kept.sum())
    row["consumed_cost"] = float(hm.consumed_cost)
    return row


def selection_bias_report(p, registry: PrunableRegistry, budget) -> dict[str, dict]:
    """Allocation under ranking by ``p`` versus by ``p / c`` for the same utilities."""
    return {
        rule.variant.value: allocation_stats(p, registry, project(p, registry, budget, rule))
        for rule in (SCORE_P, VALUE_PER_COST)
    }


def synthetic_registry(n: int, kv_every: int = 128, kv_cost: Fraction = Fraction(80, 3)) -> PrunableRegistry:
    """A registry of ``n`` units in one layer, every ``kv_every``-th one a KV group."""
    idx = np.arange(n)
    kinds = (idx % kv_every == kv_every - 1).astype(np.int8)
    locals_ = np.zeros(n, dtype=np.int64)
    for k in (0, 1):
        sel = kinds == k
        locals_[sel] = np.arange(sel.sum())
    den = kv_cost.denominator
    int_costs = np.where(kinds == 1, kv_cost.numerator, den)
    return PrunableRegistry(np.zeros(n, dtype=np.int64), kinds, locals_, int_costs, den)


def projection_timer(
    n: int,
    trials: int = 5,
    keep_ratio: float = 0.5,
    reference_step_time: Optional[float] = None,
    seed: int = 0,
) -> dict:
    """Wall-clock of one projection over ``n`` units.

    With ``reference_step_time`` (seconds per training step) the mean is also
    reported as a fraction of it.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    registry = synthetic_registry(n)
    # never below one unit per group, so tiny n still gives a feasible instance
    floor = Fraction(sum(int(registry.int_costs[m].min()) for m in registry.group_members), registry.denominator)
    budget = max(exact(keep_ratio) * registry.total_cost, floor)
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(trials):
        p = rng.random(n)
        t0 = time.perf_counter()
        project(p, registry, budget)
        times.append(time.perf_counter() - t0)
    out = {"n": n, "trials": trials, "mean_s": float(np.mean(times)), "min_s": float(np.min(times)),
           "median_s": float(np.median(times))}
    if reference_step_time:
        out["fraction_of_step"] = out["mean_s"] / reference_step_time
    return out


__all__ = [
    "HardMask",
    "InfeasibleBudget",
    "RankVariant",
    "RankingRule",
    "SCORE_P",
    "ScanRule",
    "UnitKind",
    "VALUE_PER_COST",
    "allocation_stats",
    "descending_order",
    "project",
    "projection_timer",
    "ranking_keys",
    "selection_bias_report",
    "synthetic_registry",
]
