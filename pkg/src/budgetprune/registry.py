"""The global set of prunable units, their costs and the keep budget.

Units are FFN intermediate channels (cost 1) and KV head groups (cost
``alpha * cost_scale``), ordered by layer, FFN before KV, then local index.
Costs are exact rationals; for fast exact comparisons they are also kept as
integers over a common denominator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from .config import ConfigError, ModelConfig

Number = Union[int, float, str, Fraction]


class UnitKind(str, Enum):
    FFN_CHANNEL = "ffn"
    KV_GROUP = "kv"


KINDS = (UnitKind.FFN_CHANNEL, UnitKind.KV_GROUP)


class TargetFilter(str, Enum):
    BOTH = "both"
    FFN_ONLY = "ffn"
    KV_ONLY = "kv"

    def includes(self, kind: UnitKind) -> bool:
        return self is TargetFilter.BOTH or self.value == kind.value


class EmptyRegistry(ValueError):
    pass


def exact(x: Number) -> Fraction:
    """Exact rational from a user-facing number; floats go through their repr so 0.8 is 4/5."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def alpha(config: ModelConfig) -> Fraction:
    """Cost of one KV head group in FFN-channel units: (2G + 2) * d_h / 3."""
    if config.n_kv_heads <= 0 or config.n_heads % config.n_kv_heads:
        raise ConfigError(f"n_heads={config.n_heads} not divisible by n_kv_heads={config.n_kv_heads}")
    g = config.n_heads // config.n_kv_heads
    return Fraction((2 * g + 2) * config.head_dim, 3)


@dataclass(frozen=True)
class PrunableUnit:
    global_index: int
    layer: int
    kind: UnitKind
    local_index: int
    cost: Fraction


class PrunableRegistry:
    """Immutable flat view of all prunable units.

    Stored column-wise; ``units`` materializes per-unit records on demand.
    A group is the set of units sharing ``(layer, kind)``.
    """

    def __init__(self, layers, kinds, locals_, int_costs, denominator: int):
        self.layers = np.asarray(layers, dtype=np.int64)
        self.kinds = np.asarray(kinds, dtype=np.int8)  # 0 = ffn, 1 = kv
        self.local_indices = np.asarray(locals_, dtype=np.int64)
        self.int_costs = np.asarray(int_costs, dtype=np.int64)
        self.denominator = int(denominator)
        n = len(self.layers)
        if not (len(self.kinds) == len(self.local_indices) == len(self.int_costs) == n):
            raise ValueError("registry columns must have equal length")
        if n == 0:
            raise EmptyRegistry("no prunable units")
        if (self.int_costs < 0).any():
            raise ValueError("unit costs must be nonnegative")
        for a in (self.layers, self.kinds, self.local_indices, self.int_costs):
            a.setflags(write=False)
        keys = self.layers * 2 + self.kinds
        uniq, self.group_ids = np.unique(keys, return_inverse=True)
        self.group_ids.setflags(write=False)
        self.group_keys = [(int(k // 2), KINDS[int(k % 2)]) for k in uniq]
        self.group_members = [np.flatnonzero(self.group_ids == g) for g in range(len(uniq))]
        triples = np.stack([self.layers, self.kinds.astype(np.int64), self.local_indices], axis=1)
        if len(np.unique(triples, axis=0)) != n:
            raise ValueError("duplicate (layer, kind, local_index) in registry")

    @classmethod
    def from_units(cls, spec: Iterable[tuple[int, UnitKind, int, Number]]) -> "PrunableRegistry":
        """Build from ``(layer, kind, local_index, cost)`` tuples in global order."""
        rows = list(spec)
        costs = [exact(c) for *_, c in rows]
        den = math.lcm(*(c.denominator for c in costs)) if costs else 1
        return cls(
            [r[0] for r in rows],
            [KINDS.index(UnitKind(r[1])) for r in rows],
            [r[2] for r in rows],
            [int(c * den) for c in costs],
            den,
        )

    def __len__(self) -> int:
        return len(self.layers)

    @cached_property
    def costs(self) -> np.ndarray:
        """Float costs, for ranking keys and reports only."""
        return self.int_costs / self.denominator

    def cost(self, i: int) -> Fraction:
        return Fraction(int(self.int_costs[i]), self.denominator)

    @property
    def total_cost(self) -> Fraction:
        return Fraction(int(self.int_costs.sum()), self.denominator)

    @property
    def units(self) -> list[PrunableUnit]:
        return [
            PrunableUnit(i, int(self.layers[i]), KINDS[int(self.kinds[i])], int(self.local_indices[i]), self.cost(i))
            for i in range(len(self))
        ]

    @property
    def n_layers(self) -> int:
        return int(self.layers.max()) + 1

    @cached_property
    def _index(self) -> dict:
        return {
            (int(l), KINDS[int(k)], int(j)): i
            for i, (l, k, j) in enumerate(zip(self.layers, self.kinds, self.local_indices))
        }

    def index_of(self, layer: int, kind: UnitKind, local_index: int) -> int:
        return self._index[(layer, UnitKind(kind), local_index)]

    def kind_mask(self, kind: UnitKind) -> np.ndarray:
        return self.kinds == KINDS.index(UnitKind(kind))

    def layer_slice(self, layer: int, kind: UnitKind) -> slice:
        """Contiguous global-index range of one group (empty slice if absent)."""
        sel = np.flatnonzero((self.layers == layer) & self.kind_mask(kind))
        if len(sel) == 0:
            return slice(0, 0)
        return slice(int(sel[0]), int(sel[-1]) + 1)

    def budget_units(self, budget: Fraction) -> int:
        """Largest integer cost (in denominator units) that stays within ``budget``."""
        return math.floor(exact(budget) * self.denominator)


@dataclass(frozen=True)
class BudgetSpec:
    keep_ratio: Fraction
    total_cost: Fraction
    budget: Fraction
    cost_scale: Fraction = Fraction(1)
    target_filter: TargetFilter = TargetFilter.BOTH

    def to_dict(self) -> dict:
        return {
            "keep_ratio": str(self.keep_ratio),
            "total_cost": str(self.total_cost),
            "budget": str(self.budget),
            "budget_float": float(self.budget),
            "cost_scale": str(self.cost_scale),
            "target_filter": self.target_filter.value,
        }


def build_registry(
    config: ModelConfig,
    keep_ratio: Number = 1,
    cost_scale: Number = 1,
    target: Union[TargetFilter, str] = TargetFilter.BOTH,
) -> tuple[PrunableRegistry, BudgetSpec]:
    rho = exact(keep_ratio)
    if not (0 < rho <= 1):
        raise ValueError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    scale = exact(cost_scale)
    if scale < 0:
        raise ValueError("cost scale must be nonnegative")
    target = TargetFilter(target)
    kv_cost = alpha(config) * scale
    rows = []
    for layer in range(config.n_layers):
        if target.includes(UnitKind.FFN_CHANNEL):
            rows += [(layer, UnitKind.FFN_CHANNEL, j, 1) for j in range(config.ffn_dim)]
        if target.includes(UnitKind.KV_GROUP):
            rows += [(layer, UnitKind.KV_GROUP, j, kv_cost) for j in range(config.n_kv_heads)]
    if not rows:
        raise EmptyRegistry(f"no prunable units for target {target.value!r}")
    registry = PrunableRegistry.from_units(rows)
    total = registry.total_cost
    budget = rho * total
    if budget <= 0:
        raise ValueError("budget must be positive")
    return registry, BudgetSpec(rho, total, budget, scale, target)


def mask_cost(mask: Sequence, registry: PrunableRegistry) -> Fraction:
    """Exact total cost of the kept units."""
    m = np.asarray(mask)
    if m.shape != (len(registry),):
        raise ValueError(f"mask length {m.shape} does not match registry size {len(registry)}")
    kept = m.astype(bool)
    return Fraction(int(registry.int_costs[kept].sum()), registry.denominator)
