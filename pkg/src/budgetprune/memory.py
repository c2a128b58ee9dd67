"""Analytic weight and KV-cache memory for full or pruned models."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from .config import ModelConfig
from .model import LayerRetained, full_retained, param_count

MIB = 1024 * 1024


@dataclass(frozen=True)
class MemoryEstimate:
    weights_mib: float
    kv_cache_mib: float
    params: int
    kv_groups_per_layer: tuple[int, ...]
    seq_len: int
    batch: int
    bytes_per_scalar: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kv_groups_per_layer"] = list(self.kv_groups_per_layer)
        return d


def kv_cache_bytes(config: ModelConfig, kv_groups: Sequence[int], seq_len: int, batch: int, bytes_per_scalar: int) -> int:
    """K and V for every retained group: 2 * sum(groups * d_h) * T * batch * bytes."""
    return 2 * sum(kv_groups) * config.head_dim * seq_len * batch * bytes_per_scalar


def estimate_memory(
    config: ModelConfig,
    seq_len: int,
    batch: int = 1,
    bytes_per_scalar: int = 2,
    retained: Optional[Sequence[LayerRetained]] = None,
    kv_groups: Optional[Sequence[int]] = None,
) -> MemoryEstimate:
    """Weights from the exact parameter count; KV cache from retained groups.

    ``kv_groups`` overrides the per-layer group counts for the cache term
    only, for when just the retained KV totals are known.
    """
    if seq_len < 1 or batch < 1 or bytes_per_scalar < 1:
        raise ValueError("seq_len, batch and bytes_per_scalar must be >= 1")
    retained = list(retained) if retained is not None else full_retained(config)
    params = param_count(config, retained)
    groups = tuple(kv_groups) if kv_groups is not None else tuple(len(l.kv) for l in retained)
    return MemoryEstimate(
        weights_mib=params * bytes_per_scalar / MIB,
        kv_cache_mib=kv_cache_bytes(config, groups, seq_len, batch, bytes_per_scalar) / MIB,
        params=params,
        kv_groups_per_layer=groups,
        seq_len=seq_len,
        batch=batch,
        bytes_per_scalar=bytes_per_scalar,
    )
