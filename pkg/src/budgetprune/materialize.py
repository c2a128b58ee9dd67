"""Slice a checkpoint down to its retained units and fold the scales in.

FFN channel ``j`` owns row ``j`` of ``ffn_gate`` and ``ffn_up`` and column
``j`` of ``ffn_down``; its scale multiplies that down column. KV group ``g``
owns rows ``g*d_h:(g+1)*d_h`` of ``k_proj`` and ``v_proj``, the query rows
and output columns of heads ``g*G .. g*G+G-1``; its scale multiplies the
``v_proj`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibration import ScaleState, scaled_hooks
from .config import ModelConfig
from .model import Checkpoint, LayerRetained, forward, layer_key, param_count
from .registry import PrunableRegistry, UnitKind


@dataclass(frozen=True)
class SlicePlan:
    config: ModelConfig
    layers: tuple[LayerRetained, ...]
    ffn_scale: tuple[np.ndarray, ...]
    kv_scale: tuple[np.ndarray, ...]

    @classmethod
    def from_mask(
        cls,
        config: ModelConfig,
        registry: PrunableRegistry,
        mask,
        gamma: Optional[ScaleState] = None,
    ) -> "SlicePlan":
        mask = np.asarray(mask).astype(bool)
        if mask.shape != (len(registry),):
            raise ValueError("mask does not match registry")
        mult = gamma.multipliers() if gamma is not None else mask.astype(np.float64)
        layers, fs, ks = [], [], []
        for i in range(config.n_layers):
            kept = {}
            scales = {}
            for kind, width in ((UnitKind.FFN_CHANNEL, config.ffn_dim), (UnitKind.KV_GROUP, config.n_kv_heads)):
                sl = registry.layer_slice(i, kind)
                if sl.stop == sl.start:
                    # not a pruning target: keep everything, unscaled
                    kept[kind] = np.arange(width)
                    scales[kind] = np.ones(width)
                    continue
                local = registry.local_indices[sl]
                on = mask[sl]
                order = np.argsort(local[on])
                kept[kind] = local[on][order]
                scales[kind] = mult[sl][on][order]
                if len(kept[kind]) == 0:
                    raise ValueError(f"layer {i}: no {kind.value} units retained")
                if kept[kind].max() >= width:
                    raise IndexError(f"layer {i}: {kind.value} index out of range")
            layers.append(LayerRetained(tuple(int(j) for j in kept[UnitKind.FFN_CHANNEL]),
                                        tuple(int(j) for j in kept[UnitKind.KV_GROUP])))
            fs.append(scales[UnitKind.FFN_CHANNEL])
            ks.append(scales[UnitKind.KV_GROUP])
        return cls(config, tuple(layers), tuple(fs), tuple(ks))

    def param_count(self) -> int:
        return param_count(self.config, self.layers)

    def kv_groups_per_layer(self) -> list[int]:
        return [len(l.kv) for l in self.layers]


def materialize(
    ckpt: Checkpoint,
    registry: PrunableRegistry,
    mask,
    gamma: Optional[ScaleState] = None,
    meta: Optional[dict] = None,
) -> Checkpoint:
    """Dense pruned checkpoint with scales folded into the sliced weights."""
    cfg = ckpt.config
    plan = SlicePlan.from_mask(cfg, registry, mask, gamma)
    dh, g = cfg.head_dim, cfg.group_size
    out = {k: ckpt.tensors[k].copy() for k in ("tok_embeddings", "norm", "lm_head")}
    for i, keep in enumerate(plan.layers):
        t = lambda name: ckpt.tensors[layer_key(i, name)]  # noqa: E731
        dtype = t("ffn_down").dtype
        f = np.asarray(keep.ffn, dtype=np.int64)
        out[layer_key(i, "attn_norm")] = t("attn_norm").copy()
        out[layer_key(i, "ffn_norm")] = t("ffn_norm").copy()
        out[layer_key(i, "ffn_gate")] = t("ffn_gate")[f].copy()
        out[layer_key(i, "ffn_up")] = t("ffn_up")[f].copy()
        out[layer_key(i, "ffn_down")] = t("ffn_down")[:, f] * plan.ffn_scale[i].astype(dtype)[None, :]

        kv = np.asarray(keep.kv, dtype=np.int64)
        kv_rows = (kv[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        q_rows = (kv[:, None] * (g * dh) + np.arange(g * dh)[None, :]).reshape(-1)
        v_scale = np.repeat(plan.kv_scale[i].astype(dtype), dh)
        out[layer_key(i, "q_proj")] = t("q_proj")[q_rows].copy()
        out[layer_key(i, "k_proj")] = t("k_proj")[kv_rows].copy()
        out[layer_key(i, "v_proj")] = t("v_proj")[kv_rows] * v_scale[:, None]
        out[layer_key(i, "o_proj")] = t("o_proj")[:, q_rows].copy()

    info = dict(meta or {})
    info.update(
        {
            "retained": [{"ffn": list(l.ffn), "kv": list(l.kv)} for l in plan.layers],
            "folded": gamma is not None,
            "param_count": plan.param_count(),
        }
    )
    pruned = Checkpoint(cfg, out, {"pruning": info})
    assert pruned.num_params() == plan.param_count()
    return pruned


def retained_from_meta(ckpt: Checkpoint) -> Optional[list[LayerRetained]]:
    info = ckpt.meta.get("pruning")
    if not info:
        return None
    return [LayerRetained(tuple(l["ffn"]), tuple(l["kv"])) for l in info["retained"]]


@dataclass
class EquivalenceReport:
    max_abs: float
    max_rel: float
    tolerance: float
    n_probes: int

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "tolerance": self.tolerance,
                "n_probes": self.n_probes, "passed": self.passed}


def verify_equivalence(
    original: Checkpoint,
    registry: PrunableRegistry,
    mask,
    gamma: Optional[ScaleState],
    pruned: Checkpoint,
    n_probes: int = 16,
    length: int = 32,
    tolerance: float = 1e-5,
    seed: int = 0,
) -> EquivalenceReport:
    """Max logit deviation between the hooked original and the sliced model on random token probes."""
    if pruned.config != original.config:
        raise ValueError("checkpoints have different base configs")
    for i in range(original.config.n_layers):
        if pruned.layer(i, "ffn_down").shape[0] != original.layer(i, "ffn_down").shape[0]:
            raise ValueError("shape mismatch between original and pruned checkpoints")
    rng = np.random.default_rng(seed)
    probes = rng.integers(0, original.config.vocab_size, size=(n_probes, length))
    hooks = scaled_hooks(original, registry, mask, gamma)
    ref = forward(original, probes, hooks).data.astype(np.float64)
    got = forward(pruned, probes).data.astype(np.float64)
    diff = np.abs(ref - got)
    rel = diff / np.maximum(np.abs(ref), 1e-6)
    return EquivalenceReport(float(diff.max()), float(rel.max()), tolerance, n_probes)
