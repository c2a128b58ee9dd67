"""A small LLaMA-style decoder with gate multipliers on prunable units.

Layers use pre-norm RMSNorm, rotary position embeddings, grouped-query
attention and a SwiGLU feed-forward block. Two gate injection points exist
per layer:

* ``ffn`` multipliers scale the intermediate activation ``silu(gate x) * up x``
  channel by channel before the down projection;
* ``kv`` multipliers scale the value vectors of each KV head group before the
  attention-weighted sum, which is the same as scaling the group's whole
  attention output.

Weights are stored ``(out_features, in_features)``. Query head ``h`` belongs
to KV group ``h // G``. Per-layer FFN width and KV-group count are read from
the weight shapes so that sliced checkpoints run through the same code.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor

ArrayLike = Union[np.ndarray, Tensor]

LAYER_TENSORS = ("attn_norm", "q_proj", "k_proj", "v_proj", "o_proj", "ffn_norm", "ffn_gate", "ffn_up", "ffn_down")


def layer_key(i: int, name: str) -> str:
    return f"layers.{i}.{name}"


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[layer_key(i, name)]

    def ffn_width(self, i: int) -> int:
        return self.layer(i, "ffn_gate").shape[0]

    def kv_groups(self, i: int) -> int:
        return self.layer(i, "k_proj").shape[0] // self.config.head_dim

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            copy.deepcopy(self.meta),
        )

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.tensors.items()}, copy.deepcopy(self.meta))

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, dh = config.d_model, config.head_dim
    shapes = {"tok_embeddings": (config.vocab_size, d), "norm": (d,), "lm_head": (config.vocab_size, d)}
    for i in range(config.n_layers):
        shapes[layer_key(i, "attn_norm")] = (d,)
        shapes[layer_key(i, "q_proj")] = (config.n_heads * dh, d)
        shapes[layer_key(i, "k_proj")] = (config.n_kv_heads * dh, d)
        shapes[layer_key(i, "v_proj")] = (config.n_kv_heads * dh, d)
        shapes[layer_key(i, "o_proj")] = (d, config.n_heads * dh)
        shapes[layer_key(i, "ffn_norm")] = (d,)
        shapes[layer_key(i, "ffn_gate")] = (config.ffn_dim, d)
        shapes[layer_key(i, "ffn_up")] = (config.ffn_dim, d)
        shapes[layer_key(i, "ffn_down")] = (d, config.ffn_dim)
    return shapes


def init_checkpoint(config: ModelConfig, seed: int = 0, std: float = 0.02) -> Checkpoint:
    rng = np.random.default_rng(seed)
    out_std = std / np.sqrt(2 * max(config.n_layers, 1))
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("o_proj", "ffn_down")):
            tensors[name] = (rng.standard_normal(shape) * out_std).astype(np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Checkpoint(config, tensors)


@dataclass
class GateHooks:
    """Per-layer gate multipliers; entries may be arrays, tape tensors or
    ``None`` (no multiplication at that injection point)."""

    ffn: list[Optional[ArrayLike]]
    kv: list[Optional[ArrayLike]]

    @classmethod
    def ones(cls, ckpt: Checkpoint, dtype=None) -> "GateHooks":
        dtype = dtype or ckpt.tensors["norm"].dtype
        n = ckpt.config.n_layers
        return cls(
            [np.ones(ckpt.ffn_width(i), dtype=dtype) for i in range(n)],
            [np.ones(ckpt.kv_groups(i), dtype=dtype) for i in range(n)],
        )

    def check(self, ckpt: Checkpoint) -> None:
        n = ckpt.config.n_layers
        if len(self.ffn) != n or len(self.kv) != n:
            raise ValueError("hooks must have one entry per layer")
        for i in range(n):
            if self.ffn[i] is not None and T.as_tensor(self.ffn[i]).shape != (ckpt.ffn_width(i),):
                raise ValueError(f"layer {i}: ffn multipliers must have length {ckpt.ffn_width(i)}")
            if self.kv[i] is not None and T.as_tensor(self.kv[i]).shape != (ckpt.kv_groups(i),):
                raise ValueError(f"layer {i}: kv multipliers must have length {ckpt.kv_groups(i)}")


def _tensor(weights: Mapping[str, ArrayLike], name: str, dtype) -> Tensor:
    w = weights[name]
    if isinstance(w, Tensor):
        return w
    return Tensor(w if w.dtype == dtype else w.astype(dtype))


def _attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, kv_mult, config: ModelConfig) -> Tensor:
    b, t, _ = x.shape
    dh, g = config.head_dim, config.group_size
    n_kv = wk.shape[0] // dh
    pos = np.arange(t)
    q = T.reshape(T.linear(x, wq), (b, t, n_kv, g, dh))
    q = T.transpose(q, (0, 2, 3, 1, 4))  # b, kv, g, t, dh
    k = T.reshape(T.linear(x, wk), (b, t, n_kv, 1, dh))
    k = T.transpose(k, (0, 2, 3, 1, 4))
    if kv_mult is not None:
        # scaling the group's v_proj rows scales its value vectors
        d = wv.shape[1]
        wv = T.mul(T.reshape(wv, (n_kv, dh, d)), T.reshape(T.as_tensor(kv_mult), (n_kv, 1, 1)))
        wv = T.reshape(wv, (n_kv * dh, d))
    v = T.reshape(T.linear(x, wv), (b, t, n_kv, 1, dh))
    v = T.transpose(v, (0, 2, 3, 1, 4))
    q = T.rope_rotate(q, pos, config.rope_base)
    k = T.rope_rotate(k, pos, config.rope_base)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
    att = T.causal_softmax(scores)
    out = T.matmul(att, v)  # b, kv, g, t, dh
    out = T.reshape(T.transpose(out, (0, 3, 1, 2, 4)), (b, t, n_kv * g * dh))
    return T.linear(out, wo)


def _ffn(x: Tensor, wg: Tensor, wu: Tensor, wd: Tensor, ffn_mult) -> Tensor:
    h = T.mul(T.silu(T.linear(x, wg)), T.linear(x, wu))
    if ffn_mult is not None:
        # channel j's multiplier scales column j of the down projection
        wd = T.mul(wd, T.reshape(T.as_tensor(ffn_mult), (1, -1)))
    return T.linear(h, wd)


def forward(
    ckpt: Checkpoint,
    tokens,
    hooks: Optional[GateHooks] = None,
    weights: Optional[Mapping[str, ArrayLike]] = None,
) -> Tensor:
    """Causal LM logits for ``tokens`` of shape (T,) or (B, T).

    ``weights`` overrides ``ckpt.tensors`` (pretraining passes tape tensors
    here). Without ``hooks`` no multiplication is performed at all. Gate
    multipliers are applied to the weights that read the gated activations
    (down-projection columns, v_proj rows), which is the same linear map as
    scaling the activations and rounds exactly like a folded checkpoint.
    """
    cfg = ckpt.config
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("tokens must have shape (T,) or (B, T)")
    if hooks is not None:
        hooks.check(ckpt)
    weights = ckpt.tensors if weights is None else weights
    dtype = T.as_tensor(weights["norm"]).data.dtype
    w = lambda name: _tensor(weights, name, dtype)  # noqa: E731

    x = T.embedding(w("tok_embeddings"), tokens)
    for i in range(cfg.n_layers):
        lw = lambda name: w(layer_key(i, name))  # noqa: E731
        h = T.rmsnorm(x, lw("attn_norm"), cfg.norm_eps)
        kv_mult = hooks.kv[i] if hooks is not None else None
        x = T.add(x, _attention(h, lw("q_proj"), lw("k_proj"), lw("v_proj"), lw("o_proj"), kv_mult, cfg))
        h = T.rmsnorm(x, lw("ffn_norm"), cfg.norm_eps)
        ffn_mult = hooks.ffn[i] if hooks is not None else None
        x = T.add(x, _ffn(h, lw("ffn_gate"), lw("ffn_up"), lw("ffn_down"), ffn_mult))
    x = T.rmsnorm(x, w("norm"), cfg.norm_eps)
    logits = T.linear(x, w("lm_head"))
    if squeeze:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def lm_loss(logits: Tensor, tokens) -> Tensor:
    """Token-mean next-token cross-entropy; ``logits`` are for ``tokens[..., :-1]``."""
    tokens = np.asarray(tokens)
    v = logits.shape[-1]
    return T.softmax_ce(T.reshape(logits, (-1, v)), tokens[..., 1:].reshape(-1))


def window_loss(ckpt: Checkpoint, window, hooks: Optional[GateHooks] = None) -> Tensor:
    window = np.asarray(window)
    return lm_loss(forward(ckpt, window[..., :-1], hooks), window)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerRetained:
    ffn: tuple[int, ...]
    kv: tuple[int, ...]


def full_retained(config: ModelConfig) -> list[LayerRetained]:
    return [
        LayerRetained(tuple(range(config.ffn_dim)), tuple(range(config.n_kv_heads))) for _ in range(config.n_layers)
    ]


def param_count(config: ModelConfig, retained: Optional[Sequence[LayerRetained]] = None) -> int:
    """Exact number of scalars in a checkpoint, optionally after slicing."""
    d, dh, g = config.d_model, config.head_dim, config.group_size
    total = 2 * config.vocab_size * d + d
    if retained is None:
        retained = full_retained(config)
    if len(retained) != config.n_layers:
        raise ValueError(f"expected {config.n_layers} retained entries, got {len(retained)}")
    for keep in retained:
        for idx, limit in ((keep.ffn, config.ffn_dim), (keep.kv, config.n_kv_heads)):
            if any(j < 0 or j >= limit for j in idx) or len(set(idx)) != len(idx):
                raise IndexError(f"retained index out of range or repeated: {idx}")
        total += 2 * d
        total += 3 * d * len(keep.ffn)
        total += (2 * g + 2) * dh * d * len(keep.kv)
    return total
