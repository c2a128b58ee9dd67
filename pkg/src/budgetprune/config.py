"""Model configuration and backbone presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model={self.d_model} must equal n_heads*head_dim={self.n_heads * self.head_dim}"
            )
        if self.n_kv_heads <= 0 or self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if min(self.n_layers, self.ffn_dim, self.vocab_size) < 0:
            raise ConfigError("negative dimension")

    @property
    def group_size(self) -> int:
        """Query heads served by one KV head."""
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


TOY_CONFIG = ModelConfig(n_layers=4, d_model=64, n_heads=8, n_kv_heads=2, head_dim=8, ffn_dim=256)

# Layer/width/head counts of the backbones studied at scale. Vocabulary sizes
# come from the public model cards; all use untied input/output embeddings.
PRESETS: dict[str, ModelConfig] = {
    "toy": TOY_CONFIG,
    "llama-7b": ModelConfig(32, 4096, 32, 32, 128, 11008, vocab_size=32000),
    "llama2-7b": ModelConfig(32, 4096, 32, 32, 128, 11008, vocab_size=32000),
    "llama2-13b": ModelConfig(40, 5120, 40, 40, 128, 13824, vocab_size=32000),
    "vicuna-7b": ModelConfig(32, 4096, 32, 32, 128, 11008, vocab_size=32000),
    "llama3.1-8b": ModelConfig(32, 4096, 32, 8, 128, 14336, vocab_size=128256),
    "qwen3-8b": ModelConfig(36, 4096, 32, 8, 128, 12288, vocab_size=151936),
    "qwen3-14b": ModelConfig(40, 5120, 40, 8, 128, 17408, vocab_size=151936),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
