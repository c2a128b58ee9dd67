"""Byte-level corpus handling.

Tokens are raw bytes (vocabulary 256, no special tokens). A window of
length ``L`` yields ``L - 1`` next-token predictions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

VOCAB_SIZE = 256


def bundled_corpus() -> bytes:
    return resources.files("budgetprune").joinpath("data/corpus.txt").read_bytes()


def load_corpus(path: Optional[Union[str, Path]] = None) -> np.ndarray:
    raw = bundled_corpus() if path is None else Path(path).read_bytes()
    if not raw:
        raise ValueError("corpus is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def corpus_digest(tokens: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype=np.uint8).tobytes()).hexdigest()[:16]


def split_corpus(tokens: np.ndarray, held_out_frac: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous train / held-out split; the held-out part is the tail."""
    cut = int(round(len(tokens) * (1 - held_out_frac)))
    return tokens[:cut], tokens[cut:]


@dataclass
class TokenDataset:
    windows: np.ndarray  # (count, length) int64

    def __post_init__(self):
        if self.windows.ndim != 2 or len(self.windows) == 0:
            raise ValueError("dataset needs at least one window")
        if self.windows.min() < 0 or self.windows.max() >= VOCAB_SIZE:
            raise ValueError("tokens must lie in [0, 256)")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def length(self) -> int:
        return self.windows.shape[1]

    def __getitem__(self, i):
        return self.windows[i]


def sample_windows(tokens: np.ndarray, count: int, length: int, seed: int) -> TokenDataset:
    """``count`` contiguous windows at seeded random offsets."""
    if len(tokens) < length:
        raise ValueError(f"corpus of {len(tokens)} tokens is shorter than window {length}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(tokens) - length + 1, size=count)
    return TokenDataset(np.stack([tokens[s : s + length] for s in starts]))


def tile_windows(tokens: np.ndarray, length: int, max_count: Optional[int] = None) -> TokenDataset:
    """Non-overlapping windows from the start of ``tokens``."""
    n = len(tokens) // length
    if max_count is not None:
        n = min(n, max_count)
    if n == 0:
        raise ValueError("corpus too short for a single window")
    return TokenDataset(np.asarray(tokens[: n * length]).reshape(n, length))
