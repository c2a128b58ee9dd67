"""Retention summaries and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .registry import KINDS, PrunableRegistry


def retention_report(mask, registry: PrunableRegistry) -> dict:
    """Keep ratios per kind, globally and per layer."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (len(registry),):
        raise ValueError("mask does not match registry")
    out = {"global": {}, "per_layer": []}
    for kind in KINDS:
        sel = registry.kind_mask(kind)
        if sel.any():
            out["global"][kind.value] = float(mask[sel].mean())
    for layer in range(registry.n_layers):
        row = {"layer": layer}
        for kind in KINDS:
            sel = registry.kind_mask(kind) & (registry.layers == layer)
            if sel.any():
                row[kind.value] = float(mask[sel].mean())
                row[f"{kind.value}_kept"] = int(mask[sel].sum())
                row[f"{kind.value}_total"] = int(sel.sum())
        out["per_layer"].append(row)
    return out


def write_retention_csv(report: dict, path: Union[str, Path]) -> None:
    rows = report["per_layer"]
    cols = ["layer"] + [k.value for k in KINDS if any(k.value in r for r in rows)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])


@dataclass
class PruneReport:
    retention: dict
    losses: list[float] = field(default_factory=list)
    stability: dict = field(default_factory=dict)
    memory: list[dict] = field(default_factory=list)
    selection_bias: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "retention": self.retention,
            "losses": self.losses,
            "stability": self.stability,
            "memory": self.memory,
            "selection_bias": self.selection_bias,
            **self.extra,
        }

    def write(self, json_path: Union[str, Path], csv_path: Optional[Union[str, Path]] = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2))
        if csv_path is not None:
            write_retention_csv(self.retention, csv_path)
