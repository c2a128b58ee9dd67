import hashlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import budgetprune
from budgetprune.checkpoint_io import load_checkpoint, save_checkpoint
from budgetprune.config import TOY_CONFIG, ModelConfig
from budgetprune.data import load_corpus
from budgetprune.gates import GateHyperParams
from budgetprune.model import init_checkpoint
from budgetprune.pipeline import make_splits, prune
from budgetprune.projection import RankingRule, RankVariant

PRETRAIN_STEPS = 2000
PRETRAIN_SEED = 0

TINY_CONFIG = ModelConfig(n_layers=2, d_model=16, n_heads=4, n_kv_heads=2, head_dim=4, ffn_dim=24)


def _source_digest() -> str:
    """Digest of the code that determines pretrained weights, so stale caches are rebuilt."""
    root = Path(budgetprune.__file__).parent
    h = hashlib.sha256()
    for name in ("tensor.py", "model.py", "pretrain.py", "optim.py", "config.py", "data.py", "data/corpus.txt"):
        h.update((root / name).read_bytes())
    h.update(f"{PRETRAIN_STEPS}-{PRETRAIN_SEED}".encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def corpus():
    return load_corpus()


@pytest.fixture(scope="session")
def splits(corpus):
    return make_splits(corpus)


@pytest.fixture(scope="session")
def backbone(request, corpus):
    """The pretrained toy backbone (2000 AdamW steps), cached across sessions."""
    from budgetprune.pretrain import pretrain_backbone

    cache = Path(request.config.cache.mkdir("budgetprune"))
    path = cache / f"toy-backbone-{_source_digest()}.bpck"
    if path.exists():
        return load_checkpoint(path)
    res = pretrain_backbone(TOY_CONFIG, corpus, steps=PRETRAIN_STEPS, seed=PRETRAIN_SEED)
    # round-trip through the container so the cached and fresh paths agree bitwise
    save_checkpoint(res.checkpoint, path)
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def backbone_path(backbone, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "toy.bpck"
    save_checkpoint(backbone, path)
    return path


def unit_costs(config):
    """Per-unit exact costs re-derived from the config: 1 per FFN channel, (2G+2)d_h/3 per KV group."""
    kv = Fraction((2 * config.group_size + 2) * config.head_dim, 3)
    return ([Fraction(1)] * config.ffn_dim + [kv] * config.n_kv_heads) * config.n_layers


class StepAudit:
    """Records the exact cost of every training-step mask, computed independently of the library."""

    def __init__(self, config):
        self.costs = unit_costs(config)
        self.step_costs = []
        self.guard_steps = 0

    def __call__(self, step, hm, loss):
        self.step_costs.append(sum((c for c, on in zip(self.costs, hm.mask.tolist()) if on), Fraction(0)))
        self.guard_steps += bool(hm.guard_interventions)


def _gate_run(backbone, splits, ratio, variant="p", seed=0):
    hp = GateHyperParams(rule=RankingRule(RankVariant(variant)))
    audit = StepAudit(backbone.config)
    registry, spec, run = prune(backbone, splits, ratio, hp=hp, seed=seed, on_step=audit)
    run.audit = audit
    return registry, spec, run


@pytest.fixture(scope="session")
def gate_runs(backbone, splits):
    """Lazily computed full gate-learning runs keyed by (ratio, rank, seed)."""
    memo = {}

    def get(ratio=0.5, variant="p", seed=0):
        key = (ratio, variant, seed)
        if key not in memo:
            memo[key] = _gate_run(backbone, splits, ratio, variant, seed)
        return memo[key]

    return get


@pytest.fixture(scope="session")
def calibrations(backbone, splits, gate_runs):
    """Scale calibrations of the learned SCORE_P masks keyed by (ratio, seed)."""
    from budgetprune.calibration import calibrate_scales

    memo = {}

    def get(ratio=0.5, seed=0):
        if (ratio, seed) not in memo:
            registry, _, run = gate_runs(ratio)
            memo[(ratio, seed)] = calibrate_scales(backbone, run.mask.mask, registry, splits.calibration, seed=seed)
        return memo[(ratio, seed)]

    return get


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_f64():
    # std 0.5 so per-unit gradients are well above finite-difference roundoff
    return init_checkpoint(TINY_CONFIG, seed=3, std=0.5).astype(np.float64)
