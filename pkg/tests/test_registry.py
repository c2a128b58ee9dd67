from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune.config import TOY_CONFIG, ConfigError, ModelConfig, get_preset
from budgetprune.registry import (
    EmptyRegistry,
    PrunableRegistry,
    TargetFilter,
    UnitKind,
    alpha,
    build_registry,
    mask_cost,
)


def test_alpha_values():
    assert alpha(get_preset("llama2-7b")) == Fraction(512, 3)
    assert alpha(get_preset("llama3.1-8b")) == Fraction(1280, 3)
    assert alpha(TOY_CONFIG) == Fraction(80, 3)


def test_alpha_rejects_bad_grouping():
    with pytest.raises(ConfigError):
        ModelConfig(1, 32, 4, 3, 8, 8)


def test_toy_registry_size_and_cost():
    reg, spec = build_registry(TOY_CONFIG)
    assert len(reg) == 4 * 256 + 4 * 2 == 1032
    assert reg.total_cost == 1024 + 8 * Fraction(80, 3)
    assert spec.budget == spec.total_cost


def test_budget_from_ratio():
    reg = PrunableRegistry.from_units([(0, "ffn", j, 1) for j in range(100)])
    assert Fraction(1, 2) * reg.total_cost == 50
    cfg = ModelConfig(1, 8, 2, 1, 4, 10)
    _, spec = build_registry(cfg, 0.5)
    assert spec.budget == spec.total_cost / 2


def test_target_filters():
    reg, _ = build_registry(TOY_CONFIG, target="ffn")
    assert len(reg) == 1024 and set(reg.costs.tolist()) == {1.0}
    reg, _ = build_registry(TOY_CONFIG, target=TargetFilter.KV_ONLY)
    assert len(reg) == 8 and reg.total_cost == 8 * Fraction(80, 3)


def test_cost_scale():
    reg, _ = build_registry(TOY_CONFIG, cost_scale=0.5)
    assert reg.cost(reg.index_of(0, UnitKind.KV_GROUP, 0)) == Fraction(40, 3)


def test_invalid_ratio():
    for bad in (0, -0.1, 1.5):
        with pytest.raises(ValueError):
            build_registry(TOY_CONFIG, bad)


def test_empty_registry():
    cfg = ModelConfig(2, 32, 4, 2, 8, 0)
    with pytest.raises(EmptyRegistry):
        build_registry(cfg, target="ffn")


def test_ordering_bijection():
    reg, _ = build_registry(TOY_CONFIG)
    units = reg.units
    keys = [(u.layer, u.kind.value != "ffn", u.local_index) for u in units]
    assert keys == sorted(keys)
    for u in units[::37]:
        assert reg.index_of(u.layer, u.kind, u.local_index) == u.global_index


def test_mask_cost_examples():
    reg, _ = build_registry(TOY_CONFIG)
    assert mask_cost(np.zeros(len(reg)), reg) == 0
    assert mask_cost(np.ones(len(reg)), reg) == reg.total_cost
    m = np.zeros(len(reg))
    m[reg.index_of(2, UnitKind.KV_GROUP, 1)] = 1
    assert mask_cost(m, reg) == Fraction(80, 3)
    with pytest.raises(ValueError):
        mask_cost(np.ones(3), reg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_cost_is_modular(seed):
    reg, _ = build_registry(TOY_CONFIG)
    rng = np.random.default_rng(seed)
    a, b = rng.random(len(reg)) < 0.5, rng.random(len(reg)) < 0.5
    assert mask_cost(a | b, reg) + mask_cost(a & b, reg) == mask_cost(a, reg) + mask_cost(b, reg)
