import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune.config import TOY_CONFIG
from budgetprune.projection import (
    SCORE_P,
    VALUE_PER_COST,
    InfeasibleBudget,
    RankingRule,
    RankVariant,
    ScanRule,
    project,
    projection_timer,
    selection_bias_report,
    synthetic_registry,
)
from budgetprune.registry import PrunableRegistry, build_registry, mask_cost
from reference_projection import ReferenceInfeasible, random_instance, reference_project


def one_layer(costs):
    return PrunableRegistry.from_units([(0, "ffn", j, c) for j, c in enumerate(costs)])


def compare(p, rows, budget, rule):
    reg = PrunableRegistry.from_units(rows)
    units = [(r[0], r[1], Fraction(r[3])) for r in rows]
    try:
        ref = reference_project(p, units, budget, rule.variant is RankVariant.VALUE_PER_COST,
                                rule.scan is ScanRule.HALT)
    except ReferenceInfeasible:
        ref = None
    try:
        got = project(np.array(p), reg, budget, rule).mask.astype(int).tolist()
    except InfeasibleBudget:
        got = None
    return got, ref


def test_hand_traced_example():
    reg = one_layer([1, 3, 1, 1])
    hm = project(np.array([0.9, 0.8, 0.7, 0.6]), reg, 3)
    assert hm.mask.astype(int).tolist() == [1, 0, 1, 1]
    assert hm.consumed_cost == 3
    hm = project(np.array([0.9, 0.8, 0.7, 0.6]), reg, 3, VALUE_PER_COST)
    assert hm.mask.astype(int).tolist() == [1, 0, 1, 1]


def test_rules_diverge_when_expensive_unit_fits():
    reg = one_layer([1, 3, 1, 1])
    p = np.array([0.9, 0.8, 0.7, 0.6])
    a = project(p, reg, 4).mask.astype(int).tolist()
    b = project(p, reg, 4, VALUE_PER_COST).mask.astype(int).tolist()
    assert a == [1, 1, 0, 0]
    assert b == [1, 0, 1, 1]


def test_ties_keep_lowest_indices():
    reg = one_layer([1] * 6)
    assert project(np.full(6, 0.5), reg, 3).mask.astype(int).tolist() == [1, 1, 1, 0, 0, 0]


def test_slack_budget_keeps_everything():
    reg, spec = build_registry(TOY_CONFIG)
    p = np.random.default_rng(0).random(len(reg))
    assert project(p, reg, spec.total_cost).mask.all()
    assert project(p, reg, spec.total_cost + 5).mask.all()


def test_halt_stops_at_first_misfit():
    reg = one_layer([1, 3, 1, 1])
    p = np.array([0.9, 0.8, 0.7, 0.6])
    hm = project(p, reg, 3, RankingRule(scan=ScanRule.HALT))
    assert hm.mask.astype(int).tolist() == [1, 0, 0, 0]


def test_guard_forces_and_evicts():
    rows = [(0, "ffn", 0, 1), (0, "ffn", 1, 1), (0, "ffn", 2, 1), (1, "ffn", 0, 1), (1, "ffn", 1, 1)]
    reg = PrunableRegistry.from_units(rows)
    p = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
    hm = project(p, reg, 3)
    assert hm.guard_interventions == [3]
    assert hm.evictions == [2]
    assert hm.mask.astype(int).tolist() == [1, 1, 0, 1, 0]
    assert hm.consumed_cost <= 3


def test_infeasible_guard_raises():
    reg = PrunableRegistry.from_units([(0, "ffn", 0, 2), (1, "ffn", 0, 2)])
    with pytest.raises(InfeasibleBudget):
        project(np.array([0.5, 0.5]), reg, 3)


def test_bad_probabilities():
    reg = one_layer([1, 1])
    with pytest.raises(ValueError):
        project(np.array([0.5, 1.5]), reg, 1)
    with pytest.raises(ValueError):
        project(np.array([0.5]), reg, 1)


@pytest.mark.parametrize("seed", range(300))
def test_matches_reference(seed):
    rng = np.random.default_rng(10_000 + seed)
    p, rows, budget = random_instance(rng)
    for rule in (SCORE_P, VALUE_PER_COST, RankingRule(scan=ScanRule.HALT),
                 RankingRule(RankVariant.VALUE_PER_COST, scan=ScanRule.HALT)):
        got, ref = compare(p, rows, budget, rule)
        assert got == ref, (rule, p, rows, budget)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_budget_monotone(seed, r1, r2):
    reg, spec = build_registry(TOY_CONFIG)
    p = np.random.default_rng(seed).random(len(reg))
    lo, hi = sorted((r1, r2))
    try:
        a = project(p, reg, Fraction(lo) * spec.total_cost)
    except InfeasibleBudget:
        return
    b = project(p, reg, Fraction(hi) * spec.total_cost)
    assert a.consumed_cost <= b.consumed_cost


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0))
def test_feasible_and_nonempty(seed, ratio):
    reg, spec = build_registry(TOY_CONFIG, ratio)
    p = np.random.default_rng(seed).random(len(reg))
    hm = project(p, reg, spec.budget)
    assert mask_cost(hm.mask, reg) <= spec.budget
    for members in reg.group_members:
        assert hm.mask[members].any()


def test_gumbel_is_pure_in_seed():
    reg, spec = build_registry(TOY_CONFIG, 0.5)
    p = np.random.default_rng(0).random(len(reg))
    r1 = RankingRule(RankVariant.GUMBEL_TOPK, gumbel_seed=5)
    a, b = project(p, reg, spec.budget, r1), project(p, reg, spec.budget, r1)
    c = project(p, reg, spec.budget, RankingRule(RankVariant.GUMBEL_TOPK, gumbel_seed=6))
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask)


def test_sorted_input_gives_same_selection():
    reg = one_layer([1] * 50)
    p = np.random.default_rng(1).random(50)
    order = np.argsort(-p)
    a = project(p, reg, 20).mask
    b = project(p[order], reg, 20).mask
    assert set(np.flatnonzero(a)) == set(order[np.flatnonzero(b)])


def test_equal_probabilities_same_counts_per_kind():
    reg, spec = build_registry(TOY_CONFIG, 0.8)
    p = np.full(len(reg), 0.5)
    rep = selection_bias_report(p, reg, spec.budget)
    assert rep["p"]["ffn_kept_count"] + rep["p"]["kv_kept_count"] > 0
    for k in ("ffn_keep", "kv_keep", "ffn_budget_share", "kv_budget_share"):
        assert 0 <= rep["p-over-c"][k] <= 1


def test_single_kind_rules_agree():
    reg, spec = build_registry(TOY_CONFIG, 0.6, target="ffn")
    p = np.random.default_rng(2).random(len(reg))
    assert np.array_equal(project(p, reg, spec.budget).mask, project(p, reg, spec.budget, VALUE_PER_COST).mask)


def test_projection_timer_small_n():
    out = projection_timer(1, trials=2, reference_step_time=1.0)
    assert out["n"] == 1 and out["fraction_of_step"] >= 0


def test_projection_scaling():
    n = 100_000
    small = projection_timer(n, trials=5, keep_ratio=0.5)["median_s"]
    big = projection_timer(4 * n, trials=5, keep_ratio=0.5)["median_s"]
    assert big / small < 8, (small, big)
