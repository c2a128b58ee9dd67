import numpy as np
import pytest

from budgetprune.calibration import ScaleHyperParams, ScaleState, calibrate_scales, scaled_hooks
from budgetprune.data import sample_windows
from budgetprune.model import _ffn, forward
from budgetprune import tensor as T
from budgetprune.projection import project
from budgetprune.registry import build_registry
from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def setup(tiny_f64, corpus):
    reg, spec = build_registry(TINY_CONFIG, 0.5)
    mask = project(np.random.default_rng(0).random(len(reg)), reg, spec.budget).mask
    data = sample_windows(corpus, 16, 17, seed=2)
    return tiny_f64, reg, mask, data


def test_zero_steps_is_identity(setup):
    ckpt, reg, mask, data = setup
    state = calibrate_scales(ckpt, mask, reg, data, steps=0)
    assert np.all(state.gamma == 1.0)
    a = forward(ckpt, data[0], scaled_hooks(ckpt, reg, mask, state)).data
    b = forward(ckpt, data[0], scaled_hooks(ckpt, reg, mask)).data
    assert np.array_equal(a, b)


def test_one_parameter_per_retained_unit(setup):
    ckpt, reg, mask, data = setup
    state = calibrate_scales(ckpt, mask, reg, data, steps=3)
    assert state.n_trainable == int(mask.sum())
    assert np.array_equal(state.retained, np.flatnonzero(mask))
    mult = state.multipliers()
    assert np.all(mult[~mask] == 0)


def test_deterministic_and_backbone_untouched(setup):
    ckpt, reg, mask, data = setup
    before = {k: v.copy() for k, v in ckpt.tensors.items()}
    m0 = mask.copy()
    a = calibrate_scales(ckpt, mask, reg, data, ScaleHyperParams(lr=0.05), seed=3)
    b = calibrate_scales(ckpt, mask, reg, data, ScaleHyperParams(lr=0.05), seed=3)
    assert np.array_equal(a.gamma, b.gamma)
    assert np.array_equal(mask, m0)
    for k, v in ckpt.tensors.items():
        assert np.array_equal(v, before[k])


def test_final_loss_not_above_initial(setup):
    ckpt, reg, mask, data = setup
    for lr in (1e-2, 0.5, 5.0):
        s = calibrate_scales(ckpt, mask, reg, data, ScaleHyperParams(lr=lr), seed=0)
        assert s.final_loss <= s.initial_loss + 1e-6
        if s.reverted:
            assert np.all(s.gamma == 1.0)


def test_empty_group_rejected(setup):
    ckpt, reg, mask, data = setup
    bad = mask.copy()
    bad[reg.group_members[0]] = False
    with pytest.raises(ValueError):
        calibrate_scales(ckpt, bad, reg, data, steps=1)


def test_scale_is_linear_in_unit_contribution(tiny_f64):
    w = {n: T.Tensor(tiny_f64.layer(0, n)) for n in ("ffn_gate", "ffn_up", "ffn_down")}
    x = T.Tensor(np.random.default_rng(1).standard_normal((1, 5, TINY_CONFIG.d_model)))
    base = np.ones(TINY_CONFIG.ffn_dim)

    def out(g):
        m = base.copy()
        m[3] = g
        return _ffn(x, w["ffn_gate"], w["ffn_up"], w["ffn_down"], m).data

    np.testing.assert_allclose(out(2.5) - out(0.0), 2.5 * (out(1.0) - out(0.0)), atol=1e-12)


def test_state_round_trip():
    s = ScaleState(np.array([0, 2]), np.array([1.5, -2.0]), 4, initial_loss=2.0, final_loss=1.0)
    back = ScaleState.from_dict(s.to_dict())
    assert np.array_equal(back.gamma, s.gamma) and back.n_units == 4
    assert s.anomalies() == [2]
