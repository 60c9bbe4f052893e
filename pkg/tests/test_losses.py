import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hetseg.core import ConfigError, LabelSet, ValidationError, mask
from hetseg.losses import (
    CurriculumSchedule,
    LossWeights,
    VolumetricParams,
    dice_loss,
    longitudinal_loss,
    masked_dice_supervision,
    spatial_loss,
    total_loss,
    volumetric_loss,
)

SHAPE = (3, 3, 3)
probs = hnp.arrays(np.float64, SHAPE, elements=st.floats(0, 1))
binary = hnp.arrays(np.float64, SHAPE, elements=st.sampled_from([0.0, 1.0]))


def _heads(p=0.0, shape=SHAPE):
    return {h: np.full(shape, p) for h in ("p_a_t1", "p_a_t2", "p_n_t2", "p_v_t2")}


# --- Dice -----------------------------------------------------------------


def test_dice_examples():
    t = (np.arange(8).reshape(2, 2, 2) % 2).astype(float)
    assert dice_loss(t, t, smooth=1.0)[0] == 0.0
    assert dice_loss(np.zeros(SHAPE), np.zeros(SHAPE), smooth=1.0)[0] == 0.0
    v, _ = dice_loss(np.full((2, 2, 2), 0.5), np.ones((2, 2, 2)), smooth=0.0)
    assert v == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ValidationError):
        dice_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(max_examples=50, deadline=None)
@given(p=probs, t=binary)
def test_dice_is_bounded(p, t):
    v, g = dice_loss(p, t, smooth=1.0)
    assert 0.0 <= v <= 1.0
    assert g["pred"].shape == SHAPE


# --- longitudinal -----------------------------------------------------------


def test_longitudinal_examples():
    y1, y2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert longitudinal_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]), y1, y2)[0] == 0.0
    v, _ = longitudinal_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), y1, y2)
    assert abs(v - 1.0) < 1e-9
    assert longitudinal_loss(np.ones(2), np.ones(2))[0] == 0.0


def test_longitudinal_term_gating():
    y1 = np.array([1.0, 0.0])
    # only T1 (p_n on y1) and T3 (p_v - 1 on y1) are evaluated
    v, g = longitudinal_loss(np.array([0.5, 0.7]), np.array([0.25, 0.9]), y_a_t1=y1)
    assert v == pytest.approx((0.25 + 0.75**2) / 2, abs=1e-12)
    assert g["p_n"][1] == 0.0 and g["p_v"][1] == 0.0


@settings(max_examples=50, deadline=None)
@given(pn=probs, pv=probs, y1=binary, y2=binary)
def test_longitudinal_gradient_vanishes_off_labels(pn, pv, y1, y2):
    _, g = longitudinal_loss(pn, pv, y1, y2)
    off = (y1 == 0) & (y2 == 0)
    assert np.all(g["p_n"][off] == 0.0) and np.all(g["p_v"][off] == 0.0)


@settings(max_examples=50, deadline=None)
@given(pn=probs, pv=probs, y1=binary, y2=binary)
def test_gated_and_literal_forms_differ_by_a_constant(pn, pv, y1, y2):
    vg, gg = longitudinal_loss(pn, pv, y1, y2, normalize=False)
    vl, gl = longitudinal_loss(pn, pv, y1, y2, literal=True, normalize=False)
    np.testing.assert_allclose(gg["p_n"], gl["p_n"], atol=1e-12)
    np.testing.assert_allclose(gg["p_v"], gl["p_v"], atol=1e-12)
    # the constant is the number of y == 0 voxels in the two "-1" terms
    assert vl - vg == pytest.approx(float((y1 == 0).sum() + (y2 == 0).sum()), abs=1e-9)


def test_longitudinal_normalisation():
    pn, pv, y = np.full(SHAPE, 0.5), np.full(SHAPE, 0.5), np.ones(SHAPE)
    raw = longitudinal_loss(pn, pv, y, y, normalize=False)[0]
    assert longitudinal_loss(pn, pv, y, y)[0] == pytest.approx(raw / 27)


# --- volumetric --------------------------------------------------------------


def _with_volume(total, n=400):
    p = np.zeros(n)
    p[: int(total)] = 1.0
    return p.reshape(20, 20, 1)


@pytest.mark.parametrize("v2, expected", [(110, 0.0), (130, 100.0), (70, 100.0), (120, 0.0), (80, 0.0)])
def test_volumetric_examples_unnormalised(v2, expected):
    v, _ = volumetric_loss(_with_volume(100), _with_volume(v2), 1.0, VolumetricParams(), normalize=False)
    assert abs(v - expected) < 1e-9


def test_volumetric_zero_for_cross_sectional_and_spacing():
    assert volumetric_loss(_with_volume(100), _with_volume(200), 0.0)[0] == 0.0
    v, _ = volumetric_loss(_with_volume(100), _with_volume(130), 1.0, spacing=(2.0, 1.0, 1.0), normalize=False)
    assert v == pytest.approx((260 - 240) ** 2)
    with pytest.raises(ValidationError):
        volumetric_loss(_with_volume(1), _with_volume(1), -1.0)


def test_annualised_band():
    p = VolumetricParams()
    assert p.band(1.0) == pytest.approx((0.8, 1.2))
    assert p.band(2.0) == pytest.approx((0.6, 1.4))
    assert p.band(10.0)[0] == 0.0
    assert VolumetricParams(compound=True).band(2.0) == pytest.approx((0.64, 1.44))
    assert VolumetricParams(annualized=False).band(3.0) == (0.8, 1.2)
    with pytest.raises(ConfigError):
        VolumetricParams(alpha_low=1.1)


@settings(max_examples=50, deadline=None)
@given(p1=probs, p2=probs, seed=st.integers(0, 1000))
def test_volumetric_depends_only_on_total_mass(p1, p2, seed):
    perm = np.random.default_rng(seed).permutation(p2.size)
    a = volumetric_loss(p1, p2, 1.0)[0]
    b = volumetric_loss(p1, p2.ravel()[perm].reshape(SHAPE), 1.0)[0]
    assert a == pytest.approx(b, rel=1e-9, abs=1e-15)


def test_volumetric_continuous_at_band_edges():
    p1 = _with_volume(100)
    for edge in (80.0, 120.0):
        for eps in (1e-6, -1e-6):
            p2 = _with_volume(100) * (edge + eps) / 100
            assert volumetric_loss(p1, p2, 1.0, normalize=False)[0] < 1e-9


# --- spatial ----------------------------------------------------------------


def test_spatial_examples():
    wm = np.ones((2, 2, 2))
    wm.ravel()[:3] = 0
    heads = _heads(0.0, (2, 2, 2))
    heads["p_n_t2"] = 1.0 - wm
    assert spatial_loss(heads, wm)[0] == pytest.approx(3 / 8, abs=1e-9)
    rnd = {h: np.random.default_rng(0).random((2, 2, 2)) for h in heads}
    assert spatial_loss(rnd, np.ones((2, 2, 2)))[0] == 0.0
    inside = {h: wm * 0.7 for h in heads}
    assert spatial_loss(inside, wm)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(a=binary, b=binary, wm=binary)
def test_spatial_zero_iff_support_inside_wm(a, b, wm):
    heads = {"p_a_t1": a, "p_a_t2": b, "p_n_t2": np.zeros(SHAPE), "p_v_t2": np.zeros(SHAPE)}
    inside = not ((a > 0) & (wm == 0)).any() and not ((b > 0) & (wm == 0)).any()
    assert (spatial_loss(heads, wm)[0] == 0.0) == inside


# --- supervision and curriculum ---------------------------------------------


def test_masked_supervision_gates_heads():
    y = mask(np.ones(SHAPE))
    preds = _heads(0.5)
    v, g = masked_dice_supervision(preds, LabelSet(new_t2=y))
    assert set(g) == {"p_n_t2"}
    assert v == pytest.approx(dice_loss(preds["p_n_t2"], y.data)[0])
    v4, g4 = masked_dice_supervision(preds, LabelSet(y, y, y, y))
    assert set(g4) == set(preds) and v4 == pytest.approx(4 * v)
    assert masked_dice_supervision(preds, LabelSet()) == (0.0, {})


def test_total_loss_examples():
    sched = CurriculumSchedule(100)
    c = {"long": 0.1, "vol": 0.2, "spat": 0.3}
    assert total_loss(0.4, {"long": 9.0, "vol": 9.0, "spat": 9.0}, 0, sched) == 0.4
    assert total_loss(0.4, {"long": 0.0, "vol": 0.0, "spat": 0.0}, 50, sched) == 0.4
    assert total_loss(0.4, c, 50, sched, LossWeights(5, 1, 1)) == pytest.approx(1.4, abs=1e-12)
    assert total_loss(0.4, c, 49, sched) == 0.4


@given(epoch=st.integers(0, 99), d=st.floats(0, 4), c=st.floats(0, 10))
def test_total_loss_with_zero_weights_is_dice(epoch, d, c):
    w = LossWeights(0.0, 0.0, 0.0)
    assert total_loss(d, {"long": c, "vol": c, "spat": c}, epoch, CurriculumSchedule(100), w) == d


def test_schedule_boundary_odd_epochs():
    s = CurriculumSchedule(5)
    assert [s.active(e) for e in range(5)] == [False, False, False, True, True]
    with pytest.raises(ConfigError):
        CurriculumSchedule(0)
    with pytest.raises(ConfigError):
        LossWeights(-1.0)
