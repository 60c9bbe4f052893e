"""Soft Dice, anatomical-constraint losses and the curriculum combiner.

Every loss is a pure numpy function returning ``(value, grads)`` where
``grads`` maps each prediction argument name to ``d value / d argument``
(same shape as the argument). Computation is in float64.

Squared-norm terms are divided by the voxel count when ``normalize=True``
(the default) so weights transfer across volume sizes; ``normalize=False``
gives the plain sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import LABEL_KEYS, ConfigError, ValidationError

HEADS = ("p_a_t1", "p_a_t2", "p_n_t2", "p_v_t2")
# prediction head supervised by each label
HEAD_FOR_LABEL = dict(zip(LABEL_KEYS, HEADS))
CONSTRAINTS = ("long", "vol", "spat")


@dataclass(frozen=True)
class LossWeights:
    lambda_long: float = 5.0
    lambda_vol: float = 1.0
    lambda_spat: float = 1.0

    def __post_init__(self):
        if min(self.lambda_long, self.lambda_vol, self.lambda_spat) < 0:
            raise ConfigError("loss weights must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {"long": self.lambda_long, "vol": self.lambda_vol, "spat": self.lambda_spat}


@dataclass(frozen=True)
class VolumetricParams:
    alpha_low: float = 0.8
    alpha_high: float = 1.2
    annualized: bool = True
    compound: bool = False

    def __post_init__(self):
        if not 0 < self.alpha_low < 1 < self.alpha_high:
            raise ConfigError("need 0 < alpha_low < 1 < alpha_high")

    def band(self, interval_years: float) -> tuple[float, float]:
        """Effective (low, high) ratio band for a scan interval."""
        if not self.annualized:
            return self.alpha_low, self.alpha_high
        dt = float(interval_years)
        if self.compound:
            return self.alpha_low**dt, self.alpha_high**dt
        low = max(0.0, 1.0 - (1.0 - self.alpha_low) * dt)
        return low, 1.0 + (self.alpha_high - 1.0) * dt


@dataclass(frozen=True)
class CurriculumSchedule:
    n_epoch: int
    activation_fraction: float = 0.5

    def __post_init__(self):
        if self.n_epoch < 1:
            raise ConfigError("n_epoch must be positive")
        if not 0 < self.activation_fraction <= 1:
            raise ConfigError("activation_fraction must lie in (0, 1]")

    def active(self, epoch: int) -> bool:
        """Constraints switch on once ``epoch >= fraction * n_epoch``."""
        return epoch >= self.activation_fraction * self.n_epoch


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _same_shape(**arrays):
    shapes = {k: np.shape(v) for k, v in arrays.items() if v is not None}
    if len(set(shapes.values())) > 1:
        raise ValidationError(f"shape mismatch: {shapes}")


def dice_loss(pred, target, smooth: float = 1.0):
    """``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)``; 0 for empty/empty."""
    _same_shape(pred=pred, target=target)
    p, t = _arr(pred), _arr(target)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + smooth
    if denom == 0.0:
        return 0.0, {"pred": np.zeros_like(p)}
    num = 2.0 * inter + smooth
    grad = -(2.0 * t * denom - num) / denom**2
    return 1.0 - num / denom, {"pred": grad}


def _norm_sq(a: np.ndarray) -> float:
    return float(np.dot(a.ravel(), a.ravel()))


def longitudinal_loss(
    p_n,
    p_v,
    y_a_t1=None,
    y_a_t2=None,
    *,
    literal: bool = False,
    normalize: bool = True,
):
    """Penalise new/vanishing predictions that contradict all-lesion labels.

    Terms (``y1 = y_a_t1``, ``y2 = y_a_t2``)::

        T1 = |y1 * p_n|^2        new lesions absent from the first scan
        T2 = |y2 * (p_n - 1)|^2  ... and present in the second
        T3 = |y1 * (p_v - 1)|^2  vanishing lesions present in the first scan
        T4 = |y2 * p_v|^2        ... and absent from the second

    T1/T3 need ``y_a_t1``, T2/T4 need ``y_a_t2``; a term whose label is None
    is skipped. With ``literal=True`` T2 and T3 use ``|y * p - 1|^2`` instead,
    which adds the prediction-independent count of ``y == 0`` voxels.
    """
    _same_shape(p_n=p_n, p_v=p_v, y_a_t1=y_a_t1, y_a_t2=y_a_t2)
    pn, pv = _arr(p_n), _arr(p_v)
    scale = 1.0 / pn.size if normalize else 1.0
    g_n, g_v = np.zeros_like(pn), np.zeros_like(pv)
    total = 0.0
    if y_a_t1 is not None:
        y1 = _arr(y_a_t1)
        r1 = y1 * pn
        r3 = y1 * pv - 1.0 if literal else y1 * (pv - 1.0)
        total += _norm_sq(r1) + _norm_sq(r3)
        g_n += 2.0 * y1 * r1
        g_v += 2.0 * y1 * r3
    if y_a_t2 is not None:
        y2 = _arr(y_a_t2)
        r2 = y2 * pn - 1.0 if literal else y2 * (pn - 1.0)
        r4 = y2 * pv
        total += _norm_sq(r2) + _norm_sq(r4)
        g_n += 2.0 * y2 * r2
        g_v += 2.0 * y2 * r4
    return total * scale, {"p_n": g_n * scale, "p_v": g_v * scale}


def volumetric_loss(
    p_a_t1,
    p_a_t2,
    interval_years: float,
    params: VolumetricParams = VolumetricParams(),
    *,
    spacing=(1.0, 1.0, 1.0),
    normalize: bool = True,
):
    """Squared deviation of the soft volume ratio outside the allowed band.

    ``V = sum(p) * voxel_volume`` (divided by the voxel count when
    normalized). Zero when ``interval_years == 0`` (single-scan input).
    """
    _same_shape(p_a_t1=p_a_t1, p_a_t2=p_a_t2)
    if interval_years < 0:
        raise ValidationError("interval_years must be non-negative")
    p1, p2 = _arr(p_a_t1), _arr(p_a_t2)
    zero = {"p_a_t1": np.zeros_like(p1), "p_a_t2": np.zeros_like(p2)}
    if interval_years == 0:
        return 0.0, zero
    c = float(np.prod(spacing))
    if normalize:
        c /= p1.size
    v1, v2 = p1.sum() * c, p2.sum() * c
    low, high = params.band(interval_years)
    if v2 >= high * v1:
        alpha = high
    elif v2 <= low * v1:
        alpha = low
    else:
        return 0.0, zero
    d = float(v2 - alpha * v1)
    return d * d, {
        "p_a_t1": np.full_like(p1, -2.0 * alpha * d * c),
        "p_a_t2": np.full_like(p2, 2.0 * d * c),
    }


def spatial_loss(preds: Mapping[str, np.ndarray], wm_t2, *, normalize: bool = True):
    """Sum over heads of ``|p * (1 - wm)|^2``: lesion mass outside WM."""
    _same_shape(wm=wm_t2, **dict(preds))
    outside = 1.0 - _arr(wm_t2)
    scale = 1.0 / outside.size if normalize else 1.0
    total, grads = 0.0, {}
    for name, p in preds.items():
        r = _arr(p) * outside
        total += _norm_sq(r)
        grads[name] = 2.0 * r * outside * scale
    return total * scale, grads


def masked_dice_supervision(preds: Mapping[str, np.ndarray], labels, smooth: float = 1.0):
    """Dice summed over heads whose label is present in ``labels``.

    ``labels`` is a LabelSet or a mapping from label key to mask (None or
    missing means absent). Heads without a label get no gradient entry.
    """
    items = dict(labels.items()) if hasattr(labels, "present") else {k: v for k, v in labels.items() if v is not None}
    total, grads = 0.0, {}
    for key in LABEL_KEYS:
        if key not in items:
            continue
        head = HEAD_FOR_LABEL[key]
        value, g = dice_loss(preds[head], items[key], smooth)
        total += value
        grads[head] = g["pred"]
    return total, grads


def total_loss(
    dice_terms,
    constraint_terms: Mapping[str, float],
    epoch: int,
    schedule: CurriculumSchedule,
    weights: LossWeights = LossWeights(),
):
    """Curriculum combination of Dice and weighted constraint terms.

    Before activation the Dice term is returned unchanged (constraints are
    not even added as zeros). Works on floats and on torch tensors.
    """
    if not schedule.active(epoch):
        return dice_terms
    w = weights.as_dict()
    total = dice_terms
    for key in CONSTRAINTS:
        total = total + w[key] * constraint_terms[key]
    return total
