"""Central finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import losses

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-4
# denominators below this are treated as this value, so FD round-off on
# exactly-zero gradients does not count as relative error
GRAD_FLOOR = 1e-6


@dataclass(frozen=True)
class GradCheckResult:
    loss: str
    max_rel_error: float
    worst_input: str
    worst_voxel: tuple[int, ...]
    analytic: float
    numeric: float
    n_instances: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.loss}: max rel err {self.max_rel_error:.3e} over {self.n_instances} instances "
            f"(worst {self.worst_input}{list(self.worst_voxel)}: analytic {self.analytic:.6e}, "
            f"numeric {self.numeric:.6e}; tol {self.tolerance:g})"
        )


def numeric_gradient(fn: Callable, inputs: Mapping[str, np.ndarray], name: str, step: float = DEFAULT_STEP):
    """Central differences of ``fn(**inputs)[0]`` w.r.t. every voxel of ``inputs[name]``."""
    args = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    x = args[name]
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(**args)[0]
        flat[i] = orig - step
        fm = fn(**args)[0]
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def compare(analytic: np.ndarray, numeric: np.ndarray):
    """Return (max relative error, flat index) between two gradient arrays."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)
    rel = np.abs(a - n) / denom
    i = int(np.argmax(rel))
    return float(rel.reshape(-1)[i]), i


# ---------------------------------------------------------------------------
# random instances; each returns (fn(**arrays) -> (value, grads), arrays, wrt)


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _binary(rng, shape, frac=0.4):
    return (rng.random(shape) < frac).astype(np.float64)


def dice_case(rng, shape=(6, 6, 6)):
    def fn(pred, target):
        return losses.dice_loss(pred, target, smooth=1.0)

    return fn, {"pred": _probs(rng, shape), "target": _binary(rng, shape)}, ("pred",)


def longitudinal_case(rng, shape=(6, 6, 6)):
    def fn(p_n, p_v, y_a_t1, y_a_t2):
        return losses.longitudinal_loss(p_n, p_v, y_a_t1, y_a_t2)

    arrays = {
        "p_n": _probs(rng, shape),
        "p_v": _probs(rng, shape),
        "y_a_t1": _binary(rng, shape),
        "y_a_t2": _binary(rng, shape),
    }
    return fn, arrays, ("p_n", "p_v")


def volumetric_case(rng, shape=(6, 6, 6)):
    params = losses.VolumetricParams()
    interval = float(rng.uniform(0.5, 2.0))

    def fn(p_a_t1, p_a_t2):
        return losses.volumetric_loss(p_a_t1, p_a_t2, interval, params)

    p1 = _probs(rng, shape)
    # push the volume ratio clearly outside the band, away from the kinks
    factor = rng.choice([rng.uniform(0.2, 0.5), rng.uniform(1.8, 2.5)])
    p2 = np.clip(p1 * factor + rng.normal(0, 0.02, shape), 0.0, 1.0)
    return fn, {"p_a_t1": p1, "p_a_t2": p2}, ("p_a_t1", "p_a_t2")


def spatial_case(rng, shape=(6, 6, 6)):
    def fn(p_a_t1, p_a_t2, p_n_t2, p_v_t2, wm):
        preds = {"p_a_t1": p_a_t1, "p_a_t2": p_a_t2, "p_n_t2": p_n_t2, "p_v_t2": p_v_t2}
        return losses.spatial_loss(preds, wm)

    arrays = {h: _probs(rng, shape) for h in losses.HEADS}
    arrays["wm"] = _binary(rng, shape, 0.5)
    return fn, arrays, losses.HEADS


CASES = {
    "dice": dice_case,
    "long": longitudinal_case,
    "vol": volumetric_case,
    "spat": spatial_case,
}


def check_loss(
    name: str,
    n_instances: int = 20,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    case: Callable | None = None,
    shape=(6, 6, 6),
) -> GradCheckResult:
    """Finite-difference check of one loss over ``n_instances`` random inputs.

    ``case`` overrides the instance factory (used to inject faulty losses).
    """
    make = case or CASES[name]
    worst = (-1.0, "", (), 0.0, 0.0)
    for k in range(n_instances):
        rng = np.random.default_rng([seed, k])
        fn, arrays, wrt = make(rng, shape)
        _, grads = fn(**arrays)
        for arg in wrt:
            num = numeric_gradient(fn, arrays, arg, step)
            err, i = compare(grads[arg], num)
            if err > worst[0]:
                idx = tuple(int(j) for j in np.unravel_index(i, num.shape))
                worst = (err, arg, idx, float(grads[arg][idx]), float(num[idx]))
    err, arg, idx, a, n = worst
    return GradCheckResult(name, err, arg, idx, a, n, n_instances, tol)


def check_all(names=None, **kwargs) -> list[GradCheckResult]:
    return [check_loss(n, **kwargs) for n in (names or CASES)]
