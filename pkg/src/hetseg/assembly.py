"""Packing heterogeneous records into the fixed 4-channel network input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LABEL_KEYS, HetsegError, LabelSet, SubjectRecord, ValidationError, Volume3D

# Fixed channel order of the network input.
CHANNELS = ("x_t1", "x_t2", "y_a_t1", "wm_t2")


class AssemblyError(HetsegError, ValueError):
    """A required input channel is unavailable."""


class RangeError(HetsegError, IndexError):
    pass


@dataclass(frozen=True)
class InputBundle:
    x_t1: Volume3D
    x_t2: Volume3D
    y_a_t1_channel: Volume3D
    wm_t2: Volume3D
    availability: dict[str, bool]
    interval_years: float
    pair: tuple[int, int] = (0, 1)

    def __post_init__(self):
        ref = self.x_t1
        for v in (self.x_t2, self.y_a_t1_channel, self.wm_t2):
            if not v.same_grid(ref):
                raise ValidationError("input channels must share shape and spacing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.x_t1.shape

    @property
    def spacing(self):
        return self.x_t1.spacing

    @property
    def longitudinal(self) -> bool:
        return self.pair[0] != self.pair[1]

    def volumes(self) -> tuple[Volume3D, Volume3D, Volume3D, Volume3D]:
        return (self.x_t1, self.x_t2, self.y_a_t1_channel, self.wm_t2)

    def channels(self) -> np.ndarray:
        """Stacked ``(4, *shape)`` float32 array in ``CHANNELS`` order."""
        return np.stack([np.asarray(v, dtype=np.float32) for v in self.volumes()])

    def replace_channels(self, x_t1=None, x_t2=None, y_a_t1=None, wm_t2=None) -> InputBundle:
        sp = self.spacing
        return InputBundle(
            Volume3D(x_t1, sp) if x_t1 is not None else self.x_t1,
            Volume3D(x_t2, sp) if x_t2 is not None else self.x_t2,
            Volume3D(y_a_t1, sp) if y_a_t1 is not None else self.y_a_t1_channel,
            Volume3D(wm_t2, sp) if wm_t2 is not None else self.wm_t2,
            self.availability,
            self.interval_years,
            self.pair,
        )


def sliding_windows(record: SubjectRecord) -> list[tuple[int, int]]:
    """Width-2, stride-1 windows; a single scan yields the degenerate (0, 0)."""
    n = len(record.timepoints)
    if n == 1:
        return [(0, 0)]
    return [(i, i + 1) for i in range(n - 1)]


def pack_inputs(record: SubjectRecord, pair, availability: dict[str, bool]) -> InputBundle:
    """Build the network input for timepoints ``pair`` of ``record``.

    A missing second scan is replaced by the first (``pair = (i, i)``) and a
    missing first-timepoint all-lesion label by zeros.
    """
    i, j = (int(p) for p in pair)
    n = len(record.timepoints)
    if not (0 <= i < n and 0 <= j < n) or j < i:
        raise ValidationError(f"{record.subject_id}: invalid timepoint pair {pair}")
    t1, t2 = record.timepoints[i], record.timepoints[j]
    if t2.wm_mask is None:
        raise AssemblyError(f"{record.subject_id}: timepoint {j} has no WM mask")
    labels = record.labels_for((i, j))
    y = labels.all_t1 if availability.get("all_t1") else None
    if y is None:
        y = Volume3D(np.zeros(t1.image.shape, dtype=np.uint8), t1.image.spacing)
    interval = 0.0 if i == j else t2.offset_years - t1.offset_years
    return InputBundle(
        x_t1=t1.image,
        x_t2=t2.image,
        y_a_t1_channel=y,
        wm_t2=t2.wm_mask,
        availability={k: bool(availability.get(k, False)) for k in LABEL_KEYS},
        interval_years=float(interval),
        pair=(i, j),
    )


def crop(v: Volume3D, origin, size, pad: bool = False) -> Volume3D:
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    shape = v.shape
    inside = all(o >= 0 and o + s <= n for o, s, n in zip(origin, size, shape))
    if not inside and not pad:
        raise RangeError(f"patch at {origin} of size {size} exceeds volume {shape}")
    out = np.zeros(size, dtype=v.data.dtype)
    src = tuple(slice(max(o, 0), min(o + s, n)) for o, s, n in zip(origin, size, shape))
    dst = tuple(slice(sl.start - o, sl.stop - o) for sl, o in zip(src, origin))
    if all(sl.stop > sl.start for sl in src):
        out[dst] = v.data[src]
    return Volume3D(out, v.spacing)


def extract_patch(bundle: InputBundle, origin, size, pad: bool = False) -> InputBundle:
    """Crop all four channels identically; zero-fill outside when ``pad``."""
    vols = [crop(v, origin, size, pad) for v in bundle.volumes()]
    return InputBundle(*vols, bundle.availability, bundle.interval_years, bundle.pair)


def crop_labels(labels: LabelSet, origin, size, pad: bool = False) -> LabelSet:
    return LabelSet(**{k: crop(v, origin, size, pad) for k, v in labels.items()})
