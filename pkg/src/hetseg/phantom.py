"""Synthetic longitudinal lesion phantoms.

A phantom is a smooth ellipsoidal "brain" with a white-matter (WM) interior.
Lesions are hyperintense blobs (spheres with a low-order radial perturbation)
placed strictly inside WM and kept apart from each other so every lesion is its
own connected component. A second timepoint is derived from the first by
removing some lesions (vanishing), rescaling the rest and adding new ones, with
the total lesion volume ratio held inside the configured band.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    LABEL_KEYS,
    ConfigError,
    DatasetManifest,
    HetsegError,
    LabelSet,
    SubjectRecord,
    Timepoint,
    Volume3D,
    manifest_document,
    load_manifest,
    write_json,
    write_volume,
)

log = logging.getLogger(__name__)


class PlacementError(HetsegError, RuntimeError):
    """Lesions could not be placed inside WM within the retry budget."""


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_lesions_t1: tuple[int, int] = (3, 6)
    n_new: tuple[int, int] = (1, 3)
    n_vanish: tuple[int, int] = (1, 2)
    lesion_radius_mm: tuple[float, float] = (2.0, 3.5)
    volume_change_band: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.04
    # background, WM, GM, lesion
    intensity_levels: tuple[float, float, float, float] = (0.0, 0.35, 0.6, 1.0)
    interval_years: float = 1.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("n_lesions_t1", "n_new", "n_vanish", "lesion_radius_mm", "volume_change_band"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: range ({lo}, {hi}) is not ordered")
        if self.n_lesions_t1[0] < 1:
            raise ConfigError("n_lesions_t1 must allow at least one lesion")
        if self.n_vanish[0] < 0 or self.n_new[0] < 0:
            raise ConfigError("lesion counts must be non-negative")
        if self.n_vanish[0] > self.n_lesions_t1[1]:
            raise ConfigError("n_vanish cannot exceed n_lesions_t1")
        if self.lesion_radius_mm[0] < max(self.spacing):
            raise ConfigError("lesion radius must be at least one voxel")
        lo, hi = self.volume_change_band
        if not lo < 1.0 < hi:
            raise ConfigError("volume_change_band must satisfy low < 1 < high")
        if self.noise_sigma < 0 or self.interval_years <= 0:
            raise ConfigError("noise_sigma must be >= 0 and interval_years > 0")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigError("phantom shape must be 3D with sides >= 8")

    @property
    def symmetric_band(self) -> tuple[float, float]:
        """Ratio band that also holds after swapping the two timepoints."""
        lo, hi = self.volume_change_band
        return max(lo, 1.0 / hi), min(hi, 1.0 / lo)


# Low-order radial perturbation amplitude; lesions stay star-shaped.
_MAX_PERTURB = 0.12
_SCALE_JITTER = (0.9, 1.1)
_GAP_MM = 2.0


@dataclass
class Lesion:
    center: np.ndarray  # mm
    radius: float  # mm
    directions: np.ndarray = field(repr=False)
    amplitudes: np.ndarray = field(repr=False)
    slot: float = 0.0  # reserved radius in mm

    @property
    def extent(self) -> float:
        return self.radius * (1.0 + float(np.abs(self.amplitudes).sum()))

    def scaled(self, s: float) -> Lesion:
        return replace(self, radius=self.radius * s)


def _grid_mm(shape, spacing):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(shape, spacing)]


def _rasterize(lesion: Lesion, shape, spacing) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    ext = lesion.extent
    lo = [max(0, int(np.floor((c - ext) / s))) for c, s in zip(lesion.center, spacing)]
    hi = [min(n, int(np.ceil((c + ext) / s)) + 1) for c, s, n in zip(lesion.center, spacing, shape)]
    if any(h <= l for l, h in zip(lo, hi)):
        return out
    axes = [np.arange(l, h) * s - c for l, h, s, c in zip(lo, hi, spacing, lesion.center)]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(dx**2 + dy**2 + dz**2)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.stack([dx, dy, dz], axis=-1) / r[..., None]
    u = np.nan_to_num(u)
    cos = u @ lesion.directions.T
    # second Legendre polynomial: zero mean over the sphere
    bump = (0.5 * (3 * cos**2 - 1)) @ lesion.amplitudes
    inside = r <= lesion.radius * (1.0 + bump)
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = inside
    return out


def _ellipsoid(shape, spacing, center, axes, rng=None, amp=0.0) -> np.ndarray:
    gx, gy, gz = np.meshgrid(*_grid_mm(shape, spacing), indexing="ij")
    q = ((gx - center[0]) / axes[0]) ** 2 + ((gy - center[1]) / axes[1]) ** 2 + ((gz - center[2]) / axes[2]) ** 2
    if rng is not None and amp > 0:
        d = rng.normal(size=(3, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        a = rng.uniform(-amp, amp, size=3)
        r = np.sqrt(q) + 1e-12
        u = np.stack([(gx - center[0]) / axes[0], (gy - center[1]) / axes[1], (gz - center[2]) / axes[2]], -1) / r[..., None]
        bump = (0.5 * (3 * (u @ d.T) ** 2 - 1)) @ a
        return np.sqrt(q) <= 1.0 + bump
    return q <= 1.0


class _Anatomy:
    def __init__(self, cfg: PhantomConfig, rng: np.random.Generator):
        shape, spacing = cfg.shape, cfg.spacing
        size = np.array(shape) * np.array(spacing)
        center = size / 2.0 + rng.uniform(-0.02, 0.02, 3) * size
        brain_axes = size * 0.44 * rng.uniform(0.95, 1.0, 3)
        wm_axes = brain_axes * rng.uniform(0.74, 0.8, 3)
        self.brain = _ellipsoid(shape, spacing, center, brain_axes)
        self.wm = _ellipsoid(shape, spacing, center, wm_axes, rng, amp=0.06) & self.brain
        self.depth = ndimage.distance_transform_edt(self.wm, sampling=spacing)
        self.shape, self.spacing = shape, spacing
        self.candidates = np.argwhere(self.wm) * np.array(spacing)

    def render(self, cfg: PhantomConfig, lesions: np.ndarray) -> np.ndarray:
        bg, wm_level, gm_level, les_level = cfg.intensity_levels
        tissue = np.full(self.shape, bg, dtype=np.float64)
        tissue[self.brain] = gm_level
        tissue[self.wm] = wm_level
        sigma = [0.8 / s for s in self.spacing]
        tissue = ndimage.gaussian_filter(tissue, sigma)
        weight = ndimage.gaussian_filter(lesions.astype(np.float64), [0.4 / s for s in self.spacing])
        weight = np.maximum(weight, lesions)
        return tissue * (1 - weight) + les_level * weight


def _new_lesion(cfg: PhantomConfig, anat: _Anatomy, rng, radius: float, occupied: list[Lesion]) -> Lesion:
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    amps = rng.uniform(-_MAX_PERTURB, _MAX_PERTURB, 3)
    # room for the largest radius a persisting lesion can grow to
    slot = cfg.lesion_radius_mm[1] * _SCALE_JITTER[1] * (1 + float(np.abs(amps).sum()))
    need = slot
    ok = anat.depth[tuple((anat.candidates / np.array(anat.spacing)).astype(int).T)] >= need
    cand = anat.candidates[ok]
    if len(cand) == 0:
        raise PlacementError("white matter too small for the configured lesion radius")
    for _ in range(cfg.max_retries):
        c = cand[rng.integers(len(cand))] + rng.uniform(-0.5, 0.5, 3) * np.array(anat.spacing)
        if all(np.linalg.norm(c - o.center) >= slot + o.slot + _GAP_MM for o in occupied):
            return Lesion(c, radius, d, amps, slot)
    raise PlacementError(f"could not place lesion after {cfg.max_retries} attempts")


def _union(lesions: list[Lesion], shape, spacing) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for les in lesions:
        out |= _rasterize(les, shape, spacing)
    return out


def _sample_count(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _evolve(cfg: PhantomConfig, anat: _Anatomy, rng, lesions: list[Lesion]):
    """One timepoint step: returns (vanished, persisting, new) lesion lists."""
    shape, spacing = cfg.shape, cfg.spacing
    t1_mask = _union(lesions, shape, spacing) & anat.wm
    v1 = int(t1_mask.sum())
    band = cfg.symmetric_band
    target_lo, target_hi = band[0] + 0.02, band[1] - 0.02
    r_lo, r_hi = cfg.lesion_radius_mm
    for _ in range(cfg.max_retries):
        nv = min(_sample_count(rng, cfg.n_vanish), len(lesions))
        order = rng.permutation(len(lesions))
        vanished = [lesions[i] for i in sorted(order[:nv])]
        kept = [lesions[i] for i in sorted(order[nv:])]
        persisting = []
        for les in kept:
            s = rng.uniform(*_SCALE_JITTER)
            radius = float(np.clip(les.radius * s, r_lo, r_hi * _SCALE_JITTER[1]))
            persisting.append(replace(les, radius=radius))
        vp = int((_union(persisting, shape, spacing) & anat.wm).sum())
        nn = _sample_count(rng, cfg.n_new)
        target = rng.uniform(target_lo, target_hi) * v1
        need = target - vp
        if nn == 0:
            new = []
        else:
            if need <= 0:
                continue
            per = need / nn
            radius = (3.0 * per * float(np.prod(spacing)) / (4.0 * np.pi)) ** (1.0 / 3.0)
            if not r_lo <= radius <= r_hi:
                continue
            new, occupied = [], list(lesions)
            try:
                for _ in range(nn):
                    les = _new_lesion(cfg, anat, rng, radius, occupied)
                    new.append(les)
                    occupied.append(les)
            except PlacementError:
                continue
        t2_mask = _union(persisting + new, shape, spacing) & anat.wm
        ratio = t2_mask.sum() / v1
        if band[0] <= ratio <= band[1]:
            return vanished, persisting, new
    raise PlacementError(
        f"could not satisfy volume band {cfg.volume_change_band} after {cfg.max_retries} attempts"
    )


def _initial_lesions(cfg, anat, rng) -> list[Lesion]:
    n = _sample_count(rng, cfg.n_lesions_t1)
    out: list[Lesion] = []
    for _ in range(n):
        out.append(_new_lesion(cfg, anat, rng, rng.uniform(*cfg.lesion_radius_mm), out))
    return out


def _masks(cfg, anat, lesions):
    return _union(lesions, cfg.shape, cfg.spacing) & anat.wm


_LAYOUT_ATTEMPTS = 10


def _lesion_history(cfg, anat, rng, n_timepoints):
    last = None
    for _ in range(_LAYOUT_ATTEMPTS):
        try:
            states = [_initial_lesions(cfg, anat, rng)]
            steps = []
            for _ in range(n_timepoints - 1):
                vanished, persisting, new = _evolve(cfg, anat, rng, states[-1])
                steps.append((vanished, new))
                states.append(persisting + new)
            return states, steps
        except PlacementError as exc:
            last = exc
    raise PlacementError(f"lesion layout failed {_LAYOUT_ATTEMPTS} times: {last}")


def _series(cfg: PhantomConfig, n_timepoints: int, rng):
    anat = _Anatomy(cfg, rng)
    states, steps = _lesion_history(cfg, anat, rng, n_timepoints)
    all_masks = [_masks(cfg, anat, s) for s in states]
    wm = Volume3D(anat.wm, cfg.spacing)
    timepoints = []
    for k, m in enumerate(all_masks):
        img = anat.render(cfg, m)
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        timepoints.append(Timepoint(Volume3D(img, cfg.spacing), wm, k * cfg.interval_years))
    labels = {}
    for k, (vanished, new) in enumerate(steps):
        a1, a2 = all_masks[k], all_masks[k + 1]
        labels[(k, k + 1)] = LabelSet(
            all_t1=Volume3D(a1, cfg.spacing),
            all_t2=Volume3D(a2, cfg.spacing),
            new_t2=Volume3D(_masks(cfg, anat, new), cfg.spacing),
            vanish_t2=Volume3D(_masks(cfg, anat, vanished), cfg.spacing),
        )
    return timepoints, labels


def generate_subject(cfg: PhantomConfig, subject_seed: int, subject_id: str | None = None) -> SubjectRecord:
    """Two-timepoint phantom with the full ground-truth label set.

    The result depends only on ``(cfg, subject_seed)``.
    """
    rng = np.random.default_rng([cfg.seed, subject_seed])
    timepoints, labels = _series(cfg, 2, rng)
    return SubjectRecord(subject_id or f"subject-{subject_seed:05d}", timepoints, labels)


def generate_multi_timepoint_subject(
    cfg: PhantomConfig, n_timepoints: int, seed: int, subject_id: str | None = None
) -> SubjectRecord:
    """Chained evolution over ``n_timepoints`` scans, labels for each consecutive pair."""
    if n_timepoints < 3:
        raise ConfigError("multi-timepoint phantoms need at least 3 timepoints")
    rng = np.random.default_rng([cfg.seed, seed, n_timepoints])
    timepoints, labels = _series(cfg, n_timepoints, rng)
    return SubjectRecord(subject_id or f"series-{seed:05d}", timepoints, labels)


def invert_timepoints(record: SubjectRecord) -> SubjectRecord:
    """Swap the two scans so new lesions become vanishing ones."""
    if len(record.timepoints) != 2:
        raise ConfigError("only two-timepoint records can be inverted")
    t1, t2 = record.timepoints
    ls = record.labels[(0, 1)]
    swapped = (
        Timepoint(t2.image, t2.wm_mask, t1.offset_years),
        Timepoint(t1.image, t1.wm_mask, t2.offset_years),
    )
    labels = {
        (0, 1): LabelSet(all_t1=ls.all_t2, all_t2=ls.all_t1, new_t2=ls.vanish_t2, vanish_t2=ls.new_t2)
    }
    return SubjectRecord(record.subject_id, swapped, labels)


def _flags(*keys) -> dict[str, bool]:
    return {k: k in keys for k in LABEL_KEYS}


# name, format, exposed labels, oracle labels; the vanishing set is derived
# by relabelling, so it carries no all-lesion ground truth.
SUITE = (
    ("PH-2015", "longitudinal", _flags("all_t1", "all_t2"), _flags(*LABEL_KEYS)),
    ("PH-2016", "cross_sectional", _flags("all_t1"), _flags("all_t1")),
    ("PH-SEG2", "longitudinal", _flags("new_t2"), _flags(*LABEL_KEYS)),
    ("PH-SEG2+", "longitudinal", _flags("all_t1", "new_t2"), _flags(*LABEL_KEYS)),
    ("PH-VAN", "longitudinal", _flags("vanish_t2"), _flags("vanish_t2")),
)
ORACLE_DIR = "oracle"
SUITE_INDEX = "suite.json"


def _dataset_records(name: str, fmt: str, cfg: PhantomConfig, ds_index: int, n: int) -> list[SubjectRecord]:
    out = []
    for i in range(n):
        sid = f"{name.lower().replace('+', 'plus')}-{i:03d}"
        rec = generate_subject(cfg, ds_index * 100_000 + i, sid)
        if name == "PH-VAN":
            rec = invert_timepoints(rec)
        if fmt == "cross_sectional":
            t1 = rec.timepoints[0]
            ls = rec.labels[(0, 1)]
            rec = SubjectRecord(sid, (Timepoint(t1.image, t1.wm_mask, 0.0),), {(0, 0): LabelSet(all_t1=ls.all_t1)})
        out.append(rec)
    return out


def write_record(
    rec: SubjectRecord,
    out_root: Path,
    data_dir: Path,
    label_dir: Path,
    labels_keep: dict[str, bool],
    split: str,
    write_images: bool = True,
) -> dict:
    """Write one record's volumes and return its manifest entry.

    Images and WM masks go to ``data_dir``, labels to ``label_dir``; paths in
    the entry are relative to ``out_root`` (the manifest's directory).
    """
    if write_images:
        data_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)

    def rel(p: Path) -> str:
        return Path(_relpath(p, out_root)).as_posix()

    tps = []
    for k, tp in enumerate(rec.timepoints):
        img = data_dir / f"t{k}_image.nii"
        if write_images:
            write_volume(tp.image, img)
        entry = {"image": rel(img), "offset_years": tp.offset_years}
        if tp.wm_mask is not None:
            wm = data_dir / f"t{k}_wm.nii"
            if write_images:
                write_volume(tp.wm_mask, wm)
            entry["wm_mask"] = rel(wm)
        tps.append(entry)
    labels = []
    for (i, j), ls in sorted(rec.labels.items()):
        entry = {"pair": [i, j]}
        for key, v in ls.restrict(labels_keep).items():
            p = label_dir / f"pair{i}-{j}_{key}.nii"
            write_volume(v, p)
            entry[key] = rel(p)
        labels.append(entry)
    return {"subject_id": rec.subject_id, "split": split, "timepoints": tps, "labels": labels}


def _relpath(p: Path, start: Path) -> str:
    return os.path.relpath(p, start)


def generate_suite(
    cfg: PhantomConfig,
    n_subjects_per_dataset: int,
    out_dir,
    test_fraction: float = 0.3,
) -> list[DatasetManifest]:
    """Write the five heterogeneous phantom datasets plus hidden oracle labels.

    Layout::

        out_dir/suite.json
        out_dir/<NAME>/manifest.json, out_dir/<NAME>/<subject>/...
        out_dir/oracle/<NAME>/manifest.json, labels under oracle/<NAME>/<subject>/

    The last ``round(test_fraction * n)`` subjects of each dataset form the
    test split.
    """
    if n_subjects_per_dataset < 1:
        raise ConfigError("need at least one subject per dataset")
    out = Path(out_dir)
    n_test = int(round(test_fraction * n_subjects_per_dataset))
    index = {"datasets": []}
    manifests = []
    for ds_index, (name, fmt, exposed, oracle) in enumerate(SUITE):
        records = _dataset_records(name, fmt, cfg, ds_index, n_subjects_per_dataset)
        ds_dir = out / name
        or_dir = out / ORACLE_DIR / name
        train_entries, oracle_entries = [], []
        for i, rec in enumerate(records):
            split = "test" if i >= n_subjects_per_dataset - n_test else "train"
            train_entries.append(write_record(rec, ds_dir, ds_dir / rec.subject_id, ds_dir / rec.subject_id, exposed, split))
            oracle_entries.append(
                write_record(rec, or_dir, ds_dir / rec.subject_id, or_dir / rec.subject_id, oracle, split, write_images=False)
            )
        write_json(manifest_document(name, fmt, exposed, train_entries), ds_dir / "manifest.json")
        write_json(manifest_document(name, fmt, oracle, oracle_entries), or_dir / "manifest.json")
        index["datasets"].append(
            {
                "name": name,
                "manifest": f"{name}/manifest.json",
                "oracle": f"{ORACLE_DIR}/{name}/manifest.json",
            }
        )
        manifests.append(load_manifest(ds_dir / "manifest.json"))
        log.info("wrote %s: %d subjects (%d test)", name, len(records), n_test)
    write_json(index, out / SUITE_INDEX)
    return manifests


def load_suite(out_dir, oracle: bool = False) -> list[DatasetManifest]:
    """Load the training (or oracle) manifests listed in ``suite.json``."""
    out = Path(out_dir)
    index = json.loads((out / SUITE_INDEX).read_text())
    key = "oracle" if oracle else "manifest"
    return [load_manifest(out / d[key]) for d in index["datasets"]]
