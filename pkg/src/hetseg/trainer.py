"""Training: augmentation, curriculum-weighted composite loss, folds, ensembles.

One "epoch" is one optimisation step on a batch of randomly drawn patches.
Batches draw subjects uniformly across all training manifests, so every batch
mixes the available annotation styles.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import losses
from .assembly import InputBundle, crop_labels, extract_patch, pack_inputs, sliding_windows
from .core import ConfigError, DatasetManifest, LabelSet, NumericalError, SubjectRecord, Volume3D, write_json
from .losses import CONSTRAINTS, HEADS, CurriculumSchedule, LossWeights, VolumetricParams
from .model import ModelConfig, PredictionBundle, SegNet, build_network, load_checkpoint, save_checkpoint, sliding_inference

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "dice", "long", "vol", "spat", "total", "lr")
CHECKPOINT_MANIFEST = "checkpoints.json"


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    # (control-grid spacing in voxels, max displacement in voxels)
    elastic: tuple[float, float] = (8.0, 1.0)
    spatial_prob: float = 0.3
    brightness_add: tuple[float, float] = (-0.05, 0.05)
    brightness_mul: tuple[float, float] = (0.95, 1.05)
    noise_sigma: float = 0.01

    def __post_init__(self):
        for name in ("flip_prob", "spatial_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("brightness_add", "brightness_mul"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is not ordered")
        if self.max_rotation_deg < 0 or self.noise_sigma < 0 or self.elastic[1] < 0 or self.elastic[0] <= 0:
            raise ConfigError("augmentation magnitudes must be non-negative")

    @classmethod
    def off(cls) -> AugmentConfig:
        return cls(0.0, 0.0, (8.0, 0.0), 0.0, (0.0, 0.0), (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    n_epoch: int = 200
    batch_size: int = 2
    folds: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    vol_params: VolumetricParams = field(default_factory=VolumetricParams)
    activation_fraction: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dice_smooth: float = 1.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.n_epoch < 1 or self.batch_size < 1:
            raise ConfigError("n_epoch and batch_size must be positive")

    @property
    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.n_epoch, self.activation_fraction)


# ---------------------------------------------------------------------------
# augmentation


def _coordinate_map(shape, rng, cfg: AugmentConfig):
    """Rotation about the centre plus smooth elastic displacement, or None."""
    if cfg.spatial_prob <= 0 or rng.random() >= cfg.spatial_prob:
        return None
    if cfg.max_rotation_deg == 0 and cfg.elastic[1] == 0:
        return None
    angles = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3))
    rot = np.eye(3)
    for ax, a in enumerate(angles):
        i, j = [k for k in range(3) if k != ax]
        r = np.eye(3)
        r[i, i] = r[j, j] = math.cos(a)
        r[i, j], r[j, i] = -math.sin(a), math.sin(a)
        rot = rot @ r
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    center = (np.array(shape, dtype=np.float64) - 1) / 2
    coords = np.tensordot(rot, grid - center[:, None, None, None], axes=1) + center[:, None, None, None]
    spacing, disp = cfg.elastic
    if disp > 0:
        coarse = tuple(max(2, int(math.ceil(n / spacing)) + 1) for n in shape)
        for d in range(3):
            field_ = rng.uniform(-disp, disp, coarse)
            coords[d] += ndimage.zoom(field_, [n / c for n, c in zip(shape, coarse)], order=3)[: shape[0], : shape[1], : shape[2]]
    return coords


def _warp(arr: np.ndarray, coords, order: int) -> np.ndarray:
    return ndimage.map_coordinates(arr, coords, order=order, mode="constant", cval=0.0)


def augment(bundle: InputBundle, labels: LabelSet, cfg: AugmentConfig, seed) -> tuple[InputBundle, LabelSet]:
    """Random flips, rotation, elastic warp, brightness and noise.

    The spatial transform is shared by every channel and label (masks use
    nearest-neighbour interpolation); intensity changes touch the two image
    channels only. Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    imgs = [np.asarray(bundle.x_t1, dtype=np.float64), np.asarray(bundle.x_t2, dtype=np.float64)]
    masks = [bundle.y_a_t1_channel.data, bundle.wm_t2.data] + [v.data for _, v in labels.items()]
    keys = [k for k, _ in labels.items()]
    flips = [ax for ax in range(3) if rng.random() < cfg.flip_prob]
    if flips:
        imgs = [np.flip(a, flips) for a in imgs]
        masks = [np.flip(m, flips) for m in masks]
    coords = _coordinate_map(bundle.shape, rng, cfg)
    if coords is not None:
        imgs = [_warp(a, coords, 1) for a in imgs]
        masks = [_warp(m.astype(np.float32), coords, 0) > 0.5 for m in masks]
    lo, hi = cfg.brightness_mul
    mul = rng.uniform(lo, hi) if hi > lo else lo
    lo, hi = cfg.brightness_add
    add = rng.uniform(lo, hi) if hi > lo else lo
    if mul != 1.0 or add != 0.0:
        imgs = [a * mul + add for a in imgs]
    if cfg.noise_sigma > 0:
        imgs = [a + rng.normal(0.0, cfg.noise_sigma, a.shape) for a in imgs]
    sp = bundle.spacing
    if not flips and coords is None and mul == 1.0 and add == 0.0 and cfg.noise_sigma == 0:
        return bundle, labels
    out = InputBundle(
        Volume3D(imgs[0], sp),
        Volume3D(imgs[1], sp),
        Volume3D(np.asarray(masks[0]).astype(np.uint8), sp),
        Volume3D(np.asarray(masks[1]).astype(np.uint8), sp),
        bundle.availability,
        bundle.interval_years,
        bundle.pair,
    )
    new_labels = LabelSet(**{k: Volume3D(np.asarray(m).astype(np.uint8), sp) for k, m in zip(keys, masks[2:])})
    return out, new_labels


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[tuple[str, str], ...]
    validation: tuple[tuple[str, str], ...]


def make_folds(manifests: Sequence[DatasetManifest], k: int, seed: int = 0) -> list[Fold]:
    """Subject-level k-fold partition of training subjects, stratified per dataset."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    assignment: list[list[tuple[str, str]]] = [[] for _ in range(k)]
    everyone = []
    for ds_index, m in enumerate(manifests):
        ids = [r.subject_id for r in m.records_in("train")]
        if k > 1 and len(ids) < k:
            raise ConfigError(f"dataset {m.name} has {len(ids)} training subjects, fewer than {k} folds")
        order = np.random.default_rng([seed, ds_index]).permutation(len(ids))
        for pos, i in enumerate(order):
            assignment[pos % k].append((m.name, ids[i]))
        everyone += [(m.name, s) for s in ids]
    if k == 1:
        return [Fold(0, tuple(everyone), ())]
    folds = []
    for f in range(k):
        val = set(assignment[f])
        folds.append(Fold(f, tuple(x for x in everyone if x not in val), tuple(sorted(val))))
    return folds


# ---------------------------------------------------------------------------
# losses on torch tensors


class _NumpyLoss(torch.autograd.Function):
    """Wrap a numpy ``(value, grads)`` loss over the 4 heads of one sample."""

    @staticmethod
    def forward(ctx, probs, fn):
        arrays = probs.detach().cpu().numpy().astype(np.float64)
        value, grads = fn({h: arrays[k] for k, h in enumerate(HEADS)})
        g = np.zeros_like(arrays)
        for k, h in enumerate(HEADS):
            if h in grads:
                g[k] = grads[h]
        ctx.save_for_backward(torch.from_numpy(g))
        return torch.tensor(value, dtype=torch.float64)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return (g * grad_out).to(torch.float32), None


@dataclass
class Sample:
    dataset: str
    subject_id: str
    bundle: InputBundle
    labels: LabelSet


def sample_losses(sample: Sample, cfg: TrainConfig) -> dict:
    """Per-sample loss callables over the head dict, keyed by component."""
    b, labels = sample.bundle, sample.labels
    avail = b.availability
    y1 = labels.all_t1.data if (avail["all_t1"] and b.longitudinal and labels.all_t1 is not None) else None
    y2 = labels.all_t2.data if (avail["all_t2"] and labels.all_t2 is not None) else None
    wm = b.wm_t2.data
    sup = {k: v.data for k, v in labels.items() if avail.get(k)}

    def dice(p):
        return losses.masked_dice_supervision(p, sup, cfg.dice_smooth)

    def long(p):
        if not b.longitudinal:
            return 0.0, {}
        value, g = losses.longitudinal_loss(p["p_n_t2"], p["p_v_t2"], y1, y2)
        return value, {"p_n_t2": g["p_n"], "p_v_t2": g["p_v"]}

    def vol(p):
        return losses.volumetric_loss(p["p_a_t1"], p["p_a_t2"], b.interval_years, cfg.vol_params, spacing=b.spacing)

    def spat(p):
        return losses.spatial_loss(p, wm)

    return {"dice": dice, "long": long, "vol": vol, "spat": spat}


@dataclass
class BatchResult:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    probs: torch.Tensor
    active: bool


def batch_loss(network: SegNet, samples: Sequence[Sample], epoch: int, cfg: TrainConfig) -> BatchResult:
    """Forward a batch and combine the batch-mean loss components."""
    x = torch.from_numpy(np.stack([s.bundle.channels() for s in samples]))
    probs = network(x)
    active = cfg.schedule.active(epoch)
    comps = {name: [] for name in ("dice",) + CONSTRAINTS}
    for i, s in enumerate(samples):
        for name, fn in sample_losses(s, cfg).items():
            if name == "dice" or active:
                comps[name].append(_NumpyLoss.apply(probs[i], fn))
            else:
                # logged only; kept out of the graph before activation
                with torch.no_grad():
                    comps[name].append(_NumpyLoss.apply(probs[i].detach(), fn))
    n = float(len(samples))
    means = {k: torch.stack(v).sum() / n for k, v in comps.items()}
    total = losses.total_loss(means["dice"], means, epoch, cfg.schedule, cfg.weights)
    return BatchResult(total, means, probs, active)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingItem:
    manifest: DatasetManifest
    record: SubjectRecord


def _windows(items: Sequence[TrainingItem]):
    return [(it, sliding_windows(it.record)) for it in items]


def draw_sample(item: TrainingItem, pair, patch, rng, aug: AugmentConfig) -> Sample:
    m, rec = item.manifest, item.record
    bundle = pack_inputs(rec, pair, m.availability)
    labels = rec.labels_for(pair).restrict(m.availability)
    shape = bundle.shape
    if tuple(shape) != tuple(patch):
        origin = [int(rng.integers(0, max(n - p, 0) + 1)) for n, p in zip(shape, patch)]
        pad = any(n < p for n, p in zip(shape, patch))
        bundle = extract_patch(bundle, origin, patch, pad=pad)
        labels = crop_labels(labels, origin, patch, pad=pad)
    bundle, labels = augment(bundle, labels, aug, int(rng.integers(2**32)))
    return Sample(m.name, rec.subject_id, bundle, labels)


def set_deterministic(on: bool = True) -> None:
    torch.use_deterministic_algorithms(on)
    if on:
        torch.set_num_threads(1)


@dataclass
class TrainResult:
    network: SegNet
    log: list[dict]
    epoch: int


def train_fold(
    items: Sequence[TrainingItem],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    seed: int | None = None,
    checkpoint: str | Path | None = None,
    loss_log: str | Path | None = None,
) -> TrainResult:
    """Train one network on ``items`` with Adam and the curriculum loss.

    Raises NumericalError naming the component when a loss turns non-finite.
    """
    if not items:
        raise ConfigError("no training subjects")
    seed = cfg.seed if seed is None else seed
    if cfg.deterministic:
        set_deterministic(True)
    network = build_network(model_cfg, seed)
    network.train()
    opt = torch.optim.Adam(network.parameters(), lr=cfg.learning_rate)
    windows = _windows(items)
    rows = []
    for epoch in range(cfg.n_epoch):
        rng = np.random.default_rng([seed, epoch])
        batch = []
        for _ in range(cfg.batch_size):
            item, pairs = windows[int(rng.integers(len(windows)))]
            pair = pairs[int(rng.integers(len(pairs)))]
            batch.append(draw_sample(item, pair, model_cfg.patch_size, rng, cfg.augment))
        res = batch_loss(network, batch, epoch, cfg)
        values = {k: float(v.detach()) for k, v in res.components.items()}
        for name, v in list(values.items()) + [("total", float(res.total.detach()))]:
            if not math.isfinite(v):
                raise NumericalError(f"epoch {epoch}: non-finite {name} loss ({v})")
        opt.zero_grad()
        res.total.backward()
        opt.step()
        rows.append({"epoch": epoch, **values, "total": float(res.total.detach()), "lr": opt.param_groups[0]["lr"]})
        if epoch % 50 == 0:
            log.debug("epoch %d total %.4f", epoch, rows[-1]["total"])
    network.eval()
    if checkpoint is not None:
        save_checkpoint(checkpoint, network, seed, cfg.n_epoch)
    if loss_log is not None:
        write_loss_log(rows, loss_log)
    return TrainResult(network, rows, cfg.n_epoch)


def write_loss_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {c: (int(row[c]) if c == "epoch" else float(row[c])) for c in LOG_COLUMNS}
            for row in csv.DictReader(fh)
        ]


def items_for(manifests: Sequence[DatasetManifest], keys) -> list[TrainingItem]:
    by_name = {m.name: m for m in manifests}
    return [TrainingItem(by_name[d], by_name[d].record(s)) for d, s in keys]


def train_ensemble(
    manifests: Sequence[DatasetManifest],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
) -> list[Path]:
    """Train one model per fold and write ``checkpoints.json`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = make_folds(manifests, cfg.folds, cfg.seed)
    members, paths = [], []
    for fold in folds:
        fdir = out / f"fold{fold.index}"
        fdir.mkdir(exist_ok=True)
        seed = cfg.seed * 1000 + fold.index
        log.info("training fold %d on %d subjects", fold.index, len(fold.train))
        train_fold(
            items_for(manifests, fold.train),
            model_cfg,
            cfg,
            seed=seed,
            checkpoint=fdir / "model.pt",
            loss_log=fdir / "loss_log.csv",
        )
        paths.append(fdir / "model.pt")
        members.append(
            {
                "fold": fold.index,
                "path": f"fold{fold.index}/model.pt",
                "loss_log": f"fold{fold.index}/loss_log.csv",
                "seed": seed,
                "validation": [list(v) for v in fold.validation],
            }
        )
    write_json(
        {
            "members": members,
            "model_config": asdict(model_cfg),
            "train_config": asdict(cfg),
            "datasets": [m.name for m in manifests],
        },
        out / CHECKPOINT_MANIFEST,
    )
    return paths


def load_ensemble(path) -> tuple[list[SegNet], dict]:
    """Load every member listed in a checkpoint manifest (file or directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_MANIFEST
    doc = json.loads(path.read_text())
    nets = [load_checkpoint(path.parent / m["path"])[0] for m in doc["members"]]
    return nets, doc


def predict(
    checkpoints,
    record: SubjectRecord,
    availability: dict[str, bool],
    overlap: float = 0.5,
) -> list[tuple[tuple[int, int], PredictionBundle]]:
    """Ensemble (voxelwise mean) prediction for every sliding window of ``record``."""
    nets = [load_checkpoint(c)[0] if isinstance(c, (str, Path)) else c for c in checkpoints]
    if not nets:
        raise ConfigError("no checkpoints given")
    out = []
    for pair in sliding_windows(record):
        bundle = pack_inputs(record, pair, availability)
        preds = [sliding_inference(n, bundle, overlap=overlap, pad=True) for n in nets]
        out.append((pair, preds[0] if len(preds) == 1 else PredictionBundle.mean(preds)))
    return out


def all_lesion_trajectory(windows: Sequence[tuple[tuple[int, int], PredictionBundle]]) -> list[Volume3D]:
    """First window's ``p_a_t1`` followed by ``p_a_t2`` of every window."""
    if not windows:
        return []
    series = [windows[0][1].p_a_t1]
    for pair, b in windows:
        if pair[0] != pair[1]:
            series.append(b.p_a_t2)
    return series
