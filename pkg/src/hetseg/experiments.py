"""Desk-scale experiment drivers: default configs, loss ablations, trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import LABEL_KEYS, DatasetManifest, SubjectRecord
from .losses import LossWeights
from .metrics import TrajectoryReport, dice_score, outside_wm_fraction, volume_trajectory
from .model import ModelConfig, SegNet
from .phantom import PhantomConfig, generate_multi_timepoint_subject
from .trainer import TrainConfig, all_lesion_trajectory, items_for, make_folds, predict, train_fold

DESK_PHANTOM = PhantomConfig(
    shape=(32, 32, 32),
    lesion_radius_mm=(1.5, 2.5),
    n_lesions_t1=(2, 4),
    n_new=(1, 2),
    n_vanish=(1, 1),
)
DESK_MODEL = ModelConfig(depth=3, base_width=8, patch_size=(32, 32, 32))
DESK_TRAIN = TrainConfig(n_epoch=200, folds=1, batch_size=2)

# no-constraint baseline and one run per constraint term
ABLATIONS = {
    "none": LossWeights(0.0, 0.0, 0.0),
    "spat": LossWeights(0.0, 0.0, 1.0),
    "long": LossWeights(5.0, 0.0, 0.0),
    "vol": LossWeights(0.0, 1.0, 0.0),
}
NO_LABELS = {k: False for k in LABEL_KEYS}


def ablate(weights: LossWeights, terms: Sequence[str]) -> LossWeights:
    """Zero the weight of every named constraint term."""
    names = {"long": "lambda_long", "vol": "lambda_vol", "spat": "lambda_spat"}
    return replace(weights, **{names[t]: 0.0 for t in terms})


def trajectory_series(cfg: PhantomConfig, n_subjects: int, n_timepoints: int = 4, seed: int = 7) -> list[SubjectRecord]:
    return [
        generate_multi_timepoint_subject(cfg, n_timepoints, seed * 1000 + i, subject_id=f"series-{i:03d}")
        for i in range(n_subjects)
    ]


def series_trajectories(network: SegNet, series: Sequence[SubjectRecord]) -> list[TrajectoryReport]:
    """Predicted vs true all-lesion volume over each multi-scan record."""
    out = []
    for rec in series:
        windows = predict([network], rec, NO_LABELS)
        pred = all_lesion_trajectory(windows)
        pairs = sorted(rec.labels)
        gt = [rec.labels[pairs[0]].all_t1] + [rec.labels[p].all_t2 for p in pairs]
        out.append(volume_trajectory(pred, gt))
    return out


def mean_rho(reports: Sequence[TrajectoryReport]) -> float:
    vals = [r.rho for r in reports if r.defined]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class DeskScores:
    all_dice: float
    new_dice: float
    outside_wm: float
    rho: float | None = None


def desk_scores(
    network: SegNet,
    manifests: Sequence[DatasetManifest],
    oracle: Sequence[DatasetManifest],
    series: Sequence[SubjectRecord] = (),
) -> DeskScores:
    """Held-out scores of one network on the test split of a phantom suite.

    ``all_dice`` pools every all-lesion case (both timepoints) with an oracle
    label, ``new_dice`` every new-lesion case; ``outside_wm`` is the share of
    predicted lesion voxels (all heads) outside the WM mask.
    """
    by_name = {m.name: m for m in oracle}
    all_d, new_d, preds, wms = [], [], [], []
    for m in manifests:
        o = by_name[m.name]
        for rec in m.records_in("test"):
            truth = o.record(rec.subject_id)
            for pair, pb in predict([network], rec, m.availability):
                preds += [v.data for v in pb.volumes()]
                wms += [rec.timepoints[pair[1]].wm_mask.data] * 4
                ls = truth.labels_for(pair)
                for key, head in (("all_t1", pb.p_a_t1), ("all_t2", pb.p_a_t2)):
                    gt = getattr(ls, key)
                    if gt is not None and not (key == "all_t2" and pair[0] == pair[1]):
                        all_d.append(dice_score(head, gt))
                if ls.new_t2 is not None:
                    new_d.append(dice_score(pb.p_n_t2, ls.new_t2))
    inside = np.concatenate([w.ravel() for w in wms])
    outside = outside_wm_fraction([np.concatenate([p.ravel() for p in preds])], inside)
    rho = mean_rho(series_trajectories(network, series)) if series else None
    return DeskScores(float(np.mean(all_d)), float(np.mean(new_d)), outside, rho)


def train_desk(
    manifests: Sequence[DatasetManifest],
    model_cfg: ModelConfig = DESK_MODEL,
    train_cfg: TrainConfig = DESK_TRAIN,
    seed: int | None = None,
):
    fold = make_folds(manifests, 1, train_cfg.seed)[0]
    return train_fold(items_for(manifests, fold.train), model_cfg, train_cfg, seed=seed)


def run_ablation(
    manifests: Sequence[DatasetManifest],
    oracle: Sequence[DatasetManifest],
    series: Sequence[SubjectRecord],
    seeds: Sequence[int] = (0, 1, 2),
    configs: Mapping[str, LossWeights] = ABLATIONS,
    model_cfg: ModelConfig = DESK_MODEL,
    train_cfg: TrainConfig = DESK_TRAIN,
) -> dict[str, list[DeskScores]]:
    """Train every weight configuration with every seed and score it."""
    out: dict[str, list[DeskScores]] = {}
    for label, weights in configs.items():
        cfg = replace(train_cfg, weights=weights)
        out[label] = [
            desk_scores(train_desk(manifests, model_cfg, cfg, seed=s).network, manifests, oracle, series) for s in seeds
        ]
    return out


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
