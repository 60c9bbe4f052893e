from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import ndimage

from hetseg import losses, trainer
from hetseg.assembly import pack_inputs
from hetseg.core import ConfigError, LabelSet, NumericalError, Volume3D, mask
from hetseg.losses import LossWeights
from hetseg.model import ModelConfig, PredictionBundle, build_network
from hetseg.trainer import (
    AugmentConfig,
    Sample,
    TrainConfig,
    augment,
    batch_loss,
    items_for,
    load_ensemble,
    make_folds,
    predict,
    read_loss_log,
    train_ensemble,
    train_fold,
)

TINY = ModelConfig(depth=2, base_width=4, patch_size=(16, 16, 16))
QUICK = TrainConfig(n_epoch=4, batch_size=2, folds=1, augment=AugmentConfig.off())


def _bundle_and_labels(seed=0, shape=(12, 12, 12)):
    rng = np.random.default_rng(seed)
    les = np.zeros(shape, bool)
    les[3:6, 2:5, 4:8] = True
    les[8:10, 8:11, 1:3] = True
    rec_avail = {"all_t1": True, "all_t2": True, "new_t2": False, "vanish_t2": False}
    from hetseg.assembly import InputBundle

    b = InputBundle(
        Volume3D(rng.random(shape).astype(np.float32)),
        Volume3D(rng.random(shape).astype(np.float32)),
        mask(les),
        mask(np.ones(shape)),
        rec_avail,
        1.0,
    )
    return b, LabelSet(all_t1=mask(les), all_t2=mask(les))


# --- augmentation -----------------------------------------------------------


def test_augment_off_is_identity():
    b, ls = _bundle_and_labels()
    out, ols = augment(b, ls, AugmentConfig.off(), seed=3)
    assert all(x.equals(y) for x, y in zip(out.volumes(), b.volumes()))
    assert ols.all_t1.equals(ls.all_t1)


def test_flip_is_shared_between_images_and_labels():
    b, ls = _bundle_and_labels()
    cfg = replace(AugmentConfig.off(), flip_prob=1.0)
    out, ols = augment(b, ls, cfg, seed=0)
    flipped = np.flip(b.x_t1.data, (0, 1, 2))
    np.testing.assert_array_equal(out.x_t1.data, flipped)
    np.testing.assert_array_equal(ols.all_t1.data, np.flip(ls.all_t1.data, (0, 1, 2)))
    np.testing.assert_array_equal(out.y_a_t1_channel.data, ols.all_t1.data)
    s = ndimage.generate_binary_structure(3, 3)
    assert ndimage.label(ols.all_t1.data, s)[1] == ndimage.label(ls.all_t1.data, s)[1]


def test_intensity_ops_leave_masks_untouched():
    b, ls = _bundle_and_labels()
    cfg = replace(AugmentConfig.off(), brightness_add=(-0.1, 0.1), brightness_mul=(0.9, 1.1), noise_sigma=0.05)
    out, ols = augment(b, ls, cfg, seed=1)
    assert out.wm_t2.equals(b.wm_t2) and out.y_a_t1_channel.equals(b.y_a_t1_channel)
    assert ols.all_t2.equals(ls.all_t2)
    assert not np.array_equal(out.x_t1.data, b.x_t1.data)


def test_spatial_augmentation_keeps_masks_binary_and_aligned():
    b, ls = _bundle_and_labels()
    cfg = replace(AugmentConfig(), spatial_prob=1.0, max_rotation_deg=15.0)
    out, ols = augment(b, ls, cfg, seed=4)
    assert set(np.unique(ols.all_t1.data)) <= {0, 1}
    np.testing.assert_array_equal(out.y_a_t1_channel.data, ols.all_t1.data)
    again, _ = augment(b, ls, cfg, seed=4)
    assert again.x_t2.equals(out.x_t2)


def test_invalid_augment_config():
    with pytest.raises(ConfigError):
        AugmentConfig(flip_prob=1.5)
    with pytest.raises(ConfigError):
        AugmentConfig(brightness_mul=(1.1, 0.9))


# --- folds ------------------------------------------------------------------


def test_folds_partition_subjects(small_suite):
    _, manifests, _ = small_suite
    folds = make_folds(manifests, 2, seed=0)
    everyone = {(m.name, r.subject_id) for m in manifests for r in m.records_in("train")}
    vals = [set(f.validation) for f in folds]
    assert set().union(*vals) == everyone
    assert sum(len(v) for v in vals) == len(everyone)
    for f in folds:
        assert not set(f.train) & set(f.validation)
        assert set(f.train) | set(f.validation) == everyone
    assert make_folds(manifests, 2, seed=0) == folds
    with pytest.raises(ConfigError):
        make_folds(manifests, 3)
    assert make_folds(manifests, 1)[0].validation == ()


def test_ten_subjects_five_folds():
    from hetseg.core import DatasetManifest, SubjectRecord, Timepoint

    img = Volume3D(np.zeros((2, 2, 2)))
    recs = [SubjectRecord(f"s{i}", (Timepoint(img),)) for i in range(10)]
    avail = dict.fromkeys(("all_t1", "all_t2", "new_t2", "vanish_t2"), False)
    m = DatasetManifest("D", "cross_sectional", avail, recs, {r.subject_id: "train" for r in recs})
    folds = make_folds([m], 5, seed=1)
    assert [len(f.validation) for f in folds] == [2] * 5


# --- losses and masking -----------------------------------------------------


def _suite_samples(manifests):
    out = []
    for m in manifests:
        rec = m.records_in("train")[0]
        pair = trainer.sliding_windows(rec)[0]
        labels = rec.labels_for(pair).restrict(m.availability)
        bundle = trainer.extract_patch(pack_inputs(rec, pair, m.availability), (8, 8, 8), (16, 16, 16))
        out.append(Sample(m.name, rec.subject_id, bundle, trainer.crop_labels(labels, (8, 8, 8), (16, 16, 16))))
    return out


HEAD_FOR = dict(zip(("all_t1", "all_t2", "new_t2", "vanish_t2"), range(4)))


def test_supervision_masking_matches_availability(small_suite):
    _, manifests, _ = small_suite
    net = build_network(TINY, 0)
    cfg = replace(QUICK, weights=LossWeights(0.0, 0.0, 0.0))
    for m, s in zip(manifests, _suite_samples(manifests)):
        res = batch_loss(net, [s], epoch=3, cfg=cfg)
        res.probs.retain_grad()
        res.total.backward()
        g = res.probs.grad[0]
        for key, k in HEAD_FOR.items():
            nonzero = bool(torch.count_nonzero(g[k]))
            assert nonzero == m.availability[key], (m.name, key)


def test_curriculum_keeps_constraints_out_of_the_graph(small_suite):
    _, manifests, _ = small_suite
    net = build_network(TINY, 0)
    samples = _suite_samples(manifests)[:2]
    early = batch_loss(net, samples, epoch=0, cfg=QUICK)
    assert not early.active and early.total is early.components["dice"]
    late = batch_loss(net, samples, epoch=2, cfg=QUICK)
    c = {k: float(v.detach()) for k, v in late.components.items()}
    assert float(late.total.detach()) == c["dice"] + 5.0 * c["long"] + 1.0 * c["vol"] + 1.0 * c["spat"]


def test_longitudinal_term_off_for_cross_sectional(small_suite):
    _, manifests, _ = small_suite
    ms2016 = next(m for m in manifests if m.name == "PH-2016")
    s = _suite_samples([ms2016])[0]
    fns = trainer.sample_losses(s, QUICK)
    p = {h: np.full((16, 16, 16), 0.5) for h in losses.HEADS}
    assert fns["long"](p)[0] == 0.0 and fns["vol"](p)[0] == 0.0


def test_nan_loss_names_the_component(small_suite, monkeypatch):
    _, manifests, _ = small_suite

    def bad_spatial(preds, wm, **kw):
        return float("nan"), {}

    monkeypatch.setattr(losses, "spatial_loss", bad_spatial)
    with pytest.raises(NumericalError, match="spat"):
        train_fold(items_for(manifests, make_folds(manifests, 1)[0].train), TINY, replace(QUICK, n_epoch=2, activation_fraction=0.5))


# --- training loop ----------------------------------------------------------


def test_log_is_additive_and_reproducible(small_suite, tmp_path):
    _, manifests, _ = small_suite
    items = items_for(manifests, make_folds(manifests, 1)[0].train)
    cfg = replace(QUICK, augment=AugmentConfig(), n_epoch=6)
    a = train_fold(items, TINY, cfg, seed=3, loss_log=tmp_path / "a.csv")
    b = train_fold(items, TINY, cfg, seed=3, loss_log=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = read_loss_log(tmp_path / "a.csv")
    assert rows == a.log and len(rows) == 6
    assert list(rows[0]) == ["epoch", "dice", "long", "vol", "spat", "total", "lr"]
    for r in rows:
        if r["epoch"] < 3:
            assert r["total"] == r["dice"]
        else:
            assert r["total"] == r["dice"] + 5.0 * r["long"] + 1.0 * r["vol"] + 1.0 * r["spat"]
        assert r["lr"] == 1e-3


def test_ensemble_manifest_and_prediction(small_suite, tmp_path):
    _, manifests, _ = small_suite
    paths = train_ensemble(manifests, TINY, replace(QUICK, folds=2, n_epoch=2), tmp_path)
    assert [p.name for p in paths] == ["model.pt", "model.pt"]
    nets, doc = load_ensemble(tmp_path)
    assert len(nets) == 2 and [m["fold"] for m in doc["members"]] == [0, 1]
    assert (tmp_path / "fold1" / "loss_log.csv").exists()
    rec = manifests[0].records_in("test")[0]
    single = predict([nets[0]], rec, manifests[0].availability)
    direct = trainer.sliding_inference(nets[0], pack_inputs(rec, (0, 1), manifests[0].availability), pad=True)
    assert np.array_equal(single[0][1].p_n_t2.data, direct.p_n_t2.data)
    both = predict(paths, rec, manifests[0].availability)
    other = predict([nets[1]], rec, manifests[0].availability)
    np.testing.assert_allclose(
        both[0][1].p_a_t2.data, (single[0][1].p_a_t2.data.astype(np.float64) + other[0][1].p_a_t2.data) / 2, rtol=1e-6
    )


class _Const(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value
        self.cfg = TINY

    def forward(self, x):
        return torch.full((x.shape[0], 4) + tuple(x.shape[2:]), self.value)


def test_ensemble_of_constant_members_is_their_mean(small_suite):
    _, manifests, _ = small_suite
    rec = manifests[0].records[0]
    out = predict([_Const(0.2), _Const(0.6)], rec, manifests[0].availability)
    assert np.allclose(out[0][1].p_a_t1.data, 0.4)


def test_four_timepoint_prediction_trajectory():
    from hetseg.experiments import DESK_PHANTOM, NO_LABELS
    from hetseg.phantom import generate_multi_timepoint_subject

    rec = generate_multi_timepoint_subject(DESK_PHANTOM, 4, seed=1)
    windows = predict([_Const(0.3)], rec, NO_LABELS)
    assert [p for p, _ in windows] == [(0, 1), (1, 2), (2, 3)]
    traj = trainer.all_lesion_trajectory(windows)
    assert len(traj) == 4 and all(isinstance(v, Volume3D) for v in traj)
