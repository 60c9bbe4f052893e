import numpy as np
import pytest
import torch

from hetseg.assembly import InputBundle, RangeError
from hetseg.core import ConfigError, ValidationError, Volume3D, mask
from hetseg.model import (
    ModelConfig,
    PredictionBundle,
    build_network,
    forward,
    load_checkpoint,
    save_checkpoint,
    sliding_inference,
    tile_origins,
)

SMALL = ModelConfig(depth=2, base_width=4, patch_size=(16, 16, 16))
AVAIL = {"all_t1": True, "all_t2": False, "new_t2": False, "vanish_t2": False}


def _bundle(shape, seed=0, y=None):
    rng = np.random.default_rng(seed)
    y = rng.random(shape) < 0.1 if y is None else y
    return InputBundle(
        Volume3D(rng.random(shape).astype(np.float32)),
        Volume3D(rng.random(shape).astype(np.float32)),
        mask(y),
        mask(rng.random(shape) < 0.7),
        AVAIL,
        1.0,
    )


def test_config_validation():
    assert ModelConfig.paper().patch_size == (96, 96, 96)
    with pytest.raises(ConfigError):
        ModelConfig(depth=5, patch_size=(48, 48, 48))
    with pytest.raises(ConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        ModelConfig(in_channels=3)


def test_paper_configuration_builds():
    net = build_network(ModelConfig.paper(), seed=0)
    assert net.n_parameters > 1_000_000
    assert ModelConfig.paper().widths() == [16, 32, 64, 128, 256, 256]


def test_same_seed_same_parameters():
    a, b, c = build_network(SMALL, 3), build_network(SMALL, 3), build_network(SMALL, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_outputs_are_probabilities_of_input_shape():
    net = build_network(SMALL, 0)
    out = forward(net, _bundle((16, 16, 16)))
    for v in out.volumes():
        assert v.shape == (16, 16, 16)
        assert 0.0 < v.data.min() and v.data.max() < 1.0


def test_p_a_t1_is_bit_invariant_to_the_label_channel():
    net = build_network(SMALL, 0)
    shape = (16, 16, 16)
    base = _bundle(shape, seed=1)
    a = forward(net, base)
    for s in range(3):
        flipped = base.replace_channels(y_a_t1=np.random.default_rng(s).random(shape) < 0.5)
        b = forward(net, flipped)
        assert np.array_equal(a.p_a_t1.data, b.p_a_t1.data)
        # the other heads do see the channel
        assert not np.array_equal(a.p_a_t2.data, b.p_a_t2.data)


def test_p_a_t1_has_zero_gradient_wrt_label_channel():
    net = build_network(SMALL, 0)
    x = torch.from_numpy(_bundle((16, 16, 16)).channels())[None].requires_grad_(True)
    net(x)[:, 0].sum().backward()
    assert torch.count_nonzero(x.grad[:, 2]) == 0
    assert torch.count_nonzero(x.grad[:, 0]) > 0


def test_evaluation_is_deterministic():
    net = build_network(SMALL, 0)
    b = _bundle((16, 16, 16))
    a, c = forward(net, b), forward(net, b)
    assert all(x.equals(y) for x, y in zip(a.volumes(), c.volumes()))


def test_forward_rejects_incompatible_shape():
    with pytest.raises(ValidationError):
        forward(build_network(SMALL, 0), _bundle((10, 16, 16)))


def test_sliding_inference_single_tile_equals_forward():
    net = build_network(SMALL, 0)
    b = _bundle((16, 16, 16))
    a = forward(net, b)
    s = sliding_inference(net, b, overlap=0.0)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.volumes(), s.volumes()))


def test_sliding_inference_tiles_large_volumes():
    net = build_network(SMALL, 0)
    b = _bundle((32, 32, 32))
    out = sliding_inference(net, b, overlap=0.5)
    assert out.shape == (32, 32, 32)
    origins = tile_origins((32, 32, 32), (16, 16, 16), 0.5)
    cover = np.zeros((32, 32, 32), int)
    for o in origins:
        cover[o[0] : o[0] + 16, o[1] : o[1] + 16, o[2] : o[2] + 16] += 1
    assert cover.min() >= 1
    assert tile_origins((64, 64, 64), (32, 32, 32), 0.5)[-1] == (32, 32, 32)


def test_sliding_inference_matches_tile_average():
    net = build_network(SMALL, 0)
    b = _bundle((16, 16, 24))
    out = sliding_inference(net, b, overlap=0.5)
    from hetseg.assembly import extract_patch

    left = forward(net, extract_patch(b, (0, 0, 0), (16, 16, 16))).p_a_t2.data
    right = forward(net, extract_patch(b, (0, 0, 8), (16, 16, 16))).p_a_t2.data
    np.testing.assert_allclose(out.p_a_t2.data[:, :, :8], left[:, :, :8], rtol=1e-6)
    np.testing.assert_allclose(out.p_a_t2.data[:, :, 8:16], (left[:, :, 8:] + right[:, :, :8]) / 2, rtol=1e-5)
    np.testing.assert_allclose(out.p_a_t2.data[:, :, 16:], right[:, :, 8:], rtol=1e-6)


def test_sliding_inference_small_volume_needs_padding():
    net = build_network(SMALL, 0)
    b = _bundle((8, 16, 16))
    with pytest.raises(RangeError):
        sliding_inference(net, b)
    assert sliding_inference(net, b, pad=True).shape == (8, 16, 16)
    with pytest.raises(ValidationError):
        sliding_inference(net, _bundle((16, 16, 16)), overlap=1.0)


def test_gradient_reaches_every_stage():
    net = build_network(SMALL, 0)
    net.train()
    x = torch.from_numpy(np.stack([_bundle((16, 16, 16), s).channels() for s in range(2)]))
    ((net(x) - 0.3) ** 2).mean().backward()
    for name, module in [("encoder", net.encoder), ("down", net.down), ("up", net.up), ("decoder", net.decoder)]:
        for k, stage in enumerate(module):
            grads = [p.grad for p in stage.parameters()]
            assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads), f"{name}[{k}]"
    for head in net.heads:
        assert torch.count_nonzero(head.weight.grad) > 0


def test_prediction_bundle_validation_and_mean():
    ones = np.full((4, 2, 2, 2), 0.2, np.float32)
    a = PredictionBundle.from_array(ones, (1, 1, 1))
    b = PredictionBundle.from_array(ones * 3, (1, 1, 1))
    m = PredictionBundle.mean([a, b])
    assert np.allclose(m.p_n_t2.data, 0.4)
    with pytest.raises(ValidationError):
        PredictionBundle.from_array(ones * 6, (1, 1, 1))


def test_checkpoint_round_trip(tmp_path):
    net = build_network(SMALL, 7)
    save_checkpoint(tmp_path / "m.pt", net, seed=7, epoch=12, extra={"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.pt")
    assert back.cfg == SMALL and meta["seed"] == 7 and meta["epoch"] == 12 and meta["version"] == 1
    b = _bundle((16, 16, 16))
    assert np.array_equal(forward(net, b).p_n_t2.data, forward(back, b).p_n_t2.data)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.pt")
