import numpy as np
import pytest
import torch

from rft.model import (
    FeatureMaps,
    ModelConfig,
    infer,
    init_params,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)


def rand_image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3)).astype(np.float32)


def test_descriptor_normalization_contract():
    net = init_params(ModelConfig.toy())
    maps = infer(net, rand_image(64, 64))
    norms = np.linalg.norm(maps.descriptors, axis=-1)
    assert maps.descriptors.shape == (64, 64, 32)
    assert np.abs(norms - 1.0).max() <= 1e-5


def test_scores_in_open_unit_interval():
    net = init_params(ModelConfig.toy(seed=3))
    maps = infer(net, rand_image(48, 40, seed=1))
    maps.validate()
    for m in (maps.repeatability, maps.reliability):
        assert m.min() > 0.0 and m.max() < 1.0
        assert m.shape == (48, 40)


def test_forward_deterministic():
    net = init_params(ModelConfig.toy())
    img = rand_image(64, 64, seed=2)
    a = infer(net, img)
    b = infer(net, img)
    assert np.array_equal(a.descriptors, b.descriptors)
    assert np.array_equal(a.repeatability, b.repeatability)
    assert np.array_equal(a.reliability, b.reliability)


def test_full_resolution_across_sizes():
    net = init_params(ModelConfig.toy())
    rng = np.random.default_rng(4)
    for _ in range(10):
        h = int(rng.integers(32, 150))
        w = int(rng.integers(32, 150))
        maps = infer(net, rand_image(h, w, seed=h * 1000 + w))
        assert maps.repeatability.shape == (h, w)
        assert maps.descriptors.shape[:2] == (h, w)


def test_rejects_small_input():
    net = init_params(ModelConfig.toy())
    with pytest.raises(ValueError, match="input too small"):
        infer(net, rand_image(31, 64))


def test_init_deterministic_given_seed():
    a = init_params(ModelConfig.toy(seed=7))
    b = init_params(ModelConfig.toy(seed=7))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = init_params(ModelConfig.toy(seed=8))
    assert not torch.equal(
        a.descriptor_conv.weight, c.descriptor_conv.weight
    )


def test_toy_parameter_count_closed_form():
    cfg = ModelConfig.toy()
    net = init_params(cfg)
    widths = cfg.channel_widths
    d = cfg.descriptor_dim
    expected = 0
    c_in = 3
    for w in widths:  # 3x3 convs with bias; batchnorm carries no parameters
        expected += c_in * w * 9 + w
        c_in = w
    expected += c_in * d * 9 + d  # descriptor conv
    expected += 2 * (d * 2 + 2)  # two 1x1 heads
    assert parameter_count(net) == expected
    assert parameter_count(net) <= 50_000


def test_default_dilation_schedule_doubles_on_width_step():
    cfg = ModelConfig()
    assert cfg.channel_widths == [32, 32, 64, 64, 128, 128]
    assert cfg.dilations == [1, 1, 2, 2, 4, 4]
    toy = ModelConfig.toy()
    assert toy.dilations == [1, 1, 2, 2, 4]


def test_fresh_init_loss_is_finite():
    from rft.homography import Homography, make_crop_pair
    from rft.losses import LossConfig, total_loss
    from rft.model import forward_maps

    net = init_params(ModelConfig.toy())
    img = rand_image(96, 96, seed=5)
    pair = make_crop_pair(img, img, Homography.identity(), crop_size=64, draw_seed=0)
    ma = forward_maps(net, torch.from_numpy(pair.crop_a.astype(np.float32)))
    mb = forward_maps(net, torch.from_numpy(pair.crop_b.astype(np.float32)))
    loss, report = total_loss(ma, mb, pair.warp, LossConfig(window=8))
    assert torch.isfinite(loss)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = init_params(ModelConfig.toy(seed=11))
    img = rand_image(64, 64, seed=6)
    before = infer(net, img)
    p = tmp_path / "net.npz"
    save_checkpoint(net, p)
    restored = load_checkpoint(p)
    after = infer(restored, img)
    assert np.array_equal(before.descriptors, after.descriptors)
    assert np.array_equal(before.repeatability, after.repeatability)
    assert np.array_equal(before.reliability, after.reliability)


def test_checkpoint_rejects_unknown_version(tmp_path):
    net = init_params(ModelConfig.toy())
    p = tmp_path / "net.npz"
    save_checkpoint(net, p)
    import json

    with np.load(p) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["version"] = "rft-ckpt-999"
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(p, **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(p)


def test_feature_maps_validation_catches_bad_norms():
    d = np.full((4, 4, 8), 0.5)
    rep = np.full((4, 4), 0.5)
    with pytest.raises(ValueError, match="unit-norm"):
        FeatureMaps(descriptors=d, repeatability=rep, reliability=rep).validate()
