import csv

import numpy as np
import pytest

from rft.data import ColorAugConfig, DatasetManifest, StylizedIndex
from rft.homography import HomographyConfig
from rft.imio import load_image, save_image
from rft.losses import LossConfig
from rft.model import ModelConfig, infer, load_checkpoint
from rft.train import TrainConfig, lr_at_epoch, train


def toy_train_config(pair_mode="plain", epochs=4, seed=0, crop=64):
    return TrainConfig(
        pair_mode=pair_mode,
        epochs=epochs,
        warmup_epochs=0 if epochs == 1 else 1,
        base_lr=3e-4,
        batch_size=4,
        crop_size=crop,
        seed=seed,
        loss=LossConfig(window=8),
        homography=HomographyConfig(
            max_rotation_deg=10, scale_range=(0.9, 1.1),
            max_perspective=0.02, max_translation_frac=0.05, seed=seed,
        ),
        color_aug=ColorAugConfig(seed=seed),
        model=ModelConfig.toy(seed=seed),
    )


def textured_image(seed, size=128):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.1, 0.9, size=(size // 8, size // 8, 3))
    img = np.kron(img, np.ones((8, 8, 1)))  # blocky texture with corners
    img += rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0, 1)


@pytest.fixture()
def tiny_dataset(tmp_path):
    entries = []
    for i in range(8):
        p = tmp_path / "data" / "sceneA" / f"img{i}.png"
        save_image(p, textured_image(i))
        entries.append(("sceneA", str(p.resolve())))
    return DatasetManifest(entries=entries, per_scene_cap=8)


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_lr_schedule_hand_values():
    cfg = toy_train_config(epochs=70)
    cfg.warmup_epochs = 5
    cfg.base_lr = 1e-3
    cfg.decay_gamma = 0.95
    assert lr_at_epoch(cfg, 0) == pytest.approx(1e-3 / 5)
    assert lr_at_epoch(cfg, 4) == pytest.approx(1e-3)
    assert lr_at_epoch(cfg, 7) == pytest.approx(1e-3 * 0.95**3)


def test_lr_schedule_shape():
    cfg = toy_train_config(epochs=30)
    cfg.warmup_epochs = 5
    lrs = [lr_at_epoch(cfg, e) for e in range(30)]
    for e in range(1, 5):
        assert lrs[e] >= lrs[e - 1]
    for e in range(6, 30):
        assert lrs[e] < lrs[e - 1]
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, 30)
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, -1)


def test_train_config_validation():
    with pytest.raises(ValueError, match="pair_mode"):
        toy_train_config(pair_mode="styleless")
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError, match="decay_gamma"):
        TrainConfig(decay_gamma=0.0)


def test_orig2style_requires_index(tiny_dataset, tmp_path):
    cfg = toy_train_config(pair_mode="orig2style", epochs=1)
    with pytest.raises(ValueError, match="stylized index"):
        train(cfg, tiny_dataset, StylizedIndex(), tmp_path / "run")


def test_train_overfits_tiny_set(tiny_dataset, tmp_path):
    cfg = toy_train_config(epochs=30)
    ckpt, log_path = train(cfg, tiny_dataset, None, tmp_path / "run")
    rows = read_log(log_path)
    first = np.mean([float(r["total"]) for r in rows if r["epoch"] == "0"])
    last = np.mean([float(r["total"]) for r in rows if r["epoch"] == "29"])
    assert last < first
    assert ckpt.exists()


def test_train_deterministic_logs(tiny_dataset, tmp_path):
    cfg = toy_train_config(epochs=2, seed=11)
    _, log1 = train(cfg, tiny_dataset, None, tmp_path / "run1")
    _, log2 = train(toy_train_config(epochs=2, seed=11), tiny_dataset, None, tmp_path / "run2")
    assert log1.read_bytes() == log2.read_bytes()


def test_train_color_aug_mode_runs(tiny_dataset, tmp_path):
    cfg = toy_train_config(pair_mode="color_aug", epochs=1)
    ckpt, log_path = train(cfg, tiny_dataset, None, tmp_path / "run")
    rows = read_log(log_path)
    assert len(rows) == 2  # 8 images / batch 4
    assert all(np.isfinite(float(r["total"])) for r in rows)


def test_train_orig2style_mode_runs(tiny_dataset, tmp_path):
    from rft.data import StylePool
    from rft.stylize import build_stylized_index

    styles = {}
    for j, cat in enumerate(("night", "mist")):
        p = tmp_path / "styles" / cat / "s0.png"
        rng = np.random.default_rng(900 + j)
        save_image(p, np.clip(rng.normal(0.25 + 0.2 * j, 0.1, size=(16, 16, 3)), 0, 1))
        styles[cat] = [str(p)]
    pool = StylePool(categories=sorted(styles), exemplars=styles)
    idx = build_stylized_index(tiny_dataset, pool, tmp_path / "styled")

    cfg = toy_train_config(pair_mode="orig2style", epochs=1)
    _, log_path = train(cfg, tiny_dataset, idx, tmp_path / "run")
    assert len(read_log(log_path)) == 2


def test_checkpoint_forward_round_trip(tiny_dataset, tmp_path):
    cfg = toy_train_config(epochs=1)
    ckpt, _ = train(cfg, tiny_dataset, None, tmp_path / "run")
    net = load_checkpoint(ckpt)
    img = load_image(tiny_dataset.image_paths[0])
    a = infer(net, img)
    b = infer(load_checkpoint(ckpt), img)
    assert np.array_equal(a.descriptors, b.descriptors)
    assert np.array_equal(a.repeatability, b.repeatability)


def test_train_log_header_order(tiny_dataset, tmp_path):
    cfg = toy_train_config(epochs=1)
    _, log_path = train(cfg, tiny_dataset, None, tmp_path / "run")
    header = log_path.read_text().splitlines()[0]
    assert header == "epoch,step,lr,l_cosim,l_peaky_a,l_peaky_b,l_rep,l_ap,kappa,mean_ap,total"
