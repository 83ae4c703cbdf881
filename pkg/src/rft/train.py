"""Training loop over the augmentation configuration matrix.

Three pair modes: 'plain' (the partner crop is the image itself),
'color_aug' (partner gets random photometric jitter) and 'orig2style'
(partner is one of the image's stylizations, with jitter on top). All
modes warp the partner through a random homography before cropping.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ColorAugConfig, DatasetManifest, StylizedIndex, color_augment, sample_epoch_pairs
from .homography import HomographyConfig, make_crop_pair, sample_homography
from .imio import load_image, resize_max_dim
from .losses import (
    LossConfig,
    ap_kappa_loss,
    batch_kappa,
    has_ranking_queries,
    reliability_ap_terms,
    repeatability_terms,
)
from .model import ModelConfig, forward_maps, init_params, save_checkpoint

log = logging.getLogger(__name__)

PAIR_MODES = ("plain", "color_aug", "orig2style")
LOG_HEADER = ["epoch", "step", "lr", "l_cosim", "l_peaky_a", "l_peaky_b",
              "l_rep", "l_ap", "kappa", "mean_ap", "total"]
INGEST_MAX_DIM = 1024


@dataclass
class TrainConfig:
    pair_mode: str = "plain"
    epochs: int = 70
    warmup_epochs: int = 5
    base_lr: float = 1e-4
    decay_gamma: float = 0.95
    weight_decay: float = 5e-4
    batch_size: int = 4
    crop_size: int = 192
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    homography: HomographyConfig = field(default_factory=HomographyConfig)
    color_aug: ColorAugConfig = field(default_factory=ColorAugConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"pair_mode must be one of {PAIR_MODES}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0.0 < self.decay_gamma <= 1.0:
            raise ValueError("decay_gamma must be in (0, 1]")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warm-up to base_lr, then exponential decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.base_lr * cfg.decay_gamma ** (epoch - cfg.warmup_epochs + 1)


class _ImageCache:
    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._store:
            self._store[path] = resize_max_dim(load_image(path), INGEST_MAX_DIM)
        return self._store[path]


def _build_pair(img_a, img_b, cfg: TrainConfig, rng: np.random.Generator):
    """Sample homographies until a crop pair with enough overlap comes out.

    Besides the 30% overlap contract the pair must also yield at least one
    usable AP ranking query, otherwise the loss is undefined for it.
    """
    crop_shape = (cfg.crop_size, cfg.crop_size)
    for _ in range(20):
        h = sample_homography(cfg.homography, draw_seed=int(rng.integers(2**31)),
                              ref_size=cfg.crop_size)
        try:
            pair = make_crop_pair(img_a, img_b, h, crop_size=cfg.crop_size,
                                  draw_seed=int(rng.integers(2**31)))
        except RuntimeError:
            continue
        if has_ranking_queries(pair.warp, crop_shape, cfg.loss):
            return pair
    raise RuntimeError("could not build a crop pair with sufficient overlap")


def _dump_diagnostics(out_dir: Path, epoch: int, step: int, crops) -> Path:
    path = out_dir / f"nonfinite_batch_e{epoch}_s{step}.npz"
    arrays = {}
    for i, (ca, cb, warp) in enumerate(crops):
        arrays[f"crop_a_{i}"] = ca
        arrays[f"crop_b_{i}"] = cb
        arrays[f"warp_grid_{i}"] = warp.grid
        arrays[f"warp_valid_{i}"] = warp.valid
    np.savez(path, **arrays)
    return path


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    stylized_index: StylizedIndex | None,
    out_dir,
) -> tuple[Path, Path]:
    """Run the full schedule; returns (checkpoint path, CSV log path)."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if cfg.pair_mode == "orig2style" and (stylized_index is None or len(stylized_index) == 0):
        raise ValueError("pair_mode=orig2style requires a non-empty stylized index")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.npz"
    log_path = out_dir / "train_log.csv"

    torch.manual_seed(cfg.seed)
    net = init_params(cfg.model)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.base_lr,
                                 weight_decay=cfg.weight_decay)
    cache = _ImageCache()
    use_index = stylized_index if cfg.pair_mode == "orig2style" else None

    step = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            pairs = sample_epoch_pairs(manifest, use_index, epoch, cfg.seed)
            order_rng = np.random.default_rng([cfg.seed, epoch, 0xC0FFEE])
            order = order_rng.permutation(len(pairs))

            for start in range(0, len(order), cfg.batch_size):
                batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
                rng = np.random.default_rng([cfg.seed, epoch, step, 0xDA7A])

                crops = []
                for orig, partner, kind in batch:
                    img_a = cache.get(orig)
                    if cfg.pair_mode == "plain":
                        img_b = img_a
                    elif cfg.pair_mode == "color_aug":
                        img_b = color_augment(img_a, cfg.color_aug,
                                              draw_seed=int(rng.integers(2**31)))
                    else:
                        base = cache.get(partner) if kind == "stylized" else img_a
                        img_b = color_augment(base, cfg.color_aug,
                                              draw_seed=int(rng.integers(2**31)))
                    pair = _build_pair(img_a, img_b, cfg, rng)
                    crops.append((pair.crop_a.astype(np.float32),
                                  pair.crop_b.astype(np.float32), pair.warp))

                optimizer.zero_grad()
                rep_terms, ap_chunks, rel_chunks = [], [], []
                for ca, cb, warp in crops:
                    maps_a = forward_maps(net, torch.from_numpy(ca))
                    maps_b = forward_maps(net, torch.from_numpy(cb))
                    rep_terms.append(repeatability_terms(maps_a, maps_b, warp, cfg.loss))
                    ap, rel = reliability_ap_terms(maps_a, maps_b, warp, cfg.loss)
                    ap_chunks.append(ap)
                    rel_chunks.append(rel)

                all_ap = torch.cat(ap_chunks)
                all_rel = torch.cat(rel_chunks)
                kappa = batch_kappa(all_ap.detach().tolist(), cap=cfg.loss.kappa_cap)
                l_ap = ap_kappa_loss(all_ap, all_rel, kappa).mean()
                l_cosim = torch.stack([t[0] for t in rep_terms]).mean()
                l_peaky_a = torch.stack([t[1] for t in rep_terms]).mean()
                l_peaky_b = torch.stack([t[2] for t in rep_terms]).mean()
                l_rep = l_cosim + cfg.loss.peaky_weight * (l_peaky_a + l_peaky_b)
                total = l_rep + cfg.loss.ap_loss_weight * l_ap

                if not torch.isfinite(total):
                    dump = _dump_diagnostics(out_dir, epoch, step, crops)
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}; batch dumped to {dump}"
                    )

                total.backward()
                optimizer.step()

                writer.writerow([
                    epoch, step, f"{lr:.10g}",
                    f"{l_cosim.item():.10g}", f"{l_peaky_a.item():.10g}",
                    f"{l_peaky_b.item():.10g}", f"{l_rep.item():.10g}",
                    f"{l_ap.item():.10g}", f"{kappa:.10g}",
                    f"{all_ap.detach().mean().item():.10g}", f"{total.item():.10g}",
                ])
                step += 1

            save_checkpoint(net, ckpt_path)
            log.info("epoch %d done, lr %.3g", epoch, lr)
    return ckpt_path, log_path
