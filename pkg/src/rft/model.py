"""Fully convolutional feature network.

A stack of dilated 3x3 convolutions keeps the output at input resolution.
The last conv layer is the descriptor layer: L2-normalized per pixel it
yields the descriptor map, and its element-wise square feeds two separate
1x1-conv + 2-way-softmax heads producing the repeatability and reliability
score maps.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = "rft-ckpt-1"
MIN_INPUT_SIZE = 32


@dataclass
class ModelConfig:
    descriptor_dim: int = 128
    channel_widths: list[int] = field(default_factory=lambda: [32, 32, 64, 64, 128, 128])
    dilations: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        if not self.channel_widths:
            raise ValueError("channel_widths must be non-empty")
        if self.dilations is None:
            # dilation doubles wherever the channel width steps up, standing in
            # for the strides of the original architecture
            d, out = 1, []
            prev = self.channel_widths[0]
            for w in self.channel_widths:
                if w > prev:
                    d *= 2
                out.append(d)
                prev = w
            self.dilations = out
        if len(self.dilations) != len(self.channel_widths):
            raise ValueError("dilations must match channel_widths")

    @classmethod
    def toy(cls, seed: int = 0) -> "ModelConfig":
        """Small config (<50k parameters) for tests and desk-scale runs."""
        return cls(descriptor_dim=32, channel_widths=[8, 8, 16, 16, 32], seed=seed)


@dataclass
class FeatureMaps:
    """Dense network outputs; arrays are HxWxD / HxW (numpy or torch)."""

    descriptors: object
    repeatability: object
    reliability: object

    def validate(self) -> None:
        d = np.asarray(self.descriptors)
        rep = np.asarray(self.repeatability)
        rel = np.asarray(self.reliability)
        if d.shape[:2] != rep.shape or rep.shape != rel.shape:
            raise ValueError("feature map shapes disagree")
        if not (np.isfinite(d).all() and np.isfinite(rep).all() and np.isfinite(rel).all()):
            raise ValueError("feature maps contain non-finite values")
        norms = np.linalg.norm(d, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("descriptors are not unit-norm")
        for name, m in (("repeatability", rep), ("reliability", rel)):
            if m.min() <= 0.0 or m.max() >= 1.0:
                raise ValueError(f"{name} scores must lie strictly inside (0, 1)")


class FeatureNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 3
        for width, dil in zip(cfg.channel_widths, cfg.dilations):
            layers.append(nn.Conv2d(c_in, width, 3, padding=dil, dilation=dil))
            layers.append(nn.BatchNorm2d(width, affine=False))
            layers.append(nn.ReLU(inplace=True))
            c_in = width
        self.backbone = nn.Sequential(*layers)
        last_dil = cfg.dilations[-1]
        self.descriptor_conv = nn.Conv2d(c_in, cfg.descriptor_dim, 3,
                                         padding=last_dil, dilation=last_dil)
        self.repeatability_head = nn.Conv2d(cfg.descriptor_dim, 2, 1)
        self.reliability_head = nn.Conv2d(cfg.descriptor_dim, 2, 1)

    def forward(self, x: torch.Tensor):
        """x: Bx3xHxW in [0,1] -> (descriptors BxDxHxW, repeat BxHxW, reliab BxHxW)."""
        if x.shape[-2] < MIN_INPUT_SIZE or x.shape[-1] < MIN_INPUT_SIZE:
            raise ValueError(
                f"input too small: need at least {MIN_INPUT_SIZE}px, got {tuple(x.shape[-2:])}"
            )
        raw = self.descriptor_conv(self.backbone(x))
        desc = F.normalize(raw, p=2, dim=1, eps=1e-12)
        squared = raw * raw
        rep = F.softmax(self.repeatability_head(squared), dim=1)[:, 0]
        rel = F.softmax(self.reliability_head(squared), dim=1)[:, 0]
        return desc, rep, rel


def init_params(cfg: ModelConfig) -> FeatureNet:
    """Build a FeatureNet with fan-in-scaled init, deterministic given cfg.seed."""
    torch.manual_seed(cfg.seed)
    net = FeatureNet(cfg)
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return net


def forward_maps(net: FeatureNet, image: torch.Tensor) -> FeatureMaps:
    """Run one HxWx3 image tensor through the net, keeping the graph.

    Returns tensor-backed FeatureMaps (HxWxD descriptors, HxW scores).
    """
    x = image.permute(2, 0, 1).unsqueeze(0)
    desc, rep, rel = net(x)
    return FeatureMaps(
        descriptors=desc[0].permute(1, 2, 0),
        repeatability=rep[0],
        reliability=rel[0],
    )


def infer(net: FeatureNet, image: np.ndarray) -> FeatureMaps:
    """Numpy in, numpy out; eval mode, no gradients."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            dtype = next(net.parameters()).dtype
            t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).to(dtype)
            maps = forward_maps(net, t)
    finally:
        net.train(was_training)
    return FeatureMaps(
        descriptors=maps.descriptors.numpy().astype(np.float32),
        repeatability=maps.repeatability.numpy().astype(np.float32),
        reliability=maps.reliability.numpy().astype(np.float32),
    )


def parameter_count(net: FeatureNet) -> int:
    return sum(p.numel() for p in net.parameters())


def _write_npz_deterministic(path, arrays: dict) -> None:
    """npz with pinned zip timestamps so identical data gives identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(net: FeatureNet, path) -> None:
    state = net.state_dict()
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.cfg),
        "dtype": str(next(net.parameters()).dtype).replace("torch.", ""),
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update({k: v.detach().cpu().numpy() for k, v in state.items()})
    _write_npz_deterministic(path, arrays)


def load_checkpoint(path) -> FeatureNet:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        net = FeatureNet(cfg)
        if meta.get("dtype") == "float64":
            net.double()
        state = {k: torch.from_numpy(z[k]) for k in z.files if k != "__meta__"}
    net.load_state_dict(state)
    net.eval()
    return net
