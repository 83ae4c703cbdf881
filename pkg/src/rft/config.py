"""INI-style experiment configuration.

One file drives every command: sections mirror the config dataclasses
([train], [loss], [homography], [color_aug], [model], [extract], plus the
small [stylize] and [eval] sections for the remaining knobs). CLI
overrides are `section.key=value` pairs; unknown sections or keys are
rejected. Every command writes back a resolved snapshot, and the RFT_SEED
environment variable, when set, overrides every seed field.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path

from .data import ColorAugConfig
from .extract import ExtractConfig
from .homography import HomographyConfig
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

SEED_ENV_VAR = "RFT_SEED"


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _default_schema() -> dict[str, dict[str, str]]:
    t = TrainConfig()
    loss = LossConfig()
    hom = HomographyConfig()
    ca = ColorAugConfig()
    mdl = ModelConfig()
    ext = ExtractConfig()
    return {
        "train": {
            "pair_mode": t.pair_mode,
            "epochs": _fmt(t.epochs),
            "warmup_epochs": _fmt(t.warmup_epochs),
            "base_lr": _fmt(t.base_lr),
            "decay_gamma": _fmt(t.decay_gamma),
            "weight_decay": _fmt(t.weight_decay),
            "batch_size": _fmt(t.batch_size),
            "crop_size": _fmt(t.crop_size),
            "seed": _fmt(t.seed),
        },
        "loss": {
            "window": _fmt(loss.window),
            "peaky_weight": _fmt(loss.peaky_weight),
            "kappa_cap": _fmt(loss.kappa_cap),
            "ap_bins": _fmt(loss.ap_bins),
            "query_grid_stride": _fmt(loss.query_grid_stride),
            "positive_radius_px": _fmt(loss.positive_radius_px),
            "negative_min_dist_px": _fmt(loss.negative_min_dist_px),
            "ap_loss_weight": _fmt(loss.ap_loss_weight),
        },
        "homography": {
            "max_rotation_deg": _fmt(hom.max_rotation_deg),
            "scale_range": _fmt(hom.scale_range),
            "max_perspective": _fmt(hom.max_perspective),
            "max_translation_frac": _fmt(hom.max_translation_frac),
            "seed": _fmt(hom.seed),
        },
        "color_aug": {
            "brightness_delta_range": _fmt(ca.brightness_delta_range),
            "contrast_factor_range": _fmt(ca.contrast_factor_range),
            "hue_shift_range": _fmt(ca.hue_shift_range),
            "saturation_factor_range": _fmt(ca.saturation_factor_range),
            "gaussian_noise_sigma_range": _fmt(ca.gaussian_noise_sigma_range),
            "jpeg_quality_range": _fmt(ca.jpeg_quality_range),
            "p_brightness": _fmt(ca.p_brightness),
            "p_contrast": _fmt(ca.p_contrast),
            "p_hue_saturation": _fmt(ca.p_hue_saturation),
            "p_noise": _fmt(ca.p_noise),
            "p_jpeg": _fmt(ca.p_jpeg),
            "seed": _fmt(ca.seed),
        },
        "model": {
            "descriptor_dim": _fmt(mdl.descriptor_dim),
            "channel_widths": _fmt(mdl.channel_widths),
            "dilations": "auto",
            "seed": _fmt(mdl.seed),
        },
        "extract": {
            "max_dim": _fmt(ext.max_dim),
            "min_dim": _fmt(ext.min_dim),
            "scale_factor": _fmt(ext.scale_factor),
            "score_threshold": _fmt(ext.score_threshold),
            "nms_radius_px": _fmt(ext.nms_radius_px),
            "top_k": _fmt(ext.top_k),
            "checkpoint": "",
        },
        "stylize": {
            "strength": "1.0",
            "eps": "1e-05",
        },
        "eval": {
            "eps_px": "3.0",
            "retrieval_k": "20",
            "warps_per_image": "2",
            "seed": "0",
        },
    }


def default_config() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_dict(_default_schema())
    return parser


def load_config(path=None) -> configparser.ConfigParser:
    """Defaults overlaid with the given file; unknown entries rejected."""
    parser = default_config()
    if path is not None:
        incoming = configparser.ConfigParser()
        if not incoming.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        _validate(incoming)
        parser.read_dict({s: dict(incoming[s]) for s in incoming.sections()})
    _apply_env_seed(parser)
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides) -> None:
    """Apply `section.key=value` pairs in order; overrides win over files."""
    schema = _default_schema()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form section.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ValueError(f"override key '{key}' must be section.key")
        section, option = key.split(".", 1)
        if section not in schema or option not in schema[section]:
            raise ValueError(f"unknown config key '{section}.{option}'")
        parser[section][option] = value
    _apply_env_seed(parser)


def _apply_env_seed(parser: configparser.ConfigParser) -> None:
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return
    seed = str(int(env))
    for section in ("train", "homography", "color_aug", "model", "eval"):
        parser[section]["seed"] = seed


def _validate(parser: configparser.ConfigParser) -> None:
    schema = _default_schema()
    for section in parser.sections():
        if section not in schema:
            raise ValueError(f"unknown config section '{section}'")
        for option in parser[section]:
            if option not in schema[section]:
                raise ValueError(f"unknown config key '{section}.{option}'")


def save_config(parser: configparser.ConfigParser, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split())


def loss_config(parser) -> LossConfig:
    s = parser["loss"]
    return LossConfig(
        window=s.getint("window"),
        peaky_weight=s.getfloat("peaky_weight"),
        kappa_cap=s.getfloat("kappa_cap"),
        ap_bins=s.getint("ap_bins"),
        query_grid_stride=s.getint("query_grid_stride"),
        positive_radius_px=s.getfloat("positive_radius_px"),
        negative_min_dist_px=s.getfloat("negative_min_dist_px"),
        ap_loss_weight=s.getfloat("ap_loss_weight"),
    )


def homography_config(parser) -> HomographyConfig:
    s = parser["homography"]
    return HomographyConfig(
        max_rotation_deg=s.getfloat("max_rotation_deg"),
        scale_range=_floats(s["scale_range"]),
        max_perspective=s.getfloat("max_perspective"),
        max_translation_frac=s.getfloat("max_translation_frac"),
        seed=s.getint("seed"),
    )


def color_aug_config(parser) -> ColorAugConfig:
    s = parser["color_aug"]
    return ColorAugConfig(
        brightness_delta_range=_floats(s["brightness_delta_range"]),
        contrast_factor_range=_floats(s["contrast_factor_range"]),
        hue_shift_range=_floats(s["hue_shift_range"]),
        saturation_factor_range=_floats(s["saturation_factor_range"]),
        gaussian_noise_sigma_range=_floats(s["gaussian_noise_sigma_range"]),
        jpeg_quality_range=_ints(s["jpeg_quality_range"]),
        p_brightness=s.getfloat("p_brightness"),
        p_contrast=s.getfloat("p_contrast"),
        p_hue_saturation=s.getfloat("p_hue_saturation"),
        p_noise=s.getfloat("p_noise"),
        p_jpeg=s.getfloat("p_jpeg"),
        seed=s.getint("seed"),
    )


def model_config(parser) -> ModelConfig:
    s = parser["model"]
    dil = s["dilations"].strip()
    return ModelConfig(
        descriptor_dim=s.getint("descriptor_dim"),
        channel_widths=list(_ints(s["channel_widths"])),
        dilations=None if dil == "auto" else list(_ints(dil)),
        seed=s.getint("seed"),
    )


def extract_config(parser) -> ExtractConfig:
    s = parser["extract"]
    return ExtractConfig(
        max_dim=s.getint("max_dim"),
        min_dim=s.getint("min_dim"),
        scale_factor=s.getfloat("scale_factor"),
        score_threshold=s.getfloat("score_threshold"),
        nms_radius_px=s.getint("nms_radius_px"),
        top_k=s.getint("top_k"),
    )


def train_config(parser) -> TrainConfig:
    s = parser["train"]
    return TrainConfig(
        pair_mode=s["pair_mode"],
        epochs=s.getint("epochs"),
        warmup_epochs=s.getint("warmup_epochs"),
        base_lr=s.getfloat("base_lr"),
        decay_gamma=s.getfloat("decay_gamma"),
        weight_decay=s.getfloat("weight_decay"),
        batch_size=s.getint("batch_size"),
        crop_size=s.getint("crop_size"),
        seed=s.getint("seed"),
        loss=loss_config(parser),
        homography=homography_config(parser),
        color_aug=color_aug_config(parser),
        model=model_config(parser),
    )
