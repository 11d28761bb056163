"""Run configuration: YAML presets, user overrides and stage hashes."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

from .abductive import ClipConfig, ClipTrainConfig
from .codec import PixelShuffleCodec
from .errors import ConfigurationError, PathError
from .oavd import TrainConfig
from .scenario import GeneratorConfig
from .unet import UNetConfig

PRESETS = ("desk", "paper-faithful")

# sections that determine each stage's artifacts
STAGE_SECTIONS = {
    "data": ("seed", "generator", "data"),
    "clip": ("seed", "generator", "data", "clip"),
    "oavd": ("seed", "generator", "data", "clip", "codec", "oavd"),
    "eval": ("seed", "generator", "data", "clip", "codec", "oavd", "infer"),
}


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = (resources.files("adversa") / "presets" / f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigurationError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where}{k} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(preset: str = "desk", path=None, seed: int | None = None) -> dict:
    """Preset, then the YAML file at ``path``, then ``seed``; the result is validated."""
    cfg = load_preset(preset)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise PathError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{p}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError(f"{p}: top level must be a mapping")
        user.pop("preset", None)
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg["preset"] = preset
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    d = cfg["data"]
    if not (0 < d["n_train"] < d["count"]):
        raise ConfigurationError("data.n_train must lie strictly between 0 and data.count")
    if not (1 <= d["oavd_train"] <= d["n_train"]):
        raise ConfigurationError("data.oavd_train must lie in [1, data.n_train]")
    if not (2 <= d["eval_count"] <= d["count"] - d["n_train"]):
        raise ConfigurationError("data.eval_count must lie in [2, number of held-out scenarios]")
    generator_config(cfg).validate()
    oavd_train_config(cfg).validate()
    unet_config(cfg)
    inf = cfg["infer"]
    for k in ("strength", "fidelity_strength"):
        if not (0.0 < float(inf[k]) <= 1.0):
            raise ConfigurationError(f"infer.{k} must lie in (0, 1]")
    if int(inf["steps"]) < 0:
        raise ConfigurationError("infer.steps must be >= 0")


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(**cfg["generator"])


def codec_of(cfg: dict) -> PixelShuffleCodec:
    return PixelShuffleCodec(cfg["generator"]["C"], cfg["codec"]["factor"], cfg["codec"]["seed"])


def clip_model_config(cfg: dict) -> ClipConfig:
    return ClipConfig(**cfg["clip"]["model"])


def clip_train_config(cfg: dict) -> ClipTrainConfig:
    return ClipTrainConfig(seed=cfg["seed"], **cfg["clip"]["train"])


def oavd_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["oavd"]["train"])


def unet_config(cfg: dict) -> UNetConfig:
    try:
        return UNetConfig(
            latent_channels=codec_of(cfg).latent_channels,
            context_dim=cfg["clip"]["model"]["embed"],
            **cfg["oavd"]["unet"],
        )
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def config_hash(cfg: dict, stage: str = "eval") -> str:
    """Short SHA-256 of the config sections that shape ``stage``'s artifacts."""
    if stage not in STAGE_SECTIONS:
        raise ConfigurationError(f"unknown stage {stage!r}")
    part = {k: cfg[k] for k in STAGE_SECTIONS[stage]}
    blob = json.dumps(part, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
