"""Run configuration files.

A config is one JSON object (RFC 8259). Every section is optional except
``model`` and ``prompt``; unknown keys anywhere are rejected. Example::

    {
      "seed": 0,
      "model":     {"d": 32, "L": 4, "h": 1, "n": 16, "patch_dim": 24, "num_classes": 4},
      "prompt":    {"kind": "bilinear", "m": 8, "p": 8, "placement": "shallow"},
      "train":     {"base_lr": 0.01, "warmup_steps": 20, "total_steps": 200, "batch_size": 8},
      "data":      {"recipe": "gaussian-blobs", "samples_per_class": 32, "snr": 1.0},
      "whitening": {"images": 100, "eps": null, "center": false},
      "output":    {"dir": "runs", "checkpoint_every": 0},
      "gradcheck": {"h": 1e-5, "batch": 2, "tol": 1e-4, "include_head": false}
    }

``prompt.placement`` is "shallow", "deep" (with optional ``depth`` = top-k
blocks) or an explicit list of 1-based block indices.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .prompts import PromptConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    recipe: str = "gaussian-blobs"
    samples_per_class: int = 32
    snr: float = 1.0
    tokens_path: str | None = None


@dataclass(frozen=True)
class WhiteningConfig:
    images: int = 100
    eps: float | None = None
    center: bool = False


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class GradCheckConfig:
    h: float = 1e-5
    batch: int = 2
    tol: float = 1e-4
    include_head: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    prompt: PromptConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    whitening: WhiteningConfig | None = None
    output: OutputConfig = field(default_factory=OutputConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)
    seed: int = 0
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.source, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"model": ModelConfig, "prompt": PromptConfig, "train": TrainConfig, "data": DataConfig,
             "whitening": WhiteningConfig, "output": OutputConfig, "gradcheck": GradCheckConfig}
_HIDDEN = {"train": {"seed"}}


def _build(section, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in allowed or key in _HIDDEN.get(section, ()):
            raise ConfigError(f"unknown key {section}.{key}")
    kwargs = {}
    for key, value in raw.items():
        if section == "prompt" and key == "placement" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} section: {e}") from None


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _SECTIONS and key != "seed":
            raise ConfigError(f"unknown key {key}")
    for required in ("model", "prompt"):
        if required not in raw:
            raise ConfigError(f"missing section {required!r}")
    seed = raw.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    parts = {name: _build(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    parts["train"] = dataclasses.replace(parts.get("train", TrainConfig()), seed=seed)
    prompt, model = parts["prompt"], parts["model"]
    prompt.blocks(model.L)  # placement within 1..L
    if parts.get("whitening") is not None and prompt.kind not in ("fwhiten", "twhiten"):
        raise ConfigError(f"whitening section given but prompt.kind is {prompt.kind!r}")
    if prompt.kind in ("fwhiten", "twhiten") and "whitening" not in parts:
        parts["whitening"] = WhiteningConfig()
    source = dict(raw)
    source["seed"] = seed
    return RunConfig(seed=seed, source=source, **parts)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return parse_config(raw, seed_override)
