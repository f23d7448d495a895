"""Run configuration: typed settings plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import IMAGENET_MEAN, IMAGENET_STD, PreprocessConfig, SyntheticSpec
from .model import EncoderConfig, ModelConfig


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    init_seed: int = 0
    shuffle_seed: int = 1
    noise_seed: int = 2
    patience: int | None = None
    precision: str = "float32"
    selection_metric: str = "val_mean_auc"


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    eval_noise_std: float = 0.0
    eval_noise_seed: int = 3


# key -> (path of attribute names from RunConfig, parser)
def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("", "none", "off") else int(s)


def _opt_floats(s: str):
    return None if s.lower() in ("", "none", "auto") else _floats(s)


_KEYS: dict[str, tuple[tuple[str, ...], Any]] = {
    "epochs": (("train", "epochs"), int),
    "batch_size": (("train", "batch_size"), int),
    "lr": (("train", "lr"), float),
    "beta1": (("train", "beta1"), float),
    "beta2": (("train", "beta2"), float),
    "adam_eps": (("train", "adam_eps"), float),
    "weight_decay": (("train", "weight_decay"), float),
    "init_seed": (("train", "init_seed"), int),
    "shuffle_seed": (("train", "shuffle_seed"), int),
    "noise_seed": (("train", "noise_seed"), int),
    "patience": (("train", "patience"), _opt_int),
    "precision": (("train", "precision"), str),
    "selection_metric": (("train", "selection_metric"), str),
    "mode": (("train", "model", "mode"), str),
    "latent_dim": (("train", "model", "latent_dim"), int),
    "n_labels": (("train", "model", "n_labels"), int),
    "transition_kernel": (("train", "model", "transition_kernel"), int),
    "bn_eps": (("train", "model", "bn_eps"), float),
    "bn_momentum": (("train", "model", "bn_momentum"), float),
    "encoder_widths": (("train", "model", "encoder", "widths"), _ints),
    "encoder_kernels": (("train", "model", "encoder", "kernels"), _ints),
    "encoder_strides": (("train", "model", "encoder", "strides"), _ints),
    "activation": (("train", "model", "encoder", "activation"), str),
    "image_size": (("train", "model", "encoder", "image_size"), int),
    "in_channels": (("train", "model", "encoder", "in_channels"), int),
    "resize": (("train", "preprocess", "resize"), _opt_int),
    "crop": (("train", "preprocess", "crop"), _opt_int),
    "norm_mean": (("train", "preprocess", "mean"), _floats),
    "norm_std": (("train", "preprocess", "std"), _floats),
    "synthetic_size": (("synthetic", "image_size"), int),
    "synthetic_labels": (("synthetic", "n_labels"), int),
    "prevalence": (("synthetic", "prevalence"), _floats),
    "frequencies": (("synthetic", "frequencies"), _opt_floats),
    "amplitude": (("synthetic", "amplitude"), float),
    "pixel_noise_std": (("synthetic", "noise_std"), float),
    "n_patients": (("synthetic", "n_patients"), _opt_int),
    "images_per_patient": (("synthetic", "images_per_patient"), int),
    "data_seed": (("synthetic", "seed"), int),
    "n_train": (("n_train",), int),
    "n_val": (("n_val",), int),
    "n_test": (("n_test",), int),
    "eval_noise_std": (("eval_noise_std",), float),
    "eval_noise_seed": (("eval_noise_seed",), int),
}

TRAIN_KEYS = tuple(k for k, (path, _) in _KEYS.items() if path[0] == "train")


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(obj, path, value):
    if len(path) == 1:
        return dataclasses.replace(obj, **{path[0]: value})
    child = _set(getattr(obj, path[0]), path[1:], value)
    return dataclasses.replace(obj, **{path[0]: child})


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_items(cfg: RunConfig, keys=None) -> dict[str, str]:
    keys = _KEYS if keys is None else keys
    return {k: _fmt(_get(cfg, _KEYS[k][0])) for k in keys}


def train_items(cfg: TrainConfig) -> dict[str, str]:
    return to_items(RunConfig(train=cfg), TRAIN_KEYS)


def apply_items(cfg: RunConfig, items: dict[str, str], source: str = "<config>") -> RunConfig:
    for key, raw in items.items():
        if key not in _KEYS:
            raise ConfigFileError(f"{source}: unknown key {key!r}")
        path, parse = _KEYS[key]
        try:
            value = parse(raw.strip())
        except ValueError as exc:
            raise ConfigFileError(f"{source}: bad value for {key!r}: {raw!r} ({exc})") from None
        cfg = _set(cfg, path, value)
    return _sync(cfg)


def _sync(cfg: RunConfig) -> RunConfig:
    # a single label count drives both the model head and the generator
    n = cfg.train.model.n_labels
    syn = cfg.synthetic
    if syn.n_labels != n:
        prev = syn.prevalence if len(syn.prevalence) == n else (syn.prevalence[0],) * n
        cfg = dataclasses.replace(cfg, synthetic=dataclasses.replace(syn, n_labels=n, prevalence=prev))
    elif len(syn.prevalence) == 1 and n != 1:
        cfg = dataclasses.replace(cfg, synthetic=dataclasses.replace(syn, prevalence=syn.prevalence * n))
    return cfg


def train_config_from_items(items: dict[str, str]) -> TrainConfig:
    return apply_items(RunConfig(), items, "<checkpoint>").train


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        if key in items:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = value
    return items


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return apply_items(base or RunConfig(), parse_config_text(text, str(path)), str(path))


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg).items())


def desk_preset() -> RunConfig:
    """32x32 synthetic data, latent 64, identity geometry, lr raised for a scratch encoder."""
    return RunConfig(
        train=TrainConfig(
            lr=1e-3,
            model=ModelConfig(encoder=EncoderConfig(image_size=32), latent_dim=64),
            preprocess=PreprocessConfig(resize=None, crop=None),
        ),
        synthetic=SyntheticSpec(image_size=32),
    )


def paper_preset() -> RunConfig:
    """224x224 inputs, latent 1024, batch 16, lr 1e-5."""
    return RunConfig(
        train=TrainConfig(
            lr=1e-5,
            model=ModelConfig(encoder=EncoderConfig(image_size=224), latent_dim=1024),
            preprocess=PreprocessConfig(resize=256, crop=224, mean=IMAGENET_MEAN, std=IMAGENET_STD),
        ),
        synthetic=SyntheticSpec(image_size=256),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}
