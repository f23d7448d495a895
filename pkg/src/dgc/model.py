"""Generative classifier: encoder -> transition -> sampling -> classifier.

Parameters live in plain ordered dicts of numpy arrays so they can be handed
to the optimizer and the checkpoint writer without ceremony.  Forward
functions take a :class:`~dgc.autodiff.Tape` when gradients are wanted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import LayerParams, Tape, Tensor

GENERATIVE = "generative"
DETERMINISTIC = "deterministic"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    kernels: tuple[int, ...] = (3, 3, 3)
    strides: tuple[int, ...] = (2, 2, 2)
    activation: str = "relu"
    image_size: int = 32
    in_channels: int = 3

    def stage_padding(self, side: int, kernel: int, stride: int) -> tuple[int, int]:
        """'Same' padding (before, after) so a stage maps side -> ceil(side / stride).

        ``after`` is negative when trailing rows are never reached by the kernel
        (e.g. a 1x1 stride-2 stage on an even side); those rows are dropped.
        """
        out = -(-side // stride)
        total = (out - 1) * stride + kernel - side
        if total < 0:
            return 0, total
        return total // 2, total - total // 2

    def feature_shape(self) -> tuple[int, int]:
        """(channels, side) of the final feature map; raises on an invalid stack."""
        if not (len(self.widths) == len(self.kernels) == len(self.strides)):
            raise ConfigError("encoder widths, kernels and strides must have equal length")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.image_size < 1 or self.in_channels < 1:
            raise ConfigError("image size and channel count must be positive")
        side, channels = self.image_size, self.in_channels
        for w, k, s in zip(self.widths, self.kernels, self.strides):
            if w < 1 or k < 1 or s < 1:
                raise ConfigError("encoder stage sizes must be positive")
            side = -(-side // s)
            channels = w
        return channels, side


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    latent_dim: int = 64
    n_labels: int = 14
    transition_kernel: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    mode: str = GENERATIVE

    def validate(self) -> None:
        _, side = self.encoder.feature_shape()
        if self.latent_dim < 1 or self.n_labels < 1:
            raise ConfigError("latent_dim and n_labels must be positive")
        if self.transition_kernel < 1 or self.transition_kernel % 2 == 0:
            raise ConfigError("transition kernel must be a positive odd size")
        if self.mode not in (GENERATIVE, DETERMINISTIC):
            raise ConfigError(f"mode must be {GENERATIVE!r} or {DETERMINISTIC!r}")


_ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid}


@dataclass
class DgcModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def sigma(self) -> np.ndarray:
        return np.exp(self.params["sampling.v"] / 2)

    def copy(self) -> "DgcModel":
        return DgcModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def with_mode(self, mode: str) -> "DgcModel":
        """Same parameters (shared arrays), different mode flag."""
        return DgcModel(replace(self.config, mode=mode), self.params, self.buffers)


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> DgcModel:
    """Seeded initialization.

    Draw order: encoder stage weights (stage order), transition conv weight,
    transition batch-norm gamma, sampling ``v``, classifier weight.  Conv and
    affine weights are Kaiming-uniform ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``;
    biases and beta start at 0, gamma and ``v`` at ``U(0, 1)``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    cin = config.encoder.in_channels
    for i, (w, k) in enumerate(zip(config.encoder.widths, config.encoder.kernels)):
        params[f"encoder.{i}.weight"] = kaiming((w, cin, k, k), cin * k * k)
        params[f"encoder.{i}.bias"] = np.zeros(w, dtype=dtype)
        cin = w
    d, k = config.latent_dim, config.transition_kernel
    params["transition.conv.weight"] = kaiming((d, cin, k, k), cin * k * k)
    params["transition.conv.bias"] = np.zeros(d, dtype=dtype)
    params["transition.bn.gamma"] = rng.uniform(0.0, 1.0, size=d).astype(dtype)
    params["transition.bn.beta"] = np.zeros(d, dtype=dtype)
    params["sampling.v"] = rng.uniform(0.0, 1.0, size=d).astype(dtype)
    params["classifier.weight"] = kaiming((d, config.n_labels), d)
    params["classifier.bias"] = np.zeros(config.n_labels, dtype=dtype)
    buffers = {
        "transition.bn.running_mean": np.zeros(d, dtype=dtype),
        "transition.bn.running_var": np.ones(d, dtype=dtype),
    }
    return DgcModel(config, params, buffers)


class ParamScope:
    """Parameter lookup that puts each array on the tape the first time it is used.

    ``overrides`` substitutes ready-made tensors for named parameters, which
    lets a caller differentiate with respect to one parameter in isolation.
    """

    def __init__(self, model: DgcModel, tape: Tape | None, overrides: dict[str, Tensor] | None = None):
        self.model = model
        self.tape = tape
        self._cache: dict[str, Tensor] = dict(overrides or {})

    def __call__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            value = self.model.params[name]
            t = self.tape.param(name, value) if self.tape is not None else Tensor(value)
            self._cache[name] = t
        return t

    def layer(self, prefix: str, *keys: str) -> LayerParams:
        return LayerParams({k: self(f"{prefix}.{k}") for k in keys})


def _bind(model: DgcModel, tape) -> ParamScope:
    return tape if isinstance(tape, ParamScope) else ParamScope(model, tape)


def _check_images(model: DgcModel, images: Tensor) -> None:
    enc = model.config.encoder
    expected = (enc.in_channels, enc.image_size, enc.image_size)
    if images.data.ndim != 4 or images.shape[1:] != expected:
        raise ad.ShapeError(f"images have shape {images.shape}, model expects N x {expected}")


def encode(model: DgcModel, images, bn_mode: str = "eval", tape: Tape | None = None) -> Tensor:
    """Latent mean: conv stages, then transition conv -> batch-norm -> global max-pool."""
    p = _bind(model, tape)
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.dtype))
    _check_images(model, x)
    enc = model.config.encoder
    act = _ACTIVATIONS[enc.activation]
    for i, (k, s) in enumerate(zip(enc.kernels, enc.strides)):
        before, after = enc.stage_padding(x.shape[2], k, s)
        x = ad.pad2d(x, before, after)
        x = act(ad.conv2d(x, p.layer(f"encoder.{i}", "weight", "bias"), stride=s))
    k = model.config.transition_kernel
    x = ad.conv2d(x, p.layer("transition.conv", "weight", "bias"), stride=1, padding=k // 2)
    running = {
        "running_mean": model.buffers["transition.bn.running_mean"],
        "running_var": model.buffers["transition.bn.running_var"],
    }
    x = ad.batchnorm(
        x,
        p.layer("transition.bn", "gamma", "beta"),
        mode=bn_mode,
        momentum=model.config.bn_momentum,
        eps=model.config.bn_eps,
        running=running,
    )
    if bn_mode == "train":
        model.buffers["transition.bn.running_mean"] = running["running_mean"]
        model.buffers["transition.bn.running_var"] = running["running_var"]
    return ad.global_max_pool(x)


def sample_latent(mu: Tensor, v: Tensor, noise) -> Tensor:
    """Reparameterized draw ``z = mu + noise * exp(v / 2)``, one noise row per sample."""
    noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=mu.dtype))
    if noise.shape != mu.shape or v.shape != (mu.shape[1],):
        raise ad.ShapeError(f"sample_latent: mu {mu.shape}, v {v.shape}, noise {noise.shape}")
    sigma = ad.exp(ad.scale(v, 0.5))
    if sigma.tape is not None:
        sigma.tape.mark("sampling.sigma", sigma)
    return ad.add(mu, ad.mul(noise, ad.broadcast_rows(sigma, mu.shape[0])))


def classifier_logits(z: Tensor, params: LayerParams) -> Tensor:
    return ad.affine(z, params)


def classify(z: Tensor, params: LayerParams) -> Tensor:
    """Per-label probabilities ``sigmoid(z @ W + b)``."""
    return ad.sigmoid(classifier_logits(z, params))


def _head(model: DgcModel, p: ParamScope, z: Tensor, logits: bool) -> Tensor:
    out = classifier_logits(z, p.layer("classifier", "weight", "bias"))
    return out if logits else ad.sigmoid(out)


def forward_train(
    model: DgcModel,
    images,
    noise,
    tape: Tape | None = None,
    bn_mode: str = "train",
    logits: bool = False,
) -> Tensor:
    """Training-time pass with a sampled latent."""
    if model.mode != GENERATIVE:
        raise ValueError("forward_train needs a generative model; use forward_baseline")
    p = _bind(model, tape)
    mu = encode(model, images, bn_mode=bn_mode, tape=p)
    z = sample_latent(mu, p("sampling.v"), noise)
    return _head(model, p, z, logits)


def forward_eval(model: DgcModel, images, tape: Tape | None = None, logits: bool = False) -> Tensor:
    """Inference with the latent mean in place of a sample; consumes no randomness."""
    p = _bind(model, tape)
    mu = encode(model, images, bn_mode="eval", tape=p)
    return _head(model, p, mu, logits)


def forward_baseline(
    model: DgcModel,
    images,
    bn_mode: str = "eval",
    tape: Tape | None = None,
    logits: bool = False,
) -> Tensor:
    """Deterministic classifier: the latent mean feeds the classifier directly."""
    if model.mode != DETERMINISTIC:
        raise ValueError("forward_baseline needs a deterministic model")
    p = _bind(model, tape)
    mu = encode(model, images, bn_mode=bn_mode, tape=p)
    return _head(model, p, mu, logits)


def parameter_names(model: DgcModel) -> Iterable[str]:
    return model.params.keys()
