"""Finite-difference self-test over every primitive, layer, and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import LayerParams, Tensor
from .model import EncoderConfig, ModelConfig, ParamScope, forward_train, init_model, sample_latent
from .objective import weighted_bce_loss, weighted_bce_with_logits

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    report: ad.GradCheckReport


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # random weights keep the reduction from having a degenerate gradient
    return ad.tensor_sum(ad.mul(y, Tensor(w)))


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    cases = []

    def elementwise(name, op, point):
        w = rng.normal(size=op(Tensor(point)).shape)
        cases.append((name, lambda x: _weighted_sum(op(x), w), point))

    a = rng.normal(size=(3, 4))
    other = rng.normal(size=(3, 4))
    elementwise("add", lambda x: ad.add(x, Tensor(other)), a)
    elementwise("sub", lambda x: ad.sub(Tensor(other), x), a)
    elementwise("mul", lambda x: ad.mul(x, x), a)
    elementwise("exp", ad.exp, a)
    elementwise("ln", ad.ln, rng.uniform(0.5, 2.0, size=(3, 4)))
    elementwise("relu", ad.relu, a)
    elementwise("sigmoid", ad.sigmoid, 2 * a)
    elementwise("scale", lambda x: ad.scale(x, -1.7), a)
    b = rng.normal(size=(4, 2))
    elementwise("matmul.left", lambda x: ad.matmul(x, Tensor(b)), a)
    elementwise("matmul.right", lambda x: ad.matmul(Tensor(a), x), b)
    elementwise("broadcast_rows", lambda x: ad.broadcast_rows(x, 3), rng.normal(size=4))

    img = rng.normal(size=(2, 2, 5, 5))
    kern = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)

    def conv(x=None, k=None, bb=None, stride=2, padding=1):
        p = LayerParams({"weight": k if k is not None else Tensor(kern), "bias": bb if bb is not None else Tensor(bias)})
        return ad.conv2d(x if x is not None else Tensor(img), p, stride=stride, padding=padding)

    elementwise("conv2d.input", lambda x: conv(x=x), img)
    elementwise("conv2d.kernel", lambda x: conv(k=x), kern)
    elementwise("conv2d.bias", lambda x: conv(bb=x), bias)
    elementwise("conv2d.input.stride1", lambda x: conv(x=x, stride=1, padding=0), img)
    elementwise("pad2d", lambda x: ad.pad2d(x, 0, 1), img)
    elementwise("pad2d.crop", lambda x: ad.pad2d(x, 1, -2), img)

    gamma = rng.uniform(0.5, 1.5, size=2)
    beta = rng.normal(size=2)
    running = {"running_mean": rng.normal(size=2), "running_var": rng.uniform(0.5, 2, size=2)}

    def bn(x=None, g=None, bt=None, mode="train"):
        p = LayerParams({"gamma": g if g is not None else Tensor(gamma), "beta": bt if bt is not None else Tensor(beta)})
        return ad.batchnorm(x if x is not None else Tensor(img), p, mode=mode, running=dict(running))

    elementwise("batchnorm.input", lambda x: bn(x=x), img)
    elementwise("batchnorm.gamma", lambda x: bn(g=x), gamma)
    elementwise("batchnorm.beta", lambda x: bn(bt=x), beta)
    elementwise("batchnorm.eval.input", lambda x: bn(x=x, mode="eval"), img)
    elementwise("global_max_pool", ad.global_max_pool, img)

    w_aff = rng.normal(size=(4, 3))
    b_aff = rng.normal(size=3)

    def aff(x=None, w=None, bb=None):
        p = LayerParams({"weight": w if w is not None else Tensor(w_aff), "bias": bb if bb is not None else Tensor(b_aff)})
        return ad.affine(x if x is not None else Tensor(a), p)

    elementwise("affine.input", lambda x: aff(x=x), a)
    elementwise("affine.weight", lambda x: aff(w=x), w_aff)
    elementwise("affine.bias", lambda x: aff(bb=x), b_aff)

    mu = rng.normal(size=(3, 4))
    v = rng.uniform(0, 1, size=4)
    eps = rng.normal(size=(3, 4))
    elementwise("sampling.mu", lambda x: sample_latent(x, Tensor(v), eps), mu)
    elementwise("sampling.v", lambda x: sample_latent(Tensor(mu), x, eps), v)

    targets = (rng.random((3, 5)) < 0.3).astype(float)
    targets[0, 0], targets[0, 1] = 1.0, 0.0
    logits = rng.normal(size=(3, 5))
    cases.append(("loss.logits", lambda x: weighted_bce_with_logits(x, targets), logits))
    cases.append(("loss.probs", lambda x: weighted_bce_loss(x, targets), rng.uniform(0.05, 0.95, size=(3, 5))))

    cases.extend(_model_cases(rng))
    return cases


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(widths=(3,), kernels=(3,), strides=(2,), image_size=6, in_channels=2),
        latent_dim=4,
        n_labels=3,
        transition_kernel=3,
    )


def _model_cases(rng: np.random.Generator):
    """Full forward_train + loss, differentiated by each parameter in turn (64-bit)."""
    cfg = tiny_model_config()
    model = init_model(cfg, int(rng.integers(2**31)), dtype=np.float64)
    # nonzero biases so no coordinate sits exactly on a relu kink
    for name, arr in model.params.items():
        if name.endswith("bias") or name.endswith("beta"):
            model.params[name] = rng.normal(scale=0.1, size=arr.shape)
    images = rng.normal(size=(2, cfg.encoder.in_channels, cfg.encoder.image_size, cfg.encoder.image_size))
    noise = rng.normal(size=(2, cfg.latent_dim))
    targets = np.array([[1, 0, 0], [0, 1, 1]], dtype=float)

    def make(name):
        def f(x):
            scope = ParamScope(model, x.tape, overrides={name: x})
            logits = forward_train(model, images, noise, tape=scope, logits=True)
            return weighted_bce_with_logits(logits, targets)

        return f

    return [(f"model.{name}", make(name), model.params[name].copy()) for name in model.params]


def run_suite(seeds: int = 20, step: float = STEP, tolerance: float = TOLERANCE, start_seed: int = 0):
    """Run every check for ``seeds`` random draws; returns (results, seconds)."""
    t0 = time.perf_counter()
    results = []
    for seed in range(start_seed, start_seed + seeds):
        rng = np.random.default_rng(seed)
        for name, fn, point in _cases(rng):
            results.append(CheckResult(name, seed, ad.grad_check(fn, point, step=step, tolerance=tolerance)))
    return results, time.perf_counter() - t0


@dataclass
class CheckSummary:
    max_rel_error: float = 0.0
    passed: bool = True
    checked: int = 0
    kinks: int = 0
    unresolved: int = 0


def summarize(results: list[CheckResult]) -> dict[str, CheckSummary]:
    """Aggregate per check name over seeds."""
    out: dict[str, CheckSummary] = {}
    for r in results:
        s = out.setdefault(r.name, CheckSummary())
        s.max_rel_error = max(s.max_rel_error, r.report.max_rel_error)
        s.passed = s.passed and r.report.passed
        s.checked += r.report.checked
        s.kinks += len(r.report.kinks)
        s.unresolved += len(r.report.unresolved)
    return out
