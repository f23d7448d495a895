"""Training loop, evaluation, and the binary checkpoint format."""

from __future__ import annotations

import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import Tape
from .config import TrainConfig
from .data import ImageStore, Manifest, batch_iter
from .metrics import RocReport, roc_report
from .model import DETERMINISTIC, GENERATIVE, DgcModel, forward_baseline, forward_eval, forward_train, init_model
from .objective import AdamState, NumericalError, adam_step, weighted_bce_with_logits

logger = logging.getLogger(__name__)

MAGIC = b"DGC1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    model: DgcModel
    epoch: int
    metric: float
    adam: AdamState | None = None
    version: int = FORMAT_VERSION


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mean_auc: float
    wall_seconds: float


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochStats] = field(default_factory=list)
    final_model: DgcModel | None = None


def _dtype(cfg: TrainConfig):
    if cfg.precision not in ("float32", "float64"):
        raise ValueError(f"precision must be float32 or float64, got {cfg.precision!r}")
    return np.dtype(cfg.precision)


def predict(
    model: DgcModel,
    manifest: Manifest,
    images: ImageStore,
    cfg: TrainConfig,
    batch_size: int = 64,
    pixel_noise_std: float = 0.0,
    noise_seed: int = 0,
    cache: dict | None = None,
) -> np.ndarray:
    """Inference probabilities (latent mean, eval batch-norm) in manifest order.

    ``pixel_noise_std`` adds Gaussian noise on the [0, 1] intensity scale to
    every image before it reaches the network.
    """
    rng = np.random.default_rng(noise_seed) if pixel_noise_std > 0 else None
    std = np.asarray(cfg.preprocess.std, dtype=np.float64)[None, :, None, None]
    out = []
    for batch in batch_iter(manifest, images, batch_size, None, 0, cfg.preprocess, model.dtype, cache):
        x = batch.images
        if rng is not None:
            n, _, h, w = x.shape
            noise = rng.normal(0.0, pixel_noise_std, size=(n, 1, h, w))
            x = (x + noise / std).astype(model.dtype)
        out.append(forward_eval(model, x).data)
    n_labels = model.config.n_labels
    return np.concatenate(out) if out else np.zeros((0, n_labels))


def evaluate_model(model, manifest, images, cfg, **kwargs) -> RocReport:
    if manifest.n_labels != model.config.n_labels:
        raise ValueError(f"manifest has {manifest.n_labels} labels, model has {model.config.n_labels}")
    scores = predict(model, manifest, images, cfg, **kwargs)
    return roc_report(scores, manifest.targets(), manifest.label_names)


def evaluate(checkpoint: Checkpoint, manifest: Manifest, images, **kwargs) -> RocReport:
    """ROC report of a checkpoint on every record of ``manifest``."""
    store = images if isinstance(images, ImageStore) else ImageStore(images)
    return evaluate_model(checkpoint.model, manifest, store, checkpoint.config, **kwargs)


def batch_loss(model: DgcModel, batch_images, targets, noise, tape: Tape):
    if model.mode == GENERATIVE:
        logits = forward_train(model, batch_images, noise, tape=tape, logits=True)
    else:
        logits = forward_baseline(model, batch_images, bn_mode="train", tape=tape, logits=True)
    return weighted_bce_with_logits(logits, targets)


def train(
    cfg: TrainConfig,
    train_manifest: Manifest,
    val_manifest: Manifest,
    images,
    on_epoch=None,
) -> TrainResult:
    """Mini-batch Adam training with per-epoch validation and best-model retention."""
    if len(train_manifest) == 0:
        raise TrainingError("empty training set")
    if len(val_manifest) == 0:
        raise TrainingError("empty validation set")
    store = images if isinstance(images, ImageStore) else ImageStore(images)
    dtype = _dtype(cfg)
    model = init_model(cfg.model, cfg.init_seed, dtype=dtype)
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    noise_rng = np.random.default_rng(cfg.noise_seed)
    d = cfg.model.latent_dim
    train_cache: dict = {}
    val_cache: dict = {}

    history: list[EpochStats] = []
    best: Checkpoint | None = None
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        batches = batch_iter(
            train_manifest, store, cfg.batch_size, cfg.shuffle_seed, epoch, cfg.preprocess, dtype, train_cache
        )
        for b, batch in enumerate(batches):
            noise = None
            if model.mode == GENERATIVE:
                noise = noise_rng.standard_normal((len(batch), d)).astype(dtype)
            tape = Tape()
            try:
                loss = batch_loss(model, batch.images, batch.targets, noise, tape)
            except NumericalError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            grads = tape.backward(loss)
            adam_step(model.params, grads, state)
            total += float(loss.data)
        report = evaluate_model(model, val_manifest, store, cfg, cache=val_cache)
        metric = report.mean_auc
        if math.isnan(metric):
            raise TrainingError("validation set has no label with both classes")
        stats = EpochStats(epoch, total, metric, time.perf_counter() - t0)
        history.append(stats)
        logger.info("epoch %d loss %.4f val mean AUC %.4f", epoch, total, metric)
        if on_epoch is not None:
            on_epoch(stats)
        if best is None or metric > best.metric:
            best = Checkpoint(cfg, model.copy(), epoch, metric)
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return TrainResult(best, history, model)


def history_csv(history: list[EpochStats], header: dict | None = None) -> str:
    buf = io.StringIO()
    for k in sorted(header or {}):
        buf.write(f"# {k}={header[k]}\n")
    buf.write("epoch,train_loss,val_mean_auc,wall_seconds\n")
    for h in history:
        buf.write(f"{h.epoch},{h.train_loss!r},{h.val_mean_auc!r},{h.wall_seconds:.3f}\n")
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoint


def _meta_items(ckpt: Checkpoint) -> dict[str, str]:
    items = {f"config.{k}": v for k, v in cfgmod.train_items(ckpt.config).items()}
    items["epoch"] = str(ckpt.epoch)
    items["metric"] = repr(float(ckpt.metric))
    items["adam"] = "1" if ckpt.adam is not None else "0"
    if ckpt.adam is not None:
        items["adam.t"] = str(ckpt.adam.t)
    return items


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = list(ckpt.model.params.items()) + list(ckpt.model.buffers.items())
    if ckpt.adam is not None:
        for name in ckpt.model.params:
            if name in ckpt.adam.m:
                arrays.append((f"adam.m.{name}", ckpt.adam.m[name]))
                arrays.append((f"adam.v.{name}", ckpt.adam.v[name]))
    return arrays


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in sorted(_meta_items(ckpt).items())).encode("utf-8")
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(meta)), meta]
    arrays = _arrays(ckpt)
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"corrupt checkpoint: truncated in {section}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "header") != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic in header")
    version = r.u32("header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    meta_len = r.u32("metadata")
    try:
        meta_text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("corrupt checkpoint: metadata is not UTF-8") from None
    meta = {}
    for line in meta_text.splitlines():
        if "=" not in line:
            raise CheckpointError(f"corrupt checkpoint: bad metadata line {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    try:
        config = cfgmod.train_config_from_items(
            {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
        )
        epoch, metric = int(meta["epoch"]), float(meta["metric"])
        has_adam = meta.get("adam") == "1"
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: metadata incomplete ({exc})") from None

    arrays: dict[str, np.ndarray] = {}
    for i in range(r.u32("array table")):
        section = f"array record {i}"
        name = r.take(r.u32(section), section).decode("utf-8", errors="replace")
        section = f"array {name!r}"
        rank = r.u32(section)
        if rank > 8:
            raise CheckpointError(f"corrupt checkpoint: implausible rank {rank} in {section}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, section))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count, section), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("corrupt checkpoint: trailing bytes after array table")

    template = init_model(config.model, 0, dtype=np.float32)
    for group in (template.params, template.buffers):
        for name, ref in group.items():
            arr = arrays.get(name)
            if arr is None or arr.shape != ref.shape:
                raise CheckpointError(f"corrupt checkpoint: array {name!r} missing or mis-shaped")
            group[name] = arr
    adam = None
    if has_adam:
        adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        adam.t = int(meta.get("adam.t", "0"))
        for name in template.params:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"]
                adam.v[name] = arrays[f"adam.v.{name}"]
    return Checkpoint(config, template, epoch, metric, adam, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "EpochStats",
    "TrainResult",
    "TrainingError",
    "train",
    "evaluate",
    "evaluate_model",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "parse_checkpoint",
    "history_csv",
    "DETERMINISTIC",
    "GENERATIVE",
]
