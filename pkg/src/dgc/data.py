"""Manifests, PGM images, preprocessing, patient-level splits, synthetic data."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

DISEASES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_path: str
    patient_id: str
    labels: tuple[int, ...]


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)
    label_names: tuple[str, ...] = DISEASES

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def targets(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.int64).reshape(len(self.records), self.n_labels)

    def patients(self) -> list[str]:
        """Patient ids in first-appearance order."""
        return list(dict.fromkeys(r.patient_id for r in self.records))

    def subset(self, records: Sequence[Record]) -> "Manifest":
        return Manifest(list(records), self.label_names)


# ------------------------------------------------------------------ manifest


def _data_lines(text: str):
    """CSV lines with their 1-based line numbers, skipping '#' comment lines."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        yield lineno, line


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse a manifest CSV: image_path, patient_id, then one 0/1 column per label."""
    text = Path(path).read_text(encoding="utf-8")
    lines = list(_data_lines(text))
    if not lines:
        raise ManifestError(f"{path}: missing header row")
    header_no, header_line = lines[0]
    header = next(csv.reader([header_line]))
    if header[:2] != ["image_path", "patient_id"] or len(header) < 3:
        raise ManifestError(f"{path}:{header_no}: header must start with image_path,patient_id and list labels")
    label_names = tuple(header[2:])
    records, seen = [], set()
    for lineno, line in lines[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        image_path, patient_id, *raw = row
        if not patient_id:
            raise ManifestError(f"{path}:{lineno}: empty patient id")
        bad = [v for v in raw if v not in ("0", "1")]
        if bad:
            raise ManifestError(f"{path}:{lineno}: label value {bad[0]!r} is not 0 or 1")
        if image_path in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image path {image_path!r}")
        seen.add(image_path)
        records.append(Record(image_path, patient_id, tuple(int(v) for v in raw)))
    return Manifest(records, label_names)


def format_manifest(manifest: Manifest, header_comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in header_comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_path", "patient_id", *manifest.label_names])
    for r in manifest.records:
        w.writerow([r.image_path, r.patient_id, *r.labels])
    return buf.getvalue()


def save_manifest(manifest: Manifest, path, header_comments: Sequence[str] = ()) -> None:
    Path(path).write_text(format_manifest(manifest, header_comments), encoding="utf-8")


# ----------------------------------------------------------------------- PGM


def write_pgm(path, pixels: np.ndarray, comment: str | None = None) -> None:
    """Binary P5, maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ImageFormatError("PGM writer takes a 2-D uint8 array")
    h, w = pixels.shape
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    return parse_pgm(data, str(path))


def parse_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{name}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{name}: non-numeric PGM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise ImageFormatError(f"{name}: need an 8-bit PGM with positive size, got {w}x{h} maxval {maxval}")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise ImageFormatError(f"{name}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


# -------------------------------------------------------------- preprocessing


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping (float64)."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


@dataclass(frozen=True)
class PreprocessConfig:
    resize: int | None = 256
    crop: int | None = 224
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD


def preprocess(pixels: np.ndarray, config: PreprocessConfig = PreprocessConfig(), dtype=np.float64) -> np.ndarray:
    """Resize, center-crop, replicate to 3 channels, scale to [0, 1], normalize.

    ``resize``/``crop`` of ``None`` leave the geometry untouched.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.size == 0:
        raise ImageFormatError(f"preprocess needs a non-empty 2-D image, got shape {pixels.shape}")
    img = pixels.astype(np.float64)
    if config.resize is not None:
        if config.resize < 1:
            raise ImageFormatError(f"degenerate resize target {config.resize}")
        img = bilinear_resize(img, config.resize, config.resize)
    if config.crop is not None:
        if config.crop < 1 or config.crop > min(img.shape):
            raise ImageFormatError(f"crop {config.crop} does not fit image of shape {img.shape}")
        img = center_crop(img, config.crop)
    img = img / 255.0
    mean = np.asarray(config.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(config.std, dtype=np.float64)[:, None, None]
    out = (img[None] - mean) / std
    return out.astype(dtype)


# --------------------------------------------------------------------- split


def split_patient_level(
    manifest: Manifest,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    explicit: Mapping[str, Sequence[str]] | None = None,
) -> tuple[Manifest, ...]:
    """Partition by patient so each patient's images land in exactly one split.

    With ``explicit`` (split name -> patient ids, in output order) the seeded
    shuffle is bypassed.  Patients absent from every list are dropped.
    """
    patients = manifest.patients()
    if explicit is not None:
        known = set(patients)
        assignment: dict[str, int] = {}
        for k, ids in enumerate(explicit.values()):
            for pid in ids:
                if pid not in known:
                    raise ManifestError(f"split list names unknown patient id {pid!r}")
                assignment[pid] = k
        n_splits = len(explicit)
    else:
        fr = np.asarray(fractions, dtype=np.float64)
        if fr.ndim != 1 or np.any(fr <= 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"fractions must be positive and sum to 1, got {list(fractions)}")
        order = np.random.default_rng(seed).permutation(len(patients))
        bounds = np.rint(np.cumsum(fr) * len(patients)).astype(int)
        bounds[-1] = len(patients)
        assignment = {}
        start = 0
        for k, stop in enumerate(bounds):
            for idx in order[start:stop]:
                assignment[patients[idx]] = k
            start = max(start, stop)
        n_splits = len(fr)
    buckets: list[list[Record]] = [[] for _ in range(n_splits)]
    for r in manifest.records:
        k = assignment.get(r.patient_id)
        if k is not None:
            buckets[k].append(r)
    return tuple(manifest.subset(b) for b in buckets)


def read_split_list(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def write_split_list(path, patient_ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in patient_ids), encoding="utf-8")


# ----------------------------------------------------------------- synthetic


# Cycles per image width for the 14 default labels, picked so that every
# pair of gratings has normalized cross-correlation below 0.035.
_DEFAULT_FREQUENCIES = (7.0, 4.0, 6.5, 6.0, 6.0, 6.0, 3.5, 5.5, 7.0, 3.0, 5.0, 3.0, 7.0, 5.5)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    n_labels: int = 14
    prevalence: tuple[float, ...] = (0.1,) * 14
    frequencies: tuple[float, ...] | None = None
    amplitude: float = 0.12
    noise_std: float = 0.03
    n_patients: int | None = None
    images_per_patient: int = 2
    seed: int = 0

    def label_frequencies(self) -> tuple[float, ...]:
        if self.frequencies is not None:
            return self.frequencies
        if self.n_labels == len(_DEFAULT_FREQUENCIES):
            return _DEFAULT_FREQUENCIES
        return tuple(3.0 + 2.0 * (i % 3) for i in range(self.n_labels))

    def validate(self) -> None:
        if len(self.prevalence) != self.n_labels or len(self.label_frequencies()) != self.n_labels:
            raise ValueError("need one prevalence and one frequency per label")
        if any(not 0 < p < 1 for p in self.prevalence):
            raise ValueError("prevalences must lie in (0, 1)")
        if self.image_size < 1 or self.noise_std < 0:
            raise ValueError("invalid synthetic image size or noise level")


def label_pattern(spec: SyntheticSpec, label: int) -> np.ndarray:
    """Unit-amplitude oriented sinusoid for one label, angle ``label * pi / n_labels``."""
    n = spec.image_size
    theta = label * math.pi / spec.n_labels
    f = spec.label_frequencies()[label]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    phase = 2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta)) / n
    return np.cos(phase)


def generate_synthetic(spec: SyntheticSpec, n_images: int, prefix: str = "img") -> tuple[dict[str, np.ndarray], Manifest]:
    """Deterministic images with one oriented grating per present label.

    Intensities are built on the unit scale around mid-gray 0.5 and quantized
    to uint8.  Draw order per image: label Bernoulli draws, then pixel noise.
    Patient ids are assigned round-robin.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    patterns = np.stack([label_pattern(spec, i) for i in range(spec.n_labels)])
    prevalence = np.asarray(spec.prevalence)
    n_patients = spec.n_patients or max(1, -(-n_images // spec.images_per_patient))
    width = len(str(max(n_images - 1, 0)))
    images: dict[str, np.ndarray] = {}
    records = []
    for k in range(n_images):
        labels = (rng.random(spec.n_labels) < prevalence).astype(np.int64)
        img = 0.5 + spec.amplitude * np.tensordot(labels, patterns, axes=1)
        if spec.noise_std > 0:
            img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        path = f"{prefix}_{k:0{width}d}.pgm"
        images[path] = pixels
        records.append(Record(path, f"P{k % n_patients:05d}", tuple(int(v) for v in labels)))
    names = DISEASES if spec.n_labels == len(DISEASES) else tuple(f"label_{i}" for i in range(spec.n_labels))
    return images, Manifest(records, names)


def matched_filter(spec: SyntheticSpec, pixels: np.ndarray) -> np.ndarray:
    """Estimated grating amplitude per label, relative to ``spec.amplitude``."""
    patterns = np.stack([label_pattern(spec, i) for i in range(spec.n_labels)]).reshape(spec.n_labels, -1)
    centered = pixels.astype(np.float64).reshape(-1) / 255.0 - 0.5
    return patterns @ centered / (np.sum(patterns * patterns, axis=1) * spec.amplitude)


# ------------------------------------------------------------------- batches


class ImageStore:
    """Image lookup by manifest path: in-memory arrays, or PGM files under ``root``."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, root: str | os.PathLike | None = None):
        self.arrays = dict(arrays or {})
        self.root = Path(root) if root is not None else None

    def __getitem__(self, path: str) -> np.ndarray:
        arr = self.arrays.get(path)
        if arr is not None:
            return arr
        if self.root is None:
            raise FileNotFoundError(f"image not found: {path}")
        full = self.root / path
        if not full.is_file():
            raise FileNotFoundError(f"image not found: {full}")
        arr = read_pgm(full)
        self.arrays[path] = arr
        return arr


@dataclass
class LabeledBatch:
    images: np.ndarray
    targets: np.ndarray
    paths: list[str]

    def __len__(self) -> int:
        return len(self.paths)


def batch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(
    manifest: Manifest,
    images: ImageStore | Mapping[str, np.ndarray],
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
    preprocess_config: PreprocessConfig = PreprocessConfig(),
    dtype=np.float32,
    cache: dict | None = None,
) -> Iterator[LabeledBatch]:
    """Mini-batches in a seeded per-epoch order; the last batch may be short.

    ``shuffle_seed=None`` keeps manifest order.  ``cache`` (path -> tensor)
    memoizes preprocessing across epochs.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    store = images if isinstance(images, ImageStore) else ImageStore(images)
    order = batch_order(len(manifest), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        recs = [manifest.records[i] for i in order[start:start + batch_size]]
        xs = []
        for r in recs:
            x = cache.get(r.image_path) if cache is not None else None
            if x is None:
                x = preprocess(store[r.image_path], preprocess_config, dtype=dtype)
                if cache is not None:
                    cache[r.image_path] = x
            xs.append(x)
        yield LabeledBatch(
            np.stack(xs),
            np.array([r.labels for r in recs], dtype=np.int64),
            [r.image_path for r in recs],
        )
