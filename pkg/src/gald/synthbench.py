"""Synthetic large-pattern / small-pattern segmentation benchmark and IoU metrics.

Scenes contain background (0), large blobs (1) and thin structures (2): thin
lines plus the one-pixel inner boundary ring of every blob. A per-image,
per-channel intensity offset shared by all classes makes absolute brightness
unreliable, so classifying the inside of a large region benefits from
image-level context while thin structures stay locally visible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptFile, LabelOutOfRange, ShapeMismatch, SpecInfeasible
from .gtf import load_gtf, save_gtf

NUM_CLASSES = 3
MAX_REJECTIONS = 1000


@dataclass
class SceneSpec:
    size: int = 64
    blobs: Tuple[int, int] = (1, 3)
    blob_area: Tuple[float, float] = (0.10, 0.40)
    lines: Tuple[int, int] = (1, 3)
    line_width: Tuple[int, int] = (1, 2)
    intensities: Tuple[float, float, float] = (0.2, 0.7, 0.5)
    channels: int = 3
    jitter: float = 0.25
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("blobs", "blob_area", "lines", "line_width", "intensities"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SegSample:
    image: np.ndarray  # C x H x W float
    label: np.ndarray  # H x W int


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _blob_mask(rng: np.random.Generator, size: int, area_frac: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    aspect = rng.uniform(0.5, 2.0)
    area = area_frac * size * size
    if rng.random() < 0.5:
        h = np.sqrt(area / aspect)
        w = area / h
        cy = rng.uniform(h / 2, size - h / 2) if h < size else size / 2
        cx = rng.uniform(w / 2, size - w / 2) if w < size else size / 2
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    a = np.sqrt(area / (np.pi * aspect))  # semi-axis along y
    b = area / (np.pi * a)
    cy = rng.uniform(a, size - a) if 2 * a < size else size / 2
    cx = rng.uniform(b, size - b) if 2 * b < size else size / 2
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def _inner_ring(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=True)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def _line_mask(rng: np.random.Generator, size: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    while True:
        p0 = rng.uniform(0, size, 2)
        p1 = rng.uniform(0, size, 2)
        if np.hypot(*(p1 - p0)) >= size / 3:
            break
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return dist <= width / 2.0


def _draw_labels(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    size = spec.size
    label = np.zeros((size, size), np.int64)
    n_blobs = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    total = rng.uniform(*spec.blob_area)
    shares = rng.dirichlet(np.ones(n_blobs)) * total
    blobs = [_blob_mask(rng, size, max(s, 0.02)) for s in shares]
    union = np.logical_or.reduce(blobs)
    coverage = union.mean()
    if not spec.blob_area[0] <= coverage <= spec.blob_area[1]:
        return None
    label[union] = 1
    for b in blobs:
        label[_inner_ring(b)] = 2
    for _ in range(int(rng.integers(spec.lines[0], spec.lines[1] + 1))):
        width = int(rng.integers(spec.line_width[0], spec.line_width[1] + 1))
        label[_line_mask(rng, size, width)] = 2
    return label


def _render(rng: np.random.Generator, spec: SceneSpec, label: np.ndarray) -> np.ndarray:
    base = np.asarray(spec.intensities)[label]  # H x W
    offset = rng.uniform(-spec.jitter, spec.jitter, size=(spec.channels, 1, 1))
    noise = rng.normal(0.0, spec.noise, size=(spec.channels,) + label.shape)
    return base[None] + offset + noise


def generate_one(spec: SceneSpec, index: int) -> SegSample:
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(MAX_REJECTIONS):
        label = _draw_labels(rng, spec)
        if label is None or len(np.unique(label)) < NUM_CLASSES:
            continue
        return SegSample(_render(rng, spec, label), label)
    raise SpecInfeasible(f"no valid scene for index {index} after {MAX_REJECTIONS} attempts")


def generate(spec: SceneSpec, n: int, start: int = 0) -> List[SegSample]:
    """Samples ``start .. start+n-1``; each index has its own derived rng stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_one(spec, start + i) for i in range(n)]


def class_shares(samples: Sequence[SegSample], num_classes: int = NUM_CLASSES) -> list:
    counts = np.zeros(num_classes, np.int64)
    for s in samples:
        counts += np.bincount(s.label.reshape(-1), minlength=num_classes)[:num_classes]
    return (counts / counts.sum()).tolist()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # K x K, rows = ground truth

    @classmethod
    def empty(cls, num_classes: int = NUM_CLASSES) -> "EvalReport":
        return cls(np.zeros((num_classes, num_classes), np.int64))

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def per_class_iou(self) -> list:
        """IoU per class; None marks classes absent from both prediction and ground truth."""
        cm = self.confusion
        tp = np.diag(cm)
        union = cm.sum(axis=0) + cm.sum(axis=1) - tp
        return [float(t / u) if u > 0 else None for t, u in zip(tp, union)]

    @property
    def miou(self) -> float:
        ious = [v for v in self.per_class_iou if v is not None]
        return float(np.mean(ious)) if ious else 0.0

    @property
    def pixel_acc(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.confusion + other.confusion)

    def to_dict(self, digits: int = 6) -> dict:
        r = lambda v: None if v is None else round(v, digits)  # noqa: E731
        return {
            "confusion": self.confusion.tolist(),
            "per_class_iou": [r(v) for v in self.per_class_iou],
            "miou": r(self.miou),
            "pixel_acc": r(self.pixel_acc),
        }


def accumulate(report: EvalReport, pred, label, ignore_index: Optional[int] = None) -> EvalReport:
    pred = np.asarray(pred).astype(np.int64)
    label = np.asarray(label).astype(np.int64)
    if pred.shape != label.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and label {label.shape} differ")
    k = report.num_classes
    keep = label != ignore_index if ignore_index is not None else np.ones(label.shape, bool)
    p, l = pred[keep], label[keep]
    if p.size and (p.min() < 0 or p.max() >= k or l.min() < 0 or l.max() >= k):
        raise LabelOutOfRange(f"values outside [0, {k})")
    report.confusion += np.bincount(l * k + p, minlength=k * k).reshape(k, k)
    return report


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def save_dataset(samples: Sequence[SegSample], directory, spec: Optional[SceneSpec] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_gtf(d / f"{i:04d}.img.gtf", s.image)
        save_gtf(d / f"{i:04d}.lab.gtf", s.label)
    index = {
        "count": len(samples),
        "spec": spec.to_dict() if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
    }
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_dataset(directory) -> List[SegSample]:
    d = Path(directory)
    try:
        index = json.loads((d / "index.json").read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as e:
        raise CorruptFile(f"{d}: unreadable index ({e})") from None
    count = index.get("count")
    images = sorted(d.glob("*.img.gtf"))
    labels = sorted(d.glob("*.lab.gtf"))
    if not isinstance(count, int) or len(images) != count or len(labels) != count:
        raise CorruptFile(f"{d}: index count {count} but {len(images)} images / {len(labels)} labels")
    size = (index.get("spec") or {}).get("size")
    out = []
    for i in range(count):
        img = load_gtf(d / f"{i:04d}.img.gtf")
        lab = load_gtf(d / f"{i:04d}.lab.gtf")
        if img.ndim != 3 or lab.shape != img.shape[1:]:
            raise CorruptFile(f"{d}: sample {i} image {img.shape} / label {lab.shape} mismatch")
        if size is not None and lab.shape != (size, size):
            raise CorruptFile(f"{d}: sample {i} has shape {lab.shape}, index says {size}x{size}")
        if not np.array_equal(lab, np.round(lab)):
            raise CorruptFile(f"{d}: sample {i} labels are not integers")
        out.append(SegSample(img, lab.astype(np.int64)))
    return out
