"""Deterministic synthetic detection dataset.

Images are 3x64x64 float arrays holding one to three non-overlapping filled
shapes (circle, square, triangle, cross) on a noisy colour-gradient
background.  Every box is integer-aligned and equals the pixel extent of the
shape drawn into it.

On disk a dataset is a directory with

``images.lcpt``
    magic ``LCPT``, version u32, count u32, then per image u32 C, H, W and
    C*H*W little-endian float32 pixels.
``annotations.jsonl``
    one ``{"id", "boxes", "labels"}`` object per line.
``manifest.json``
    the generating manifest (informational).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .boxes import BBox
from .seeding import rng_for

IMAGES_FILE = "images.lcpt"
ANNOTATIONS_FILE = "annotations.jsonl"
MANIFEST_FILE = "manifest.json"
IMAGE_MAGIC = b"LCPT"
IMAGE_VERSION = 1

CLASS_NAMES = ("circle", "square", "triangle", "cross")


class FormatError(ValueError):
    """Malformed dataset or checkpoint file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Sample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    boxes: list[BBox]
    labels: list[int]  # 1..num_classes-1; 0 is background

    def box_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.boxes], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    count: int = 500
    split: str = "train"
    class_names: tuple[str, ...] = CLASS_NAMES
    image_size: int = 64
    size_range: tuple[int, int] = (12, 28)
    max_objects: int = 3
    overlap: str = "none"

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        d["size_range"] = list(self.size_range)
        return d


# -- rendering --------------------------------------------------------------

def shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Boolean [h,w] mask of a shape filling a w x h cell edge to edge."""
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    if kind == "square":
        return np.ones((h, w), bool)
    if kind == "circle":
        rx, ry = w / 2.0, h / 2.0
        return ((xs - rx) / rx) ** 2 + ((ys - ry) / ry) ** 2 <= 1.0
    if kind == "triangle":
        # apex row centred at the top, full-width base on the bottom row
        frac = (np.arange(h)[:, None] + 1.0) / h
        half = np.maximum(0.5, frac * w / 2.0)
        return np.abs(xs - w / 2.0) <= half
    if kind == "cross":
        tw, th = max(1, round(w / 3)), max(1, round(h / 3))
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m = np.zeros((h, w), bool)
        m[y0 : y0 + th, :] = True
        m[:, x0 : x0 + tw] = True
        return m
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, size)
    base = rng.uniform(0.15, 0.45, size=(3, 1, 1))
    gx = rng.uniform(-0.15, 0.15, size=(3, 1, 1)) * grid[None, None, :]
    gy = rng.uniform(-0.15, 0.15, size=(3, 1, 1)) * grid[None, :, None]
    noise = rng.normal(0.0, 0.03, size=(3, size, size))
    return base + gx + gy + noise


def _overlaps(box: tuple[int, int, int, int], placed: list[tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    # one pixel of clearance keeps every shape's extent unoccluded
    return any(x1 < b[2] + 1 and b[0] < x2 + 1 and y1 < b[3] + 1 and b[1] < y2 + 1 for b in placed)


def render_sample(manifest: DatasetManifest, index: int) -> Sample:
    """Draw sample ``index``; randomness depends only on (seed, split, index)."""
    rng = rng_for(manifest.seed, f"data:{manifest.split}:{index}")
    size = manifest.image_size
    lo, hi = manifest.size_range
    n_classes = len(manifest.class_names)
    img = _background(rng, size)
    n_obj = int(rng.integers(1, manifest.max_objects + 1))
    first = int(rng.integers(n_classes))
    placed: list[tuple[int, int, int, int]] = []
    labels: list[int] = []
    for j in range(n_obj):
        for _ in range(100):
            w = int(rng.integers(lo, hi + 1))
            h = int(np.clip(round(w * rng.uniform(0.75, 1.33)), lo, hi))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if manifest.overlap != "none" or not _overlaps(box, placed):
                break
        else:
            continue
        cls = (first + j) % n_classes
        mask = shape_mask(manifest.class_names[cls], w, h)
        bg_mean = img[:, y1 : y1 + h, x1 : x1 + w].mean(axis=(1, 2))
        while True:
            color = rng.uniform(0.0, 1.0, size=3)
            if np.abs(color - bg_mean).mean() > 0.3:
                break
        region = img[:, y1 : y1 + h, x1 : x1 + w]
        region[:, mask] = color[:, None] + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
        placed.append(box)
        labels.append(cls + 1)
    image = np.clip(img, 0.0, 1.0).astype(np.float32)
    boxes = [BBox(*map(float, b)) for b in placed]
    return Sample(image=image, boxes=boxes, labels=labels)


# -- serialisation ----------------------------------------------------------

def annotation_line(idx: int, sample: Sample) -> str:
    rec = {
        "id": idx,
        "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in sample.boxes],
        "labels": [int(l) for l in sample.labels],
    }
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(samples: list[Sample], out: str | Path, manifest: DatasetManifest | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / IMAGES_FILE, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<II", IMAGE_VERSION, len(samples)))
        for s in samples:
            img = np.ascontiguousarray(s.image, dtype="<f4")
            fh.write(struct.pack("<III", *img.shape))
            fh.write(img.tobytes())
    with open(out / ANNOTATIONS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for i, s in enumerate(samples):
            fh.write(annotation_line(i, s) + "\n")
    if manifest is not None:
        (out / MANIFEST_FILE).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return out


def generate(manifest: DatasetManifest, out: str | Path) -> Path:
    """Render ``manifest.count`` samples and write them under ``out``."""
    if manifest.count < 1:
        raise ValueError("count must be >= 1")
    samples = [render_sample(manifest, i) for i in range(manifest.count)]
    return write_dataset(samples, out, manifest)


def _read_images(path: Path) -> Iterator[np.ndarray]:
    buf = path.read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated image header", len(buf))
    if buf[:4] != IMAGE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {IMAGE_MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != IMAGE_VERSION:
        raise FormatError(f"unsupported image file version {version}", 4)
    pos = 12
    for _ in range(count):
        if pos + 12 > len(buf):
            raise FormatError("truncated image record header", pos)
        c, h, w = struct.unpack_from("<III", buf, pos)
        pos += 12
        nbytes = 4 * c * h * w
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated pixel payload ({c}x{h}x{w})", pos)
        yield np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last image", pos)


def load(path: str | Path) -> list[Sample]:
    """Read a dataset directory written by :func:`generate`, in stored order."""
    path = Path(path)
    images = list(_read_images(path / IMAGES_FILE))
    samples = []
    offset = 0
    with open(path / ANNOTATIONS_FILE, "rb") as fh:
        lines = fh.read().split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if len(lines) != len(images):
        raise FormatError(f"{len(lines)} annotation records for {len(images)} images", offset)
    for i, (raw, img) in enumerate(zip(lines, images)):
        try:
            rec = json.loads(raw)
            boxes = [BBox(*map(float, b)) for b in rec["boxes"]]
            labels = [int(l) for l in rec["labels"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad annotation record {i}: {exc}", offset) from None
        if rec.get("id") != i or len(boxes) != len(labels):
            raise FormatError(f"inconsistent annotation record {i}", offset)
        samples.append(Sample(image=img, boxes=boxes, labels=labels))
        offset += len(raw) + 1
    return samples


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)
