"""Image ingestion, labeled-object cropping, deterministic splits and batching.

Pixel conventions used throughout the package:
  storage / interchange  -> float HWC in [0, 1]
  model-facing           -> float NCHW in [-1, 1]
Conversions between the two are always explicit (`to_model_range`,
`to_storage_range`), never implied by a consumer.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageOps, UnidentifiedImageError

from .errors import (
    DecodeError,
    EmptyDatasetError,
    ParseError,
    SplitError,
    ValidationError,
)

log = logging.getLogger(__name__)

# Alphabetical; label files index into this order.
CLASS_NAMES = ("bolt", "flange", "hex_nut", "lead_block", "pipe")

DOMAINS = ("uw", "lab")
PROVENANCES = ("real", "fake", "rebuild")

RASTER_SUFFIXES = (".png", ".jpg", ".jpeg")


def round_half_up(x: float) -> int:
    # Python's round() is banker's rounding; pixel rects need the
    # deterministic half-up convention instead.
    return int(math.floor(x + 0.5))


def to_model_range(x: np.ndarray) -> np.ndarray:
    """[0,1] HWC (or batch of HWC) -> [-1,1] NCHW float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) * 2.0 - 1.0


def to_storage_range(y: np.ndarray) -> np.ndarray:
    """[-1,1] NCHW -> [0,1] HWC (batch dim preserved; squeezed if singleton input)."""
    y = np.asarray(y)
    out = np.clip((y.transpose(0, 2, 3, 1) + 1.0) * 0.5, 0.0, 1.0)
    return out.astype(np.float32)


def validate_image(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValidationError(f"expected HxWx{{1,3}} image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"zero-dimension image: shape {arr.shape}")
    return arr


def load_image(path, ensure_rgb: bool = False) -> np.ndarray:
    """Decode a raster file to float32 HWC in [0,1].

    EXIF orientation is normalized at decode time; no other metadata is
    honored.  `ensure_rgb` replicates a single gray channel to three.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = ImageOps.exif_transpose(im)
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image file: {path}") from exc
    arr = validate_image(arr)
    out = arr.astype(np.float32) / 255.0
    if ensure_rgb and out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    return out


def save_image(arr: np.ndarray, path) -> None:
    """Write a [0,1] HWC array as an 8-bit PNG/JPEG (by extension)."""
    arr = validate_image(np.asarray(arr))
    u8 = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path)


def resize_image(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [0,1] HWC float array (channel by channel)."""
    arr = validate_image(arr)
    if arr.shape[:2] == (height, width):
        return arr.astype(np.float32, copy=False)
    chans = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(arr[:, :, c], dtype=np.float32), mode="F").resize(
                (width, height), Image.BILINEAR
            )
        )
        for c in range(arr.shape[2])
    ]
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0)


def resize_short_side_center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize of the short side to `size`, then center crop."""
    arr = validate_image(arr)
    h, w = arr.shape[:2]
    if h <= w:
        nh, nw = size, max(size, round_half_up(w * size / h))
    else:
        nh, nw = max(size, round_half_up(h * size / w)), size
    resized = resize_image(arr, nh, nw)
    y0 = (nh - size) // 2
    x0 = (nw - size) // 2
    return resized[y0 : y0 + size, x0 : x0 + size]


@dataclass
class DomainImage:
    """One image tagged with its domain and how it came to exist."""

    source_id: str
    domain: str
    provenance: str = "real"
    image: np.ndarray | None = None
    path: Path | None = None
    checkpoint_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValidationError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.provenance not in PROVENANCES:
            raise ValidationError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}"
            )
        if self.provenance != "real" and not self.checkpoint_id:
            raise ValidationError(
                f"{self.provenance!r} image {self.source_id!r} requires a checkpoint_id"
            )
        if self.image is None and self.path is None:
            raise ValidationError(f"image {self.source_id!r} has neither pixels nor a path")
        if self.image is not None:
            self.image = validate_image(self.image)

    def pixels(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return load_image(self.path)


@dataclass
class DomainDataset:
    items: list
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        if len(self.class_names) != 5:
            raise ValidationError(f"expected 5 class names, got {len(self.class_names)}")
        ids = [it.source_id for it in self.items]
        if len(set(ids)) != len(ids):
            dupes = sorted({s for s in ids if ids.count(s) > 1})
            raise ValidationError(f"duplicate source_id values: {dupes[:5]}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


@dataclass(frozen=True)
class BoundingBoxLabel:
    """Normalized center/size box: all four fractions in (0,1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not 0 <= self.class_id <= 4:
            raise ValidationError(f"class_id must be in [0,4], got {self.class_id}")
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must lie in (0,1], got {v}")


def scan_dataset(root, domain: str) -> DomainDataset:
    """Recursively collect raster files under `root`, ordered by relative path."""
    root = Path(root)
    paths = sorted(
        (p for p in root.rglob("*") if p.suffix.lower() in RASTER_SUFFIXES),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    if not paths:
        raise EmptyDatasetError(f"no raster files found under {root}")
    items = [
        DomainImage(
            source_id=p.relative_to(root).as_posix(),
            domain=domain,
            provenance="real",
            path=p,
        )
        for p in paths
    ]
    return DomainDataset(items=items)


def parse_labels(path) -> list:
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(
                    f"{path}:{lineno}: expected 5 fields `class cx cy w h`, got {len(parts)}"
                )
            try:
                cid = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= cid <= 4:
                raise ValidationError(f"{path}:{lineno}: class_id {cid} outside [0,4]")
            try:
                out.append(BoundingBoxLabel(cid, cx, cy, w, h))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


def crop_rect(label: BoundingBoxLabel, width: int, height: int):
    """Pixel rect (x0, y0, x1, y1): half-up rounded fractional extents, clamped."""
    x0 = round_half_up((label.cx - label.w / 2.0) * width)
    y0 = round_half_up((label.cy - label.h / 2.0) * height)
    x1 = round_half_up((label.cx + label.w / 2.0) * width)
    y1 = round_half_up((label.cy + label.h / 2.0) * height)
    x0, x1 = max(0, x0), min(width, x1)
    y0, y1 = max(0, y0), min(height, y1)
    return x0, y0, x1, y1


def crop_objects(image: np.ndarray, labels, warnings: list | None = None) -> list:
    """Cut one (class_id, crop) per label, in label order.

    Rects that collapse to zero area after rounding are skipped; each skip
    appends a record to `warnings` when a collector list is supplied.
    """
    image = validate_image(image)
    height, width = image.shape[:2]
    crops = []
    for k, lb in enumerate(labels):
        x0, y0, x1, y1 = crop_rect(lb, width, height)
        if x1 <= x0 or y1 <= y0:
            record = {
                "label_index": k,
                "class_id": lb.class_id,
                "reason": f"zero-area rect ({x0},{y0},{x1},{y1}) at {width}x{height}",
            }
            if warnings is not None:
                warnings.append(record)
            log.warning("skipping crop %d: %s", k, record["reason"])
            continue
        crops.append((lb.class_id, image[y0:y1, x0:x1]))
    return crops


def _crop_stem(source_id: str) -> str:
    stem = source_id.rsplit(".", 1)[0] if "." in os.path.basename(source_id) else source_id
    return stem.replace("/", "_")


def export_object_crops(image_root, out_root, class_names=CLASS_NAMES,
                        labels_root=None) -> dict:
    """Crop every labeled object under `image_root` into a class-keyed tree.

    Images pair with `.txt` label files sharing their basename — next to the
    image, or mirrored under `labels_root` when given; files without one are
    recorded as warnings and skipped.  Output layout is
    `out_root/class_name/<source>_k.png` with k the label index.
    """
    image_root = Path(image_root)
    out_root = Path(out_root)
    report = {"images_seen": 0, "images_labeled": 0, "crops_written": 0, "warnings": []}
    ds = scan_dataset(image_root, domain="lab")
    for item in ds:
        report["images_seen"] += 1
        if labels_root is None:
            label_path = item.path.with_suffix(".txt")
        else:
            label_path = (Path(labels_root) / item.path.relative_to(image_root)).with_suffix(".txt")
        if not label_path.exists():
            report["warnings"].append(
                {"source_id": item.source_id, "reason": "missing label file"}
            )
            continue
        labels = parse_labels(label_path)
        report["images_labeled"] += 1
        warnings: list = []
        crops = crop_objects(item.pixels(), labels, warnings=warnings)
        for rec in warnings:
            rec["source_id"] = item.source_id
            report["warnings"].append(rec)
        keep = [k for k in range(len(labels)) if k not in {w["label_index"] for w in warnings}]
        for k, (cid, crop) in zip(keep, crops):
            dest = out_root / class_names[cid] / f"{_crop_stem(item.source_id)}_{k}.png"
            save_image(crop, dest)
            report["crops_written"] += 1
    return report


def split_dataset(ds: DomainDataset, ratio: float, seed: int):
    """Disjoint (train, val) with |train| = round-half-up(ratio * N)."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must lie in (0,1), got {ratio}")
    n = len(ds)
    if n < 2:
        raise SplitError(f"cannot split dataset of size {n}")
    n_train = round_half_up(ratio * n)
    n_train = min(max(n_train, 1), n - 1)  # both sides stay non-empty
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(perm[:n_train].tolist())
    val_idx = sorted(perm[n_train:].tolist())
    train = DomainDataset([ds.items[i] for i in train_idx], ds.class_names)
    val = DomainDataset([ds.items[i] for i in val_idx], ds.class_names)
    return train, val


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """The batch order for an epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(ds, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0):
    """Yield ceil(N / batch_size) lists of items; the short final batch is kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield [ds[int(i)] for i in order[start : start + batch_size]]


def write_manifest(ds: DomainDataset, path, root=None) -> None:
    """Persist class names and item tags as JSON or YAML (by extension)."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    items = []
    for it in ds:
        rel = it.path.relative_to(root).as_posix() if it.path is not None else None
        items.append(
            {
                "source_id": it.source_id,
                "path": rel,
                "domain": it.domain,
                "provenance": it.provenance,
                "checkpoint_id": it.checkpoint_id,
            }
        )
    doc = {"class_names": list(ds.class_names), "items": items}
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        path.write_text(yaml.safe_dump(doc, sort_keys=False))
    else:
        path.write_text(json.dumps(doc, indent=2))


def read_manifest(path, root=None) -> DomainDataset:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    items = [
        DomainImage(
            source_id=d["source_id"],
            domain=d["domain"],
            provenance=d.get("provenance", "real"),
            path=root / d["path"] if d.get("path") else None,
            checkpoint_id=d.get("checkpoint_id"),
        )
        for d in doc["items"]
    ]
    return DomainDataset(items=items, class_names=tuple(doc["class_names"]))
