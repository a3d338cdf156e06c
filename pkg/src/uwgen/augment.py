"""Seed-deterministic classic augmentation and detection-time preprocessing.

Every transform here is a pure function of (input, config, seed): the same
triple always produces the same bytes, which is what makes expanded datasets
reproducible and lets provenance sidecars point back at exact inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import DomainDataset, DomainImage, round_half_up, save_image, validate_image
from .errors import ValidationError

log = logging.getLogger(__name__)

KNOWN_OPS = ("rotate", "hflip", "saturation", "exposure", "noise", "grayscale")

# Rec.601 luma weights; also the gray target that saturation blends against.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise ValidationError(f"{name} must be a finite (lo, hi) range, got {rng_pair}")


@dataclass(frozen=True)
class AugmentConfig:
    ops: tuple = KNOWN_OPS
    rotate_degrees: tuple = (-30.0, 30.0)
    saturation_factor: tuple = (0.5, 1.5)
    exposure_factor: tuple = (0.7, 1.3)
    noise_stddev: tuple = (0.0, 0.05)
    op_probability: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        unknown = [op for op in self.ops if op not in KNOWN_OPS]
        if unknown:
            raise ValidationError(f"unknown augmentation ops {unknown}; valid: {KNOWN_OPS}")
        if not 0.0 <= self.op_probability <= 1.0:
            raise ValidationError(f"op_probability must be in [0,1], got {self.op_probability}")
        _check_range("rotate_degrees", self.rotate_degrees)
        _check_range("saturation_factor", self.saturation_factor)
        _check_range("exposure_factor", self.exposure_factor)
        _check_range("noise_stddev", self.noise_stddev)


@dataclass(frozen=True)
class DetectionPreprocessConfig:
    hflip_prob: float = 0.5
    blur_sigma_range: tuple = (0.0, 1.25)
    salt_pepper_fraction: float = 0.08

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        _check_range("blur_sigma_range", self.blur_sigma_range)
        if self.blur_sigma_range[0] < 0:
            raise ValidationError("blur sigma cannot be negative")
        if not 0.0 <= self.salt_pepper_fraction <= 1.0:
            raise ValidationError(
                f"salt_pepper_fraction must be in [0,1], got {self.salt_pepper_fraction}"
            )


def _uniform(rng, rng_pair) -> float:
    lo, hi = rng_pair
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _require_rgb(x, op):
    if x.shape[2] != 3:
        raise ValidationError(f"{op} needs a 3-channel image, got {x.shape[2]} channels")


def rotate(x, degrees: float):
    """Rotate about the center, keeping dims; exposed corners replicate edges."""
    return ndimage.rotate(
        x, degrees, axes=(1, 0), reshape=False, order=1, mode="nearest"
    ).astype(x.dtype, copy=False)


def hflip(x):
    return x[:, ::-1, :].copy()


def adjust_saturation(x, factor: float):
    if factor == 1.0:
        return x
    _require_rgb(x, "saturation")
    gray = (x.astype(np.float64) @ _LUMA)[:, :, None]
    return (gray + factor * (x - gray)).astype(x.dtype)


def adjust_exposure(x, factor: float):
    if factor == 1.0:
        return x
    return (x * factor).astype(x.dtype)


def add_gaussian_noise(x, stddev: float, rng):
    if stddev == 0.0:
        return x
    return (x + rng.normal(0.0, stddev, x.shape)).astype(x.dtype)


def to_grayscale(x):
    _require_rgb(x, "grayscale")
    gray = (x.astype(np.float64) @ _LUMA).astype(x.dtype)
    return np.repeat(gray[:, :, None], 3, axis=2)


def classic_augment(image: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Apply the enabled ops (each firing with cfg.op_probability) in a fixed
    canonical order, then clamp back into [0,1]."""
    x = validate_image(image)
    if not cfg.ops:
        log.warning("classic_augment called with an empty op set; returning input unchanged")
        return x.copy()
    rng = np.random.default_rng(seed)
    for op in KNOWN_OPS:
        if op not in cfg.ops:
            continue
        if rng.random() >= cfg.op_probability:
            continue
        if op == "rotate":
            x = rotate(x, _uniform(rng, cfg.rotate_degrees))
        elif op == "hflip":
            x = hflip(x)
        elif op == "saturation":
            x = adjust_saturation(x, _uniform(rng, cfg.saturation_factor))
        elif op == "exposure":
            x = adjust_exposure(x, _uniform(rng, cfg.exposure_factor))
        elif op == "noise":
            x = add_gaussian_noise(x, _uniform(rng, cfg.noise_stddev), rng)
        elif op == "grayscale":
            x = to_grayscale(x)
    return np.clip(x, 0.0, 1.0)


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def expand_dataset(
    ds: DomainDataset,
    target_count: int,
    cfg: AugmentConfig,
    seed: int,
    materialize_dir=None,
) -> DomainDataset:
    """Grow a dataset to exactly `target_count` items.

    Originals are kept as-is.  Each extra item takes the next parent
    round-robin (in dataset order), picks one enabled op uniformly at random,
    and applies it; (parent source_id, op list, seed) land in item metadata.
    With `materialize_dir` set, children stream to disk (PNG + JSON sidecar)
    instead of accumulating in memory.
    """
    n = len(ds)
    if target_count < n:
        raise ValidationError(f"target_count {target_count} < dataset size {n}")
    if not cfg.ops:
        raise ValidationError("expand_dataset needs at least one enabled op")
    items = list(ds.items)
    out_dir = Path(materialize_dir) if materialize_dir is not None else None
    for i in range(target_count - n):
        parent = ds[i % n]
        rng = np.random.default_rng([seed, i])
        op = cfg.ops[int(rng.integers(len(cfg.ops)))]
        param_seed = _child_seed(seed, i)
        child_pixels = classic_augment(parent.pixels(), replace(cfg, ops=(op,)), param_seed)
        meta = {"parent": parent.source_id, "ops": [op], "seed": param_seed}
        child = DomainImage(
            source_id=f"aug{i:05d}",
            domain=parent.domain,
            provenance=parent.provenance,
            image=child_pixels,
            checkpoint_id=parent.checkpoint_id,
            meta=meta,
        )
        if out_dir is not None:
            path = export_item(child, out_dir)
            child = replace_pixels_with_path(child, path)
        items.append(child)
    return DomainDataset(items=items, class_names=ds.class_names)


def replace_pixels_with_path(item: DomainImage, path) -> DomainImage:
    return DomainImage(
        source_id=item.source_id,
        domain=item.domain,
        provenance=item.provenance,
        path=Path(path),
        checkpoint_id=item.checkpoint_id,
        meta=item.meta,
    )


def _sanitize(source_id: str) -> str:
    stem = source_id.rsplit(".", 1)[0] if source_id.lower().endswith((".png", ".jpg", ".jpeg")) else source_id
    return stem.replace("/", "_").replace("#", "_")


def export_item(item: DomainImage, out_dir) -> Path:
    """Write one item as PNG plus a JSON provenance sidecar; returns the PNG path."""
    out_dir = Path(out_dir)
    png = out_dir / f"{_sanitize(item.source_id)}.png"
    if png.exists():
        raise ValidationError(f"refusing to overwrite existing output {png}")
    save_image(item.pixels(), png)
    sidecar = {
        "source_id": item.source_id,
        "domain": item.domain,
        "provenance": item.provenance,
        "checkpoint_id": item.checkpoint_id,
        "parent": item.meta.get("parent"),
        "ops": item.meta.get("ops", []),
        "seed": item.meta.get("seed"),
    }
    png.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return png


def export_dataset(ds: DomainDataset, out_dir) -> list:
    """Materialize every item not already on disk under `out_dir`."""
    paths = []
    for item in ds:
        if item.path is not None and Path(item.path).parent == Path(out_dir):
            paths.append(Path(item.path))
            continue
        paths.append(export_item(item, out_dir))
    return paths


def detection_preprocess_with_info(image, cfg: DetectionPreprocessConfig, seed: int):
    """Flip / blur / salt-and-pepper, reporting what was done.

    The info dict carries `flipped` (the detection exporter must rewrite box
    centers when True), the drawn blur `sigma`, and the exact corrupted-pixel
    count `n_corrupted` = round-half-up(fraction * H * W).
    """
    x = validate_image(image).astype(np.float32).copy()
    h, w = x.shape[:2]
    rng = np.random.default_rng(seed)
    flipped = bool(rng.random() < cfg.hflip_prob)
    if flipped:
        x = hflip(x)
    sigma = _uniform(rng, cfg.blur_sigma_range)
    if sigma > 0.0:
        x = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="nearest")
    n_corrupted = round_half_up(cfg.salt_pepper_fraction * h * w)
    if n_corrupted > 0:
        flat = rng.choice(h * w, size=n_corrupted, replace=False)
        values = rng.integers(0, 2, size=n_corrupted).astype(np.float32)
        x[flat // w, flat % w, :] = values[:, None]
    info = {"flipped": flipped, "sigma": sigma, "n_corrupted": int(n_corrupted)}
    return np.clip(x, 0.0, 1.0), info


def detection_preprocess(image, cfg: DetectionPreprocessConfig, seed: int) -> np.ndarray:
    out, _ = detection_preprocess_with_info(image, cfg, seed)
    return out
