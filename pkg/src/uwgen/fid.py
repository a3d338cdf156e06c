"""Frechet-distance evaluation between two embedded image sets.

delta^2 = ||mu1 - mu2||^2 + tr(C1 + C2 - 2 sqrt(C1 C2))

with (mu, C) the feature-wise mean and unbiased covariance of each set.  The
matrix root of the (generally non-symmetric) product C1 C2 is evaluated in the
similarity-equivalent symmetric form sqrt(sqrt(C1) C2 sqrt(C1)), which keeps
the whole computation inside real symmetric eigensolves.

Two embedders are provided: a fixed-seed random-convolution network (64-d)
fast enough for CI, and an optional torchvision InceptionV3 (2048-d pooled
features) matching the standard evaluation protocol.  Published score
magnitudes for that protocol depend on the specific trained generator weights
and are documentation, never test assertions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import DomainDataset, batch_iterator, resize_image, to_model_range
from .errors import RuntimeFailure, ValidationError
from .nn import Conv2d, ReLU, Sequential

_SYMMETRY_TOL = 1e-8
_NEGATIVE_CLAMP = -1e-8
_EPSILON_RETRY = 1e-6


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.cov.shape != (d, d):
            raise ValidationError(
                f"FeatureStats shapes inconsistent: mu {self.mu.shape}, cov {self.cov.shape}"
            )
        if self.n < 2:
            raise ValidationError(f"FeatureStats needs n >= 2, got {self.n}")
        scale = max(1.0, float(np.abs(self.cov).max()))
        if np.abs(self.cov - self.cov.T).max() > _SYMMETRY_TOL * scale:
            raise ValidationError("FeatureStats covariance is not symmetric within tolerance")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class Embedder:
    name: str
    dim: int
    forward: Callable  # list of [0,1] HWC arrays -> (N, dim) float64


def embed(images: DomainDataset, e: Embedder, batch: int = 32) -> np.ndarray:
    """Row i of the result embeds dataset item i."""
    if len(images) < 2:
        raise ValidationError(f"embedding needs at least 2 images, got {len(images)}")
    rows = []
    for group in batch_iterator(images, batch):
        feats = np.asarray(e.forward([item.pixels() for item in group]), dtype=np.float64)
        if feats.ndim != 2 or feats.shape != (len(group), e.dim):
            raise ValidationError(
                f"embedder {e.name!r} returned shape {feats.shape}, "
                f"expected ({len(group)}, {e.dim})"
            )
        rows.append(feats)
    return np.concatenate(rows, axis=0)


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Column means and unbiased (N-1) covariance, symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValidationError(f"feature_stats needs an (N>=2, d) matrix, got {features.shape}")
    mu = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mu=mu, cov=cov, n=features.shape[0])


def merge_stats(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Combine two partial statistics as if their samples were pooled."""
    if a.dim != b.dim:
        raise ValidationError(f"cannot merge stats of dim {a.dim} and {b.dim}")
    n = a.n + b.n
    delta = b.mu - a.mu
    mu = a.mu + delta * (b.n / n)
    scatter = (a.n - 1) * a.cov + (b.n - 1) * b.cov + np.outer(delta, delta) * (a.n * b.n / n)
    cov = scatter / (n - 1)
    return FeatureStats(mu=mu, cov=(cov + cov.T) / 2.0, n=n)


def sqrtm_psd(a: np.ndarray, symmetry_tol: float = _SYMMETRY_TOL) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues (roundoff leakage on PSD inputs) clamp to zero.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"sqrtm_psd needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > symmetry_tol * scale:
        raise ValidationError("sqrtm_psd input is not symmetric within tolerance")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0


def _trace_sqrt_product(c1: np.ndarray, c2: np.ndarray) -> float:
    s1 = sqrtm_psd(c1)
    inner = s1 @ c2 @ s1
    return float(np.trace(sqrtm_psd((inner + inner.T) / 2.0)))


def frechet_with_info(s1: FeatureStats, s2: FeatureStats):
    """delta^2 plus a flag telling whether the epsilon retry was needed."""
    if s1.dim != s2.dim:
        raise ValidationError(f"stats dims differ: {s1.dim} vs {s2.dim}")
    mean_term = float(np.sum((s1.mu - s2.mu) ** 2))
    epsilon_applied = False
    try:
        trace_cross = _trace_sqrt_product(s1.cov, s2.cov)
        c1, c2 = s1.cov, s2.cov
    except np.linalg.LinAlgError:
        epsilon_applied = True
        eye = np.eye(s1.dim)
        c1 = s1.cov + _EPSILON_RETRY * eye
        c2 = s2.cov + _EPSILON_RETRY * eye
        trace_cross = _trace_sqrt_product(c1, c2)
    value = mean_term + float(np.trace(c1) + np.trace(c2)) - 2.0 * trace_cross
    if not math.isfinite(value):
        raise RuntimeFailure(f"frechet distance evaluated to a non-finite value: {value}")
    if value < 0:
        if value < _NEGATIVE_CLAMP:
            raise RuntimeFailure(
                f"frechet distance {value} is negative beyond roundoff tolerance"
            )
        value = 0.0
    return value, epsilon_applied


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    value, _ = frechet_with_info(s1, s2)
    return value


REPORT_COLUMNS = ("pair", "fid", "n_a", "n_b", "embedder", "epsilon_applied")


def fid_report(pairs, e: Embedder, batch: int = 32, csv_path=None, json_path=None) -> list:
    """One row per (name, setA, setB) pair; optionally serialized CSV + JSON."""
    rows = []
    for name, set_a, set_b in pairs:
        stats_a = feature_stats(embed(set_a, e, batch))
        stats_b = feature_stats(embed(set_b, e, batch))
        value, eps = frechet_with_info(stats_a, stats_b)
        rows.append(
            {
                "pair": name,
                "fid": value,
                "n_a": len(set_a),
                "n_b": len(set_b),
                "embedder": e.name,
                "epsilon_applied": eps,
            }
        )
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    if json_path is not None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(rows, indent=2))
    return rows


# --- embedders ---------------------------------------------------------------

_DESK_SIZE = 64
_DESK_SEED = 8140
_DESK_DIM = 64


def _desk_module() -> Sequential:
    layers = []
    ch = 3
    for out in (8, 16, 32, _DESK_DIM):
        fan_in = ch * 9
        layers += [
            Conv2d(ch, out, 3, stride=2, pad=1, init_std=math.sqrt(2.0 / fan_in)),
            ReLU(),
        ]
        ch = out
    return Sequential(layers)


def make_desk_embedder() -> Embedder:
    """Fixed-seed random-convolution features: 64x64 input, 64-d output.

    Never trained; useful only for the analytic properties of the distance
    (identity, symmetry, monotone growth under corruption), not for comparing
    against published score magnitudes.
    """
    module = _desk_module()
    params = module.init_params(np.random.default_rng(_DESK_SEED))

    def forward(images):
        batch = np.stack(
            [resize_image(np.repeat(x, 3, axis=2) if x.shape[2] == 1 else x,
                          _DESK_SIZE, _DESK_SIZE) for x in images]
        )
        feats, _ = module.forward(params, to_model_range(batch))
        return feats.mean(axis=(2, 3)).astype(np.float64)

    return Embedder(name="desk64", dim=_DESK_DIM, forward=forward)


def make_reference_embedder() -> Embedder:
    """InceptionV3 2048-d pooled features (the standard scoring protocol).

    Imports torch/torchvision lazily; install the `reference-embedder` extra
    to use it.
    """
    try:
        import torch
        from torchvision import models
        from torchvision.models import Inception_V3_Weights
    except ImportError as exc:
        raise ValidationError(
            "the reference embedder needs torch and torchvision; "
            "install with: pip install 'uwgen[reference-embedder]'"
        ) from exc

    weights = Inception_V3_Weights.IMAGENET1K_V1
    net = models.inception_v3(weights=weights)
    net.fc = torch.nn.Identity()
    net.eval()
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def forward(images):
        batch = np.stack(
            [resize_image(np.repeat(x, 3, axis=2) if x.shape[2] == 1 else x, 299, 299)
             for x in images]
        )
        with torch.no_grad():
            t = torch.from_numpy(batch.transpose(0, 3, 1, 2).copy()).float()
            feats = net((t - mean) / std)
        return feats.numpy().astype(np.float64)

    return Embedder(name="inception_v3_pool2048", dim=2048, forward=forward)


def get_embedder(name: str) -> Embedder:
    if name in ("desk", "desk64"):
        return make_desk_embedder()
    if name in ("reference", "inception", "inception_v3"):
        return make_reference_embedder()
    raise ValidationError(f"unknown embedder {name!r}; use 'desk' or 'reference'")
