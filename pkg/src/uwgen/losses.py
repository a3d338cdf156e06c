"""Least-squares adversarial and cycle-consistency objectives.

Two views of the same training step coexist here:

* `LossRecord` logs the combined per-direction adversarial form
  mean((D(translated) - 1)^2) + mean(D(real)^2) next to the cycle terms —
  the quantity the loss curves are plotted from.
* `generator_objective` / `discriminator_objective` are what the optimizer
  actually consumes: the standard split where generators chase
  mean((D(G(x)) - 1)^2) + lambda * cycle and discriminators minimize the
  halved real/fake square loss (the halving convention is recorded in the
  training config).

All scalar reductions run in float64 regardless of activation dtype so the
logged identities (gan_total = sum of directions, etc.) hold to 1e-9.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .models import discriminator_module, generator_module
from .nn.layers import tree_add

DEFAULT_LAMBDA = 10.0

_IDENTITY_TOL = 1e-9


def _mean64(x) -> float:
    return float(np.mean(x, dtype=np.float64))


def adversarial_loss(d_on_translated: np.ndarray, d_on_real: np.ndarray) -> float:
    """mean((d_translated - 1)^2) + mean(d_real^2), over batch and patch."""
    d_on_translated = np.asarray(d_on_translated)
    d_on_real = np.asarray(d_on_real)
    if d_on_translated.size == 0 or d_on_real.size == 0:
        raise ValidationError("adversarial_loss needs non-empty score batches")
    if not (np.isfinite(d_on_translated).all() and np.isfinite(d_on_real).all()):
        raise ValidationError("adversarial_loss received non-finite scores")
    return _mean64((d_on_translated - 1.0) ** 2) + _mean64(d_on_real**2)


def total_adversarial(l_uw_to_lab: float, l_lab_to_uw: float) -> float:
    return float(l_uw_to_lab) + float(l_lab_to_uw)


def cycle_loss(x_real: np.ndarray, x_rebuild: np.ndarray) -> float:
    """Mean absolute reconstruction error over every element."""
    x_real = np.asarray(x_real)
    x_rebuild = np.asarray(x_rebuild)
    if x_real.shape != x_rebuild.shape:
        raise ValidationError(
            f"cycle_loss shape mismatch: {x_real.shape} vs {x_rebuild.shape}"
        )
    if x_real.size == 0:
        raise ValidationError("cycle_loss needs non-empty batches")
    return _mean64(np.abs(x_real - x_rebuild))


def total_loss(gan_total: float, cycle_total: float, lam: float) -> float:
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    return float(gan_total) + float(lam) * float(cycle_total)


@dataclass(frozen=True)
class LossRecord:
    gan_uw_to_lab: float
    gan_lab_to_uw: float
    gan_total: float
    cycle_uw: float
    cycle_lab: float
    cycle_total: float
    total: float
    lam: float

    def __post_init__(self):
        vals = asdict(self)
        for name, v in vals.items():
            if v < 0 or not np.isfinite(v):
                raise ValidationError(f"LossRecord.{name} must be finite and >= 0, got {v}")
        checks = (
            ("gan_total", self.gan_uw_to_lab + self.gan_lab_to_uw, self.gan_total),
            ("cycle_total", self.cycle_uw + self.cycle_lab, self.cycle_total),
            ("total", self.gan_total + self.lam * self.cycle_total, self.total),
        )
        for name, want, got in checks:
            if abs(want - got) > _IDENTITY_TOL:
                raise ValidationError(f"LossRecord.{name} inconsistent: {got} != {want}")

    @classmethod
    def from_parts(cls, gan_uw_to_lab, gan_lab_to_uw, cycle_uw, cycle_lab, lam):
        gan_total = total_adversarial(gan_uw_to_lab, gan_lab_to_uw)
        cycle_total = cycle_uw + cycle_lab
        return cls(
            gan_uw_to_lab=float(gan_uw_to_lab),
            gan_lab_to_uw=float(gan_lab_to_uw),
            gan_total=gan_total,
            cycle_uw=float(cycle_uw),
            cycle_lab=float(cycle_lab),
            cycle_total=float(cycle_total),
            total=total_loss(gan_total, cycle_total, lam),
            lam=float(lam),
        )


LOSS_CSV_COLUMNS = (
    "epoch",
    "step",
    "gan_uw_to_lab",
    "gan_lab_to_uw",
    "gan_total",
    "cycle_uw",
    "cycle_lab",
    "cycle_total",
    "total",
    "lambda",
)


def append_loss_row(path, epoch: int, step: int, record: LossRecord) -> None:
    path = Path(path)
    fresh = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_CSV_COLUMNS)
        row = asdict(record)
        row["lambda"] = row.pop("lam")
        writer.writerow([epoch, step] + [repr(row[c]) for c in LOSS_CSV_COLUMNS[2:]])


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append(
                {k: (int(raw[k]) if k in ("epoch", "step") else float(raw[k])) for k in raw}
            )
        return rows


def _check_batch(x, what):
    x = np.asarray(x)
    if x.size == 0:
        raise ValidationError(f"{what}: empty batch")
    if not np.isfinite(x).all():
        raise ValidationError(f"{what}: non-finite values in batch")
    return x


def _resolve_modules(state):
    # states may carry explicit modules (tiny stand-in nets in gradient
    # checks); otherwise the architecture follows from the configs
    gen = getattr(state, "gen_module", None)
    disc = getattr(state, "disc_module", None)
    return (
        gen if gen is not None else generator_module(state.gen_cfg),
        disc if disc is not None else discriminator_module(state.disc_cfg),
    )


def generator_objective(state, batch_uw: np.ndarray, batch_lab: np.ndarray, lam: float = DEFAULT_LAMBDA):
    """Generator-side scalar, its gradients, and the logged LossRecord.

    Runs the two translation chains
        batch_uw -> G_lab -> t_lab -> G_uw -> rebuild_uw
        batch_lab -> G_uw -> t_uw -> G_lab -> rebuild_lab
    scores the translations with the (frozen) discriminators, and
    backpropagates   sum_dir mean((D(G(x)) - 1)^2) + lam * cycle_total
    into both generators.  Discriminator parameters receive no gradient.
    """
    batch_uw = _check_batch(batch_uw, "generator_objective uw batch")
    batch_lab = _check_batch(batch_lab, "generator_objective lab batch")
    gen, disc = _resolve_modules(state)

    t_lab, cache_glab_t = gen.forward(state.g_lab, batch_uw)
    t_uw, cache_guw_t = gen.forward(state.g_uw, batch_lab)
    rebuild_uw, cache_guw_r = gen.forward(state.g_uw, t_lab)
    rebuild_lab, cache_glab_r = gen.forward(state.g_lab, t_uw)
    s_t_lab, cache_dlab = disc.forward(state.d_lab, t_lab)
    s_t_uw, cache_duw = disc.forward(state.d_uw, t_uw)

    gen_gan_uw_to_lab = _mean64((s_t_lab - 1.0) ** 2)
    gen_gan_lab_to_uw = _mean64((s_t_uw - 1.0) ** 2)
    c_uw = cycle_loss(batch_uw, rebuild_uw)
    c_lab = cycle_loss(batch_lab, rebuild_lab)
    objective = gen_gan_uw_to_lab + gen_gan_lab_to_uw + lam * (c_uw + c_lab)

    # populate the logged (combined-form) record: needs D on the real batches
    s_r_lab, _ = disc.forward(state.d_lab, batch_lab)
    s_r_uw, _ = disc.forward(state.d_uw, batch_uw)
    record = LossRecord.from_parts(
        gan_uw_to_lab=adversarial_loss(s_t_lab, s_r_lab),
        gan_lab_to_uw=adversarial_loss(s_t_uw, s_r_uw),
        cycle_uw=c_uw,
        cycle_lab=c_lab,
        lam=lam,
    )

    dt = s_t_lab.dtype
    d_s_t_lab = (2.0 * (s_t_lab - 1.0) / s_t_lab.size).astype(dt)
    d_s_t_uw = (2.0 * (s_t_uw - 1.0) / s_t_uw.size).astype(dt)
    d_rebuild_uw = (lam * np.sign(rebuild_uw - batch_uw) / rebuild_uw.size).astype(dt)
    d_rebuild_lab = (lam * np.sign(rebuild_lab - batch_lab) / rebuild_lab.size).astype(dt)

    d_t_lab_disc, _ = disc.backward(state.d_lab, cache_dlab, d_s_t_lab)
    d_t_uw_disc, _ = disc.backward(state.d_uw, cache_duw, d_s_t_uw)
    d_t_lab_cycle, grads_guw_r = gen.backward(state.g_uw, cache_guw_r, d_rebuild_uw)
    d_t_uw_cycle, grads_glab_r = gen.backward(state.g_lab, cache_glab_r, d_rebuild_lab)
    _, grads_glab_t = gen.backward(state.g_lab, cache_glab_t, d_t_lab_disc + d_t_lab_cycle)
    _, grads_guw_t = gen.backward(state.g_uw, cache_guw_t, d_t_uw_disc + d_t_uw_cycle)

    grads = {
        "g_uw": tree_add(grads_guw_t, grads_guw_r),
        "g_lab": tree_add(grads_glab_t, grads_glab_r),
    }
    return float(objective), record, grads


def discriminator_objective(disc_cfg, d_params: dict, real_batch: np.ndarray, fake_batch: np.ndarray):
    """Halved least-squares real/fake loss and its parameter gradients.

    `fake_batch` must already be detached (a plain array, not a live chain);
    nothing here touches generator parameters.
    """
    real_batch = _check_batch(real_batch, "discriminator_objective real batch")
    fake_batch = _check_batch(fake_batch, "discriminator_objective fake batch")
    disc = disc_cfg if hasattr(disc_cfg, "forward") else discriminator_module(disc_cfg)

    s_real, cache_real = disc.forward(d_params, real_batch)
    s_fake, cache_fake = disc.forward(d_params, fake_batch)
    objective = 0.5 * (_mean64((s_real - 1.0) ** 2) + _mean64(s_fake**2))

    d_s_real = (s_real - 1.0) / s_real.size  # 0.5 * 2 * (s-1)/n
    d_s_fake = s_fake / s_fake.size
    _, grads_real = disc.backward(d_params, cache_real, d_s_real.astype(s_real.dtype))
    _, grads_fake = disc.backward(d_params, cache_fake, d_s_fake.astype(s_fake.dtype))
    return float(objective), tree_add(grads_real, grads_fake)
