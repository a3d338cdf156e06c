"""Training loops: the two-generator/two-discriminator loop, dataset
translation, and the small-classifier harness.

Reproducibility contract: every random draw is a pure function of
(seed, epoch, step), never of call history.  Resuming from a checkpoint at
step k therefore replays the exact arithmetic of an uninterrupted run — the
loss logs match bit for bit.
"""

from __future__ import annotations

import csv
import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import hflip, rotate
from .dataset import (
    DomainDataset,
    DomainImage,
    epoch_permutation,
    resize_image,
    resize_short_side_center_crop,
    split_dataset,
    to_model_range,
    to_storage_range,
)
from .errors import NonFiniteLossError, StratificationError, ValidationError
from .losses import (
    DEFAULT_LAMBDA,
    append_loss_row,
    discriminator_objective,
    generator_objective,
)
from .models import (
    ClassifierModel,
    CycleGanState,
    DiscriminatorConfig,
    GeneratorConfig,
    build_classifier,
    generator_module,
    init_cyclegan_state,
    save_cyclegan_state,
)
from .nn import Adam

RESIZE_POLICIES = ("short_side_center_crop", "stretch")
PREPROCESS_OPS = ("hflip", "rotate", "blur")


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 256
    batch_size: int = 4
    learning_rate: float = 2e-4
    lam: float = DEFAULT_LAMBDA
    epochs: int = 100
    seed: int = 0
    preprocess: tuple = ()
    base_channels: int = 64
    residual_blocks: int = 9
    downsample_steps: int = 2
    disc_base_channels: int = 64
    disc_layers: int = 3
    disc_learning_rate: float | None = None  # None -> share learning_rate
    beta1: float = 0.5
    beta2: float = 0.999
    disc_loss_halved: bool = True  # update convention recorded alongside results
    resize_policy: str = "short_side_center_crop"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.disc_learning_rate is not None and self.disc_learning_rate <= 0:
            raise ValidationError(
                f"disc_learning_rate must be > 0 when set, got {self.disc_learning_rate}"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.lam < 0:
            raise ValidationError("batch_size >= 1, epochs >= 0, lam >= 0 required")
        if self.resize_policy not in RESIZE_POLICIES:
            raise ValidationError(f"resize_policy must be one of {RESIZE_POLICIES}")
        unknown = [op for op in self.preprocess if op not in PREPROCESS_OPS]
        if unknown:
            raise ValidationError(f"unknown preprocess ops {unknown}; valid: {PREPROCESS_OPS}")
        object.__setattr__(self, "preprocess", tuple(self.preprocess))

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            input_size=self.image_size,
            base_channels=self.base_channels,
            residual_blocks=self.residual_blocks,
            downsample_steps=self.downsample_steps,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            input_size=self.image_size,
            base_channels=self.disc_base_channels,
            layers=self.disc_layers,
        )

    def effective_disc_lr(self) -> float:
        """Discriminator step size; falls back to the shared learning_rate."""
        if self.disc_learning_rate is None:
            return self.learning_rate
        return self.disc_learning_rate


TRAIN_PRESETS = {
    "full_image": TrainConfig(image_size=256, batch_size=4, learning_rate=2e-4,
                              residual_blocks=9),
    "object_image": TrainConfig(image_size=128, batch_size=8, learning_rate=2e-4,
                                residual_blocks=6),
}


@dataclass
class TrainReport:
    loss_log: list = field(default_factory=list)  # (epoch, step, LossRecord)
    metrics: list = field(default_factory=list)   # classifier per-epoch rows
    wall_clock_s: float = 0.0
    peak_rss_mb: float = 0.0
    steps_per_epoch: int = 0
    checkpoint_paths: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _to_square(item: DomainImage, size: int, policy: str) -> np.ndarray:
    px = item.pixels()
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    if policy == "stretch":
        return resize_image(px, size, size)
    return resize_short_side_center_crop(px, size)


def _load_batch(ds, indices, size, policy) -> np.ndarray:
    imgs = [_to_square(ds[int(i)], size, policy) for i in indices]
    return to_model_range(np.stack(imgs))


def _preprocess_batch(batch: np.ndarray, ops, rng) -> np.ndarray:
    """Seeded per-image blur / flip / rotation on a [-1,1] NCHW batch."""
    if not ops:
        return batch
    from scipy import ndimage as ndi

    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        img = batch[i].transpose(1, 2, 0)
        if "hflip" in ops and rng.random() < 0.5:
            img = hflip(img)
        if "rotate" in ops:
            img = rotate(img, float(rng.uniform(-30.0, 30.0)))
        if "blur" in ops:
            sigma = float(rng.uniform(0.0, 1.25))
            if sigma > 0:
                img = ndi.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
        out[i] = img.transpose(2, 0, 1)
    return np.clip(out, -1.0, 1.0)


def _epoch_index_stream(n: int, length: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic index sequence of `length`, cycling a per-epoch permutation."""
    return np.resize(epoch_permutation(n, seed, epoch), length)


def _snapshot(epoch, step, uw_ids, lab_ids, terms) -> dict:
    return {
        "epoch": epoch,
        "step": step,
        "uw_batch": list(uw_ids),
        "lab_batch": list(lab_ids),
        "loss_terms": terms,
    }


def train_cyclegan(
    cfg: TrainConfig,
    ds_uw: DomainDataset,
    ds_lab: DomainDataset,
    loss_csv=None,
    checkpoint_dir=None,
    checkpoint_every: int = 1,
    resume_from=None,
) -> tuple:
    """Alternate generator and discriminator updates over paired batches.

    Each step translates both directions, rebuilds both cycles, steps the
    generators on their objective, then steps each discriminator against its
    real batch and the (detached) current translation.  Steps per epoch =
    ceil(max(|uw|, |lab|) / batch); the shorter dataset cycles.
    """
    if len(ds_uw) == 0 or len(ds_lab) == 0:
        raise ValidationError("train_cyclegan needs non-empty datasets for both domains")
    t0 = time.monotonic()
    gen_cfg, disc_cfg = cfg.generator_config(), cfg.discriminator_config()

    if resume_from is not None:
        from .models import load_cyclegan_state

        state = load_cyclegan_state(resume_from)
        if state.gen_cfg != gen_cfg or state.disc_cfg != disc_cfg:
            raise ValidationError(
                "checkpoint architecture does not match the training config: "
                f"{state.gen_cfg} vs {gen_cfg}"
            )
    else:
        state = init_cyclegan_state(gen_cfg, disc_cfg, cfg.seed)

    opt_g = Adam(cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = Adam(cfg.effective_disc_lr(), beta1=cfg.beta1, beta2=cfg.beta2)
    if not state.opt:
        state.opt = {
            name: opt_g.init_state(getattr(state, name))
            for name in ("g_uw", "g_lab", "d_uw", "d_lab")
        }

    n_uw, n_lab = len(ds_uw), len(ds_lab)
    steps_per_epoch = -(-max(n_uw, n_lab) // cfg.batch_size)
    report = TrainReport(steps_per_epoch=steps_per_epoch)
    report.extra["disc_loss_halved"] = cfg.disc_loss_halved
    gen = generator_module(gen_cfg)

    for epoch in range(cfg.epochs):
        stream_len = steps_per_epoch * cfg.batch_size
        uw_stream = _epoch_index_stream(n_uw, stream_len, cfg.seed * 2, epoch)
        lab_stream = _epoch_index_stream(n_lab, stream_len, cfg.seed * 2 + 1, epoch)
        for k in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + k
            if global_step < state.step:
                continue  # fast-forward on resume; no RNG is consumed here
            sl = slice(k * cfg.batch_size, (k + 1) * cfg.batch_size)
            uw_idx, lab_idx = uw_stream[sl], lab_stream[sl]
            batch_uw = _load_batch(ds_uw, uw_idx, cfg.image_size, cfg.resize_policy)
            batch_lab = _load_batch(ds_lab, lab_idx, cfg.image_size, cfg.resize_policy)
            if cfg.preprocess:
                rng = np.random.default_rng([cfg.seed, epoch, k, 1])
                batch_uw = _preprocess_batch(batch_uw, cfg.preprocess, rng)
                batch_lab = _preprocess_batch(batch_lab, cfg.preprocess, rng)

            uw_ids = [ds_uw[int(i)].source_id for i in uw_idx]
            lab_ids = [ds_lab[int(i)].source_id for i in lab_idx]

            g_obj, record, g_grads = generator_objective(
                state, batch_uw, batch_lab, lam=cfg.lam
            )
            if not np.isfinite(g_obj):
                raise NonFiniteLossError(
                    f"generator objective non-finite at step {global_step}",
                    snapshot=_snapshot(epoch, k, uw_ids, lab_ids, {"generator": g_obj}),
                )
            state.g_uw, state.opt["g_uw"] = opt_g.step(
                state.g_uw, g_grads["g_uw"], state.opt["g_uw"]
            )
            state.g_lab, state.opt["g_lab"] = opt_g.step(
                state.g_lab, g_grads["g_lab"], state.opt["g_lab"]
            )

            # translations for the discriminator step come from the freshly
            # updated generators; plain arrays, so no gradient reaches G
            fake_uw, _ = gen.forward(state.g_uw, batch_lab)
            fake_lab, _ = gen.forward(state.g_lab, batch_uw)
            d_terms = {}
            for name, real, fake in (
                ("d_uw", batch_uw, fake_uw),
                ("d_lab", batch_lab, fake_lab),
            ):
                d_obj, d_grads = discriminator_objective(
                    disc_cfg, getattr(state, name), real, fake
                )
                if not np.isfinite(d_obj):
                    raise NonFiniteLossError(
                        f"{name} objective non-finite at step {global_step}",
                        snapshot=_snapshot(
                            epoch, k, uw_ids, lab_ids, {"generator": g_obj, name: d_obj}
                        ),
                    )
                d_terms[name] = d_obj
                new_params, state.opt[name] = opt_d.step(
                    getattr(state, name), d_grads, state.opt[name]
                )
                setattr(state, name, new_params)

            state.step = global_step + 1
            report.loss_log.append((epoch, k, record))
            if loss_csv is not None:
                append_loss_row(loss_csv, epoch, k, record)

        if checkpoint_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"cyclegan_epoch{epoch + 1:04d}.npz"
            ckpt_id = save_cyclegan_state(state, path)
            state.checkpoint_id = ckpt_id
            report.checkpoint_paths.append(str(path))

    report.wall_clock_s = time.monotonic() - t0
    report.peak_rss_mb = _peak_rss_mb()
    return state, report


def _generate(state: CycleGanState, ds: DomainDataset, chain: tuple, provenance: str,
              prefix: str, batch_size: int, resize_policy: str) -> DomainDataset:
    gen = generator_module(state.gen_cfg)
    size = state.gen_cfg.input_size
    out_items = []
    n = len(ds)
    for start in range(0, n, batch_size):
        group = ds.items[start : start + batch_size]
        x = to_model_range(np.stack([_to_square(it, size, resize_policy) for it in group]))
        y = x
        for params in chain:
            y, _ = gen.forward(params, y)
        stored = to_storage_range(y)
        for j, item in enumerate(group):
            out_items.append(
                DomainImage(
                    source_id=f"{prefix}:{item.source_id}",
                    domain=item.domain,
                    provenance=provenance,
                    image=stored[j],
                    checkpoint_id=state.checkpoint_id,
                    meta={"parent": item.source_id},
                )
            )
    return DomainDataset(items=out_items, class_names=ds.class_names)


def _single_domain(ds: DomainDataset, what: str) -> str:
    domains = {it.domain for it in ds}
    if len(domains) != 1:
        raise ValidationError(f"{what} needs a single-domain dataset, got {sorted(domains)}")
    return domains.pop()


def translate_dataset(state: CycleGanState, ds: DomainDataset, batch_size: int = 8,
                      resize_policy: str = "short_side_center_crop") -> DomainDataset:
    """Render every item in the other domain's appearance (provenance `fake`).

    Lab inputs go through the uw-appearance generator and vice versa; source
    ids gain a `fake:` prefix and every output records the generator
    checkpoint id.  Outputs are stored in [0,1].
    """
    if len(ds) == 0:
        raise ValidationError("translate_dataset needs a non-empty dataset")
    domain = _single_domain(ds, "translate_dataset")
    chain = (state.g_uw,) if domain == "lab" else (state.g_lab,)
    return _generate(state, ds, chain, "fake", "fake", batch_size, resize_policy)


def rebuild_dataset(state: CycleGanState, ds: DomainDataset, direction: str | None = None,
                    batch_size: int = 8,
                    resize_policy: str = "short_side_center_crop") -> DomainDataset:
    """Round-trip every item through both generators (provenance `rebuild`).

    uw items follow uw -> lab -> uw; lab items the mirror chain.  `direction`,
    when given, must match the dataset's domain (it is a guard, not a switch).
    """
    if len(ds) == 0:
        raise ValidationError("rebuild_dataset needs a non-empty dataset")
    domain = _single_domain(ds, "rebuild_dataset")
    if direction is not None and direction != domain:
        raise ValidationError(
            f"direction {direction!r} does not match dataset domain {domain!r}"
        )
    chain = (state.g_lab, state.g_uw) if domain == "uw" else (state.g_uw, state.g_lab)
    return _generate(state, ds, chain, "rebuild", "rebuild", batch_size, resize_policy)


# --- classifier harness ------------------------------------------------------


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    input_size: int = 150
    val_ratio: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    target_train_accuracy: float | None = None  # early stop for probe runs

    def __post_init__(self):
        if self.learning_rate <= 0 or not 0 < self.val_ratio < 1:
            raise ValidationError("learning_rate > 0 and 0 < val_ratio < 1 required")


METRIC_COLUMNS = ("epoch", "loss", "accuracy", "val_loss", "val_accuracy")


def object_labels(ds: DomainDataset) -> np.ndarray:
    """Class ids from the crop tree layout (`class_name/<file>` source ids)."""
    index = {name: i for i, name in enumerate(ds.class_names)}
    labels = []
    for it in ds:
        cls = it.meta.get("class_name") or it.source_id.split("/", 1)[0]
        if cls not in index:
            raise ValidationError(
                f"item {it.source_id!r} is not under a known class directory "
                f"{tuple(ds.class_names)}"
            )
        labels.append(index[cls])
    return np.asarray(labels, dtype=np.int64)


def _classifier_input_transforms(batch: np.ndarray, rng) -> np.ndarray:
    """Rotation / flip / zoom on a [0,1] NHWC batch (dropout-variant training)."""
    out = np.empty_like(batch)
    size = batch.shape[1]
    for i in range(batch.shape[0]):
        img = batch[i]
        if rng.random() < 0.5:
            img = hflip(img)
        img = rotate(img, float(rng.uniform(-15.0, 15.0)))
        zoom = float(rng.uniform(1.0, 1.2))
        if zoom > 1.0:
            big = resize_image(img, max(size + 1, int(round(size * zoom))),
                               max(size + 1, int(round(size * zoom))))
            y0 = (big.shape[0] - size) // 2
            x0 = (big.shape[1] - size) // 2
            img = big[y0 : y0 + size, x0 : x0 + size]
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def _cross_entropy_and_grad(logits: np.ndarray, labels: np.ndarray):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = labels.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-12).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype), probs


def _evaluate(model: ClassifierModel, images: np.ndarray, labels: np.ndarray,
              batch_size: int):
    losses, correct = [], 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, _ = model.module.forward(model.params, xb)
        loss, _, probs = _cross_entropy_and_grad(logits, yb)
        losses.append(loss * xb.shape[0])
        correct += int((probs.argmax(axis=1) == yb).sum())
    n = images.shape[0]
    return sum(losses) / n, correct / n


def train_classifier(
    cfg: ClassifierTrainConfig,
    object_ds: DomainDataset,
    dropout_rate: float,
    metrics_csv=None,
    checkpoint_path=None,
) -> tuple:
    """80/20 split, cross-entropy training, per-epoch metric rows.

    The dropout variant additionally runs rotation/flip/zoom input transforms
    on every training batch.  Raises when any class is missing from the train
    split — accuracy over a 5-way task is meaningless without all classes.
    """
    t0 = time.monotonic()
    labels_all = object_labels(object_ds)
    train_ds, val_ds = split_dataset(object_ds, 1.0 - cfg.val_ratio, cfg.seed)
    id_to_label = {it.source_id: int(l) for it, l in zip(object_ds, labels_all)}
    y_train = np.asarray([id_to_label[it.source_id] for it in train_ds], dtype=np.int64)
    y_val = np.asarray([id_to_label[it.source_id] for it in val_ds], dtype=np.int64)
    missing = set(range(len(object_ds.class_names))) - set(y_train.tolist())
    if missing:
        names = [object_ds.class_names[i] for i in sorted(missing)]
        raise StratificationError(f"classes missing from the train split: {names}")

    size = cfg.input_size
    x_train = np.stack([_to_square(it, size, "short_side_center_crop") for it in train_ds])
    x_val = np.stack([_to_square(it, size, "short_side_center_crop") for it in val_ds])
    x_train_nchw = np.ascontiguousarray(x_train.transpose(0, 3, 1, 2))
    x_val_nchw = np.ascontiguousarray(x_val.transpose(0, 3, 1, 2))

    model = build_classifier(dropout_rate, seed=cfg.seed, input_size=size)
    opt = Adam(cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_state = opt.init_state(model.params)
    augmented = dropout_rate > 0

    report = TrainReport(steps_per_epoch=-(-x_train.shape[0] // cfg.batch_size))
    for epoch in range(cfg.epochs):
        order = epoch_permutation(x_train.shape[0], cfg.seed, epoch)
        epoch_loss, correct = 0.0, 0
        for k, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if augmented:
                rng = np.random.default_rng([cfg.seed, epoch, k, 2])
                xb_hwc = _classifier_input_transforms(x_train[idx], rng)
                xb = np.ascontiguousarray(xb_hwc.transpose(0, 3, 1, 2))
            else:
                xb = x_train_nchw[idx]
            yb = y_train[idx]
            drop_rng = np.random.default_rng([cfg.seed, epoch, k, 3])
            logits, cache = model.module.forward(
                model.params, xb, train=True, rng=drop_rng
            )
            loss, dlogits, probs = _cross_entropy_and_grad(logits, yb)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"classifier loss non-finite at epoch {epoch} step {k}",
                    snapshot={"epoch": epoch, "step": k, "loss": loss},
                )
            _, grads = model.module.backward(model.params, cache, dlogits)
            model.params, opt_state = opt.step(model.params, grads, opt_state)
            epoch_loss += loss * xb.shape[0]
            correct += int((probs.argmax(axis=1) == yb).sum())

        train_loss = epoch_loss / x_train.shape[0]
        train_acc = correct / x_train.shape[0]
        val_loss, val_acc = _evaluate(model, x_val_nchw, y_val, cfg.batch_size)
        row = {
            "epoch": epoch,
            "loss": train_loss,
            "accuracy": train_acc,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        }
        report.metrics.append(row)
        if metrics_csv is not None:
            _append_metric_row(metrics_csv, row)
        if cfg.target_train_accuracy is not None and train_acc >= cfg.target_train_accuracy:
            break

    if checkpoint_path is not None:
        from .models import save_classifier

        save_classifier(model, checkpoint_path, step=len(report.metrics),
                        extra={"dropout_rate": dropout_rate})
        report.checkpoint_paths.append(str(checkpoint_path))
    report.wall_clock_s = time.monotonic() - t0
    report.peak_rss_mb = _peak_rss_mb()
    return model, report


def _append_metric_row(path, row: dict) -> None:
    path = Path(path)
    fresh = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
