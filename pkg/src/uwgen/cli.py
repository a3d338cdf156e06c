"""Command-line pipeline.

Stage order: prepare -> augment -> train-gan -> generate ->
train-classifier / fid / export-yolo -> report.  Every stage writes its
artifacts under `<output_root>/<stage>/` plus a `run.json` with the config
digest, seed, git revision, and wall-clock so runs can be audited later.

Exit codes: 0 success, 1 invalid input/config/missing artifact, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .augment import (
    detection_preprocess_with_info,
    expand_dataset,
    export_dataset,
    export_item,
)
from .config import PipelineConfig, config_digest, dump_config, load_config
from .dataset import (
    CLASS_NAMES,
    parse_labels,
    round_half_up,
    save_image,
    scan_dataset,
    split_dataset,
    write_manifest,
)
from .errors import MissingArtifactError, RuntimeFailure, ValidationError
from .fid import fid_report, get_embedder
from .losses import read_loss_log
from .models import load_cyclegan_state
from .trainer import rebuild_dataset, train_classifier, train_cyclegan, translate_dataset


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_run_json(cfg: PipelineConfig, stage: str, t0: float, extra=None) -> Path:
    stage_dir = cfg.stage_dir(stage)
    stage_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": stage,
        "config_digest": config_digest(cfg),
        "seed": cfg.seed,
        "git": _git_describe(),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_clock_s": time.monotonic() - t0,
    }
    if extra:
        meta.update(extra)
    path = stage_dir / "run.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _require_dir(path: Path, what: str, producer: str) -> Path:
    if not path.is_dir():
        raise MissingArtifactError(
            f"{what} not found at {path}; run `{producer}` first",
            producing_command=producer,
        )
    return path


def _sha256_file(path: Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- prepare -----------------------------------------------------------------


def cmd_prepare(cfg: PipelineConfig, args) -> int:
    from .dataset import export_object_crops

    t0 = time.monotonic()
    stage = cfg.stage_dir("prepare")
    crops_dir = cfg.crops_dir()
    image_root = Path(args.image_root or cfg.dataset.lab_dir)
    if not image_root.is_dir():
        raise ValidationError(f"image root not found: {image_root}")
    labels_root = args.labels_root or cfg.dataset.lab_labels_dir

    report = export_object_crops(image_root, crops_dir, labels_root=labels_root)

    counts = {}
    for name in CLASS_NAMES:
        class_dir = crops_dir / name
        counts[name] = sum(1 for _ in class_dir.glob("*.png")) if class_dir.is_dir() else 0
    stage.mkdir(parents=True, exist_ok=True)
    with open(stage / "counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count"])
        for name in CLASS_NAMES:
            writer.writerow([name, counts[name]])
        writer.writerow(["total", sum(counts.values())])

    with open(stage / "warnings.txt", "w") as fh:
        for rec in report["warnings"]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = stage / "manifest.json"
    write_manifest(scan_dataset(crops_dir, domain="lab"), manifest, root=crops_dir)

    print(f"images seen: {report['images_seen']}, labeled: {report['images_labeled']}")
    for name in CLASS_NAMES:
        print(f"  {name}: {counts[name]}")
    print(f"crops written: {report['crops_written']} -> {crops_dir}")
    if report["warnings"]:
        print(f"warnings: {len(report['warnings'])} (see {stage / 'warnings.txt'})")

    _write_run_json(cfg, "prepare", t0, extra={
        "images_seen": report["images_seen"],
        "images_labeled": report["images_labeled"],
        "crops_written": report["crops_written"],
        "warning_count": len(report["warnings"]),
        "class_counts": counts,
        "manifest_sha256": _sha256_file(manifest),
    })
    return 0


# --- augment -----------------------------------------------------------------


def _allocate_targets(counts: dict, total: int) -> dict:
    """Per-class share of `total`, proportional with largest-remainder rounding,
    never below the class's current count."""
    n = sum(counts.values())
    raw = {k: total * v / n for k, v in counts.items()}
    floors = {k: max(int(raw[k]), counts[k]) for k in counts}
    leftover = total - sum(floors.values())
    order = sorted(counts, key=lambda k: (raw[k] - int(raw[k]), k), reverse=True)
    i = 0
    while leftover > 0:
        floors[order[i % len(order)]] += 1
        leftover -= 1
        i += 1
    return floors


def cmd_augment(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    crops_dir = _require_dir(cfg.crops_dir(), "object crops", "prepare")
    stage = cfg.stage_dir("augment")
    out_dir = stage / "images"
    aug_cfg = cfg.augment.to_augment_config()

    ds = scan_dataset(crops_dir, domain="lab")
    by_class: dict = {}
    for item in ds:
        by_class.setdefault(item.source_id.split("/", 1)[0], []).append(item)
    counts = {k: len(v) for k, v in by_class.items()}
    targets = _allocate_targets(counts, cfg.augment.target_count)

    from .dataset import DomainDataset

    produced = {}
    for ci, name in enumerate(sorted(by_class)):
        # strip the class prefix so filenames inside out_dir/<class>/ stay flat
        stems = [
            dataclasses.replace(it, source_id=it.source_id.split("/", 1)[1])
            for it in by_class[name]
        ]
        subset = DomainDataset(items=stems, class_names=ds.class_names)
        child_seed = int(np.random.SeedSequence([cfg.seed, ci]).generate_state(1)[0])
        expanded = expand_dataset(
            subset, targets[name], aug_cfg, child_seed,
            materialize_dir=out_dir / name,
        )
        for item in stems:  # children stream to disk; originals ride along
            export_item(item, out_dir / name)
        produced[name] = len(expanded)
        print(f"  {name}: {counts[name]} -> {produced[name]}")

    total = sum(produced.values())
    manifest = stage / "manifest.json"
    write_manifest(scan_dataset(out_dir, domain="lab"), manifest, root=out_dir)
    print(f"augmented set: {len(ds)} -> {total} images at {out_dir}")

    _write_run_json(cfg, "augment", t0, extra={
        "source_count": len(ds),
        "target_count": cfg.augment.target_count,
        "produced": produced,
        "manifest_sha256": _sha256_file(manifest),
    })
    return 0


# --- GAN training / generation ----------------------------------------------


def cmd_train_gan(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    gan_cfg = cfg.gan
    if args.epochs is not None:
        gan_cfg = dataclasses.replace(gan_cfg, epochs=args.epochs)
    ds_uw = scan_dataset(Path(cfg.dataset.uw_dir), domain="uw")
    ds_lab = scan_dataset(Path(cfg.dataset.lab_dir), domain="lab")
    stage = cfg.stage_dir("train-gan")
    ckpt_dir = stage / "checkpoints"
    loss_csv = stage / "loss.csv"
    if args.resume is None and loss_csv.exists():
        loss_csv.unlink()  # fresh runs must not append to a stale log

    state, report = train_cyclegan(
        gan_cfg, ds_uw, ds_lab,
        loss_csv=loss_csv,
        checkpoint_dir=ckpt_dir,
        checkpoint_every=args.checkpoint_every,
        resume_from=args.resume,
    )
    last = report.loss_log[-1][2] if report.loss_log else None
    if last is not None:
        print(f"trained {state.step} steps; final total={last.total:.4f} "
              f"cycle={last.cycle_total:.4f}")
    _write_run_json(cfg, "train-gan", t0, extra={
        "epochs": gan_cfg.epochs,
        "steps": state.step,
        "steps_per_epoch": report.steps_per_epoch,
        "peak_rss_mb": report.peak_rss_mb,
        "checkpoints": report.checkpoint_paths,
        "final_total": None if last is None else last.total,
    })
    return 0


def _latest_checkpoint(ckpt_dir: Path):
    if not ckpt_dir.is_dir():
        return None
    found = sorted(ckpt_dir.glob("cyclegan_epoch*.npz"))
    return found[-1] if found else None


def cmd_generate(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(
        cfg.stage_dir("train-gan") / "checkpoints"
    )
    if ckpt is None or not Path(ckpt).exists():
        raise MissingArtifactError(
            "no generator checkpoint found; run `train-gan` first",
            producing_command="train-gan",
        )
    src_dir = Path(cfg.dataset.lab_dir if args.source == "lab" else cfg.dataset.uw_dir)
    ds = scan_dataset(src_dir, domain=args.source)
    state = load_cyclegan_state(ckpt)
    out_ds = (rebuild_dataset if args.mode == "rebuild" else translate_dataset)(
        state, ds, batch_size=cfg.gan.batch_size
    )
    stage = cfg.stage_dir("generate")
    out_dir = stage / "images"
    export_dataset(out_ds, out_dir)
    manifest = stage / "manifest.json"
    write_manifest(out_ds, manifest)
    print(f"{args.mode}d {len(out_ds)} {args.source} images with {state.checkpoint_id} "
          f"-> {out_dir}")
    _write_run_json(cfg, "generate", t0, extra={
        "checkpoint": str(ckpt),
        "checkpoint_id": state.checkpoint_id,
        "source": args.source,
        "mode": args.mode,
        "count": len(out_ds),
    })
    return 0


# --- classifier ----------------------------------------------------------------


def cmd_train_classifier(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    if args.source == "augmented":
        crops = _require_dir(cfg.stage_dir("augment") / "images",
                             "augmented crops", "augment")
    else:
        crops = _require_dir(cfg.crops_dir(), "object crops", "prepare")
    ds = scan_dataset(crops, domain="lab")
    stage = cfg.stage_dir("train-classifier")
    stage.mkdir(parents=True, exist_ok=True)
    metrics_csv = stage / "metrics.csv"
    if metrics_csv.exists():
        metrics_csv.unlink()
    model, report = train_classifier(
        cfg.classifier, ds, dropout_rate=args.dropout,
        metrics_csv=metrics_csv,
        checkpoint_path=stage / "classifier.npz",
    )
    last = report.metrics[-1]
    print(f"classifier ({len(ds)} crops, dropout={args.dropout}): "
          f"train acc {last['accuracy']:.3f}, val acc {last['val_accuracy']:.3f}")
    _write_run_json(cfg, "train-classifier", t0, extra={
        "source": args.source,
        "dropout": args.dropout,
        "epochs_run": len(report.metrics),
        "final": last,
        "peak_rss_mb": report.peak_rss_mb,
    })
    return 0


# --- FID -----------------------------------------------------------------------


def cmd_fid(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    if args.dir_a and args.dir_b:
        pairs_spec = [(args.pair_name, Path(args.dir_a), Path(args.dir_b))]
    else:
        gen_dir = _require_dir(cfg.stage_dir("generate") / "images",
                               "generated images", "generate")
        pairs_spec = [("real_uw_vs_generated", Path(cfg.dataset.uw_dir), gen_dir)]
    pairs = []
    for name, dir_a, dir_b in pairs_spec:
        ds_a = scan_dataset(dir_a, domain="uw")
        ds_b = scan_dataset(dir_b, domain="uw")
        pairs.append((name, ds_a, ds_b))
    embedder = get_embedder(cfg.fid.embedder)
    stage = cfg.stage_dir("fid")
    stage.mkdir(parents=True, exist_ok=True)
    rows = fid_report(pairs, embedder, batch=cfg.fid.batch_size,
                      csv_path=stage / "fid.csv", json_path=stage / "fid.json")
    for row in rows:
        print(f"  {row['pair']}: fid={row['fid']:.4f} "
              f"(n={row['n_a']}/{row['n_b']}, embedder={row['embedder']})")
    _write_run_json(cfg, "fid", t0, extra={"rows": rows})
    return 0


# --- YOLO export -----------------------------------------------------------------


def _label_file_for(item, labels_root: Path, image_root: Path):
    rel = item.path.relative_to(image_root)
    stem = rel.name[len("fake:"):] if rel.name.startswith("fake:") else rel.name
    return (labels_root / rel.parent / stem).with_suffix(".txt")


def cmd_export_yolo(cfg: PipelineConfig, args) -> int:
    t0 = time.monotonic()
    if cfg.export.source == "generated":
        image_root = _require_dir(cfg.stage_dir("generate") / "images",
                                  "generated images", "generate")
    else:
        image_root = Path(cfg.dataset.lab_dir)
        if not image_root.is_dir():
            raise ValidationError(f"image root not found: {image_root}")
    labels_root = Path(cfg.dataset.lab_labels_dir or cfg.dataset.lab_dir)

    ds = scan_dataset(image_root, domain="lab")
    keep, skipped = [], []
    for item in ds:
        lf = _label_file_for(item, labels_root, image_root)
        if lf.exists():
            keep.append((item, lf))
        else:
            skipped.append(item.source_id)

    if len(keep) < 2:
        raise ValidationError(
            f"need at least 2 labeled images to split, found {len(keep)}"
        )

    from .dataset import DomainDataset

    labeled_ds = DomainDataset(items=[it for it, _ in keep], class_names=ds.class_names)
    train_ds, val_ds = split_dataset(labeled_ds, 1.0 - cfg.export.val_ratio, cfg.seed)
    label_by_id = {it.source_id: lf for it, lf in keep}

    pp_cfg = cfg.export.to_preprocess_config()
    n_pp = round_half_up(cfg.export.preprocess_fraction * len(train_ds))
    pp_rng = np.random.default_rng([cfg.seed, 1128])
    pp_indices = set(pp_rng.choice(len(train_ds), size=n_pp, replace=False).tolist()) \
        if n_pp else set()

    stage = cfg.stage_dir("export-yolo")
    root = stage / "yolo"
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    def flat_name(source_id: str) -> str:
        from pathlib import PurePosixPath

        rel = PurePosixPath(source_id)
        parts = rel.parts[:-1] + (rel.stem,)
        return "_".join(parts).replace(":", "_")

    stats = {"train": 0, "val": 0, "preprocessed": 0, "flipped": 0}
    lists = {"train": [], "val": []}
    for split_name, subset in (("train", train_ds), ("val", val_ds)):
        for idx, item in enumerate(subset):
            image = item.pixels()
            labels = parse_labels(label_by_id[item.source_id])
            if split_name == "train" and idx in pp_indices:
                seed = int(np.random.SeedSequence([cfg.seed, 2, idx]).generate_state(1)[0])
                image, info = detection_preprocess_with_info(image, pp_cfg, seed)
                stats["preprocessed"] += 1
                if info["flipped"]:
                    stats["flipped"] += 1
                    labels = [
                        dataclasses.replace(lb, cx=1.0 - lb.cx) for lb in labels
                    ]
            name = flat_name(item.source_id)
            save_image(image, root / "images" / f"{name}.png")
            lines = [
                f"{lb.class_id} {lb.cx!r} {lb.cy!r} {lb.w!r} {lb.h!r}"
                for lb in labels
            ]
            (root / "labels" / f"{name}.txt").write_text("\n".join(lines) + "\n")
            lists[split_name].append(f"images/{name}.png")
            stats[split_name] += 1

    for split_name in ("train", "val"):
        (root / f"{split_name}.txt").write_text("\n".join(sorted(lists[split_name])) + "\n")
    (root / "classes.names").write_text("\n".join(ds.class_names) + "\n")
    meta = {
        "classes": list(ds.class_names),
        "counts": stats,
        "skipped_unlabeled": skipped,
        "detector_defaults": {
            "input_size": cfg.export.detector_input_size,
            "batch_size": cfg.export.detector_batch_size,
            "learning_rate": cfg.export.detector_learning_rate,
        },
        "seed": cfg.seed,
        "config_digest": config_digest(cfg),
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"YOLO export: {stats['train']} train / {stats['val']} val "
          f"({stats['preprocessed']} preprocessed, {stats['flipped']} flipped) -> {root}")
    if skipped:
        print(f"  skipped unlabeled: {len(skipped)}")
    _write_run_json(cfg, "export-yolo", t0, extra=meta)
    return 0


# --- report ----------------------------------------------------------------------


def cmd_report(cfg: PipelineConfig, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t0 = time.monotonic()
    stage = cfg.stage_dir("report")
    stage.mkdir(parents=True, exist_ok=True)
    made = []

    loss_csv = cfg.stage_dir("train-gan") / "loss.csv"
    if loss_csv.exists():
        rows = read_loss_log(loss_csv)
        steps = np.arange(len(rows))
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        ax1.plot(steps, [r["total"] for r in rows], label="total")
        ax1.plot(steps, [r["gan_total"] for r in rows], label="adversarial")
        ax1.set_xlabel("step"), ax1.set_ylabel("loss"), ax1.legend()
        ax2.plot(steps, [r["cycle_total"] for r in rows], label="cycle", color="tab:green")
        ax2.set_xlabel("step"), ax2.legend()
        fig.tight_layout()
        out = stage / "loss_curves.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        made.append(str(out))

    metrics_csv = cfg.stage_dir("train-classifier") / "metrics.csv"
    if metrics_csv.exists():
        with open(metrics_csv) as fh:
            rows = list(csv.DictReader(fh))
        epochs = [int(r["epoch"]) for r in rows]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        for key, style in (("loss", "-"), ("val_loss", "--")):
            ax1.plot(epochs, [float(r[key]) for r in rows], style, label=key)
        for key, style in (("accuracy", "-"), ("val_accuracy", "--")):
            ax2.plot(epochs, [float(r[key]) for r in rows], style, label=key)
        ax1.set_xlabel("epoch"), ax1.legend()
        ax2.set_xlabel("epoch"), ax2.set_ylim(0, 1.02), ax2.legend()
        fig.tight_layout()
        out = stage / "classifier_curves.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        made.append(str(out))

    if not made:
        raise MissingArtifactError(
            "nothing to plot: no loss.csv or metrics.csv under the output root; "
            "run `train-gan` or `train-classifier` first",
            producing_command="train-gan",
        )
    for path in made:
        print(f"wrote {path}")
    _write_run_json(cfg, "report", t0, extra={"plots": made})
    return 0


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwgen",
        description="Underwater-appearance image generation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="pipeline config (.yaml/.json)")
        p.set_defaults(fn=fn)
        return p

    p = add("prepare", cmd_prepare, "crop labeled objects into a class tree")
    p.add_argument("--image-root", default=None, help="override the lab image directory")
    p.add_argument("--labels-root", default=None, help="override the label directory")

    add("augment", cmd_augment, "expand object crops with seeded classic transforms")

    p = add("train-gan", cmd_train_gan, "train the two-domain translation model")
    p.add_argument("--epochs", type=int, default=None, help="override configured epochs")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=1,
                   help="save a checkpoint every N epochs")

    p = add("generate", cmd_generate, "translate a dataset with a trained generator")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: latest)")
    p.add_argument("--source", choices=("lab", "uw"), default="lab")
    p.add_argument("--mode", choices=("translate", "rebuild"), default="translate")

    p = add("train-classifier", cmd_train_classifier, "train the 5-way crop classifier")
    p.add_argument("--source", choices=("crops", "augmented"), default="crops")
    p.add_argument("--dropout", type=float, default=0.0)

    p = add("fid", cmd_fid, "score generated images against a real set")
    p.add_argument("--dir-a", default=None, help="first image directory")
    p.add_argument("--dir-b", default=None, help="second image directory")
    p.add_argument("--pair-name", default="custom")

    add("export-yolo", cmd_export_yolo, "write a darknet-style detection dataset")
    add("report", cmd_report, "render loss/metric curves to PNG")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        dump_config(cfg, cfg.stage_dir("config") / "resolved.json")
        return args.fn(cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
