"""Network constructors, forward contracts, and checkpoint containers.

Three architectures live here:
  * residual encoder-decoder generators with a global `tanh(x + body(x))`
    skip, so a fresh generator is already close to the identity map;
  * a 70x70-receptive-field patch discriminator emitting unbounded score maps;
  * a small 5-way image classifier (3 conv/pool stages, two dense layers).

Parameters are plain nested dicts of numpy arrays; modules themselves hold no
state, which keeps every forward/backward pure and checkpoints trivial.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ValidationError
from .nn import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    GlobalSkipTanh,
    InstanceNorm2d,
    LeakyReLU,
    MaxPool2d,
    ReLU,
    Residual,
    Sequential,
    UpsampleNearest,
)
from .nn.layers import tree_flatten, tree_unflatten

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 256
    base_channels: int = 64
    residual_blocks: int = 9
    downsample_steps: int = 2

    def __post_init__(self):
        if self.input_size % (2**self.downsample_steps) != 0:
            raise ValidationError(
                f"input_size {self.input_size} not divisible by "
                f"2^{self.downsample_steps} downsample steps"
            )
        if self.base_channels < 1 or self.residual_blocks < 0 or self.downsample_steps < 0:
            raise ValidationError(f"invalid generator config {self}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: int = 256
    base_channels: int = 64
    layers: int = 3  # stride-2 stages before the two stride-1 heads

    def __post_init__(self):
        if self.base_channels < 1 or self.layers < 1:
            raise ValidationError(f"invalid discriminator config {self}")
        if discriminator_output_size(self) < 1:
            raise ValidationError(
                f"input_size {self.input_size} leaves no patch-score map after "
                f"{self.layers} stride-2 stages; use a larger input or fewer layers"
            )


def _res_block(ch):
    return Residual(
        Sequential(
            [
                Conv2d(ch, ch, 3, pad=1),
                InstanceNorm2d(ch),
                ReLU(),
                Conv2d(ch, ch, 3, pad=1),
                InstanceNorm2d(ch),
            ]
        )
    )


@lru_cache(maxsize=None)
def generator_module(cfg: GeneratorConfig) -> GlobalSkipTanh:
    ch = cfg.base_channels
    layers = [Conv2d(3, ch, 7, pad=3), InstanceNorm2d(ch), ReLU()]
    for _ in range(cfg.downsample_steps):
        layers += [Conv2d(ch, ch * 2, 3, stride=2, pad=1), InstanceNorm2d(ch * 2), ReLU()]
        ch *= 2
    layers += [_res_block(ch) for _ in range(cfg.residual_blocks)]
    for _ in range(cfg.downsample_steps):
        layers += [
            UpsampleNearest(2),
            Conv2d(ch, ch // 2, 3, pad=1),
            InstanceNorm2d(ch // 2),
            ReLU(),
        ]
        ch //= 2
    # Zero-initialized head: the residual body contributes nothing at init,
    # so a fresh generator computes tanh(x) and stays near the identity.
    layers += [Conv2d(ch, 3, 7, pad=3, init_std=0.0)]
    return GlobalSkipTanh(Sequential(layers))


@lru_cache(maxsize=None)
def discriminator_module(cfg: DiscriminatorConfig) -> Sequential:
    ch = cfg.base_channels
    layers = [Conv2d(3, ch, 4, stride=2, pad=1), LeakyReLU(0.2)]
    for _ in range(cfg.layers - 1):
        layers += [Conv2d(ch, ch * 2, 4, stride=2, pad=1), InstanceNorm2d(ch * 2), LeakyReLU(0.2)]
        ch *= 2
    layers += [Conv2d(ch, ch * 2, 4, stride=1, pad=1), InstanceNorm2d(ch * 2), LeakyReLU(0.2)]
    layers += [Conv2d(ch * 2, 1, 4, stride=1, pad=1)]
    return Sequential(layers)


def discriminator_output_size(cfg: DiscriminatorConfig) -> int:
    s = cfg.input_size
    for _ in range(cfg.layers):
        s = (s + 2 - 4) // 2 + 1
    for _ in range(2):
        s = s + 2 - 4 + 1
    return s


def build_generator(cfg: GeneratorConfig, seed: int) -> dict:
    return generator_module(cfg).init_params(np.random.default_rng(seed))


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> dict:
    return discriminator_module(cfg).init_params(np.random.default_rng(seed))


def _check_image_batch(x, size, what):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValidationError(f"{what} expects an Nx3xHxW batch, got shape {x.shape}")
    if x.shape[2] != size or x.shape[3] != size:
        raise ValidationError(
            f"{what} expects {size}x{size} inputs, got {x.shape[2]}x{x.shape[3]}"
        )
    return x


def generator_forward(cfg: GeneratorConfig, params: dict, x: np.ndarray) -> np.ndarray:
    """Map a [-1,1] batch to a [-1,1] batch of identical shape."""
    x = _check_image_batch(x, cfg.input_size, "generator")
    y, _ = generator_module(cfg).forward(params, x.astype(np.float32, copy=False))
    return y


def discriminator_forward(cfg: DiscriminatorConfig, params: dict, x: np.ndarray) -> np.ndarray:
    """Score a batch as an Nx1xh'xw' patch map (unbounded reals)."""
    x = _check_image_batch(x, cfg.input_size, "discriminator")
    y, _ = discriminator_module(cfg).forward(params, x.astype(np.float32, copy=False))
    return y


# --- classifier ------------------------------------------------------------

CLASSIFIER_INPUT_SIZE = 150
CLASSIFIER_CLASSES = 5


@lru_cache(maxsize=None)
def classifier_module(dropout_rate: float, input_size: int = CLASSIFIER_INPUT_SIZE) -> Sequential:
    s = input_size
    for _ in range(3):
        s //= 2
    flat = 64 * s * s
    layers = [
        Conv2d(3, 16, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        Conv2d(16, 32, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
        Conv2d(32, 64, 3, pad=1),
        ReLU(),
        MaxPool2d(2),
    ]
    if dropout_rate > 0:
        layers.append(Dropout(dropout_rate))
    layers += [Flatten(), Dense(flat, 128), ReLU(), Dense(128, CLASSIFIER_CLASSES)]
    return Sequential(layers)


@dataclass
class ClassifierModel:
    dropout_rate: float
    input_size: int = CLASSIFIER_INPUT_SIZE
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dropout_rate not in (0.0, 0.2):
            raise ValidationError(
                f"dropout_rate must be 0 or 0.2, got {self.dropout_rate}"
            )

    @property
    def module(self) -> Sequential:
        return classifier_module(self.dropout_rate, self.input_size)


def build_classifier(dropout_rate: float, seed: int = 0, input_size: int = CLASSIFIER_INPUT_SIZE):
    model = ClassifierModel(dropout_rate=float(dropout_rate), input_size=input_size)
    model.params = model.module.init_params(np.random.default_rng(seed))
    return model


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classifier_forward(model: ClassifierModel, x: np.ndarray, train: bool = False, rng=None):
    """Probabilities for a batch of [0,1] HWC (or NCHW) images."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 4 and x.shape[3] == 3 and x.shape[1] != 3:
        x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    s = model.input_size
    if x.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ValidationError(f"classifier expects Nx3x{s}x{s} in [0,1], got shape {x.shape}")
    logits, _ = model.module.forward(model.params, x, train=train, rng=rng)
    return softmax(logits)


# --- checkpoints -----------------------------------------------------------


def config_hash(cfg) -> str:
    doc = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else dict(cfg)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class CycleGanState:
    """Both generators, both discriminators, their optimizer state, and the
    global step.  g_uw renders uw appearance from lab inputs; g_lab the
    reverse.  d_uw judges uw-looking batches, d_lab judges lab-looking ones."""

    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    g_uw: dict
    g_lab: dict
    d_uw: dict
    d_lab: dict
    opt: dict = field(default_factory=dict)
    step: int = 0
    checkpoint_id: str = ""

    def __post_init__(self):
        if self.gen_cfg.input_size != self.disc_cfg.input_size:
            raise ValidationError(
                "generator and discriminator must share input_size; got "
                f"{self.gen_cfg.input_size} vs {self.disc_cfg.input_size}"
            )
        if not self.checkpoint_id:
            self.checkpoint_id = f"mem-step{self.step:08d}-{config_hash(self.gen_cfg)[:8]}"


def init_cyclegan_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int):
    return CycleGanState(
        gen_cfg=gen_cfg,
        disc_cfg=disc_cfg,
        g_uw=build_generator(gen_cfg, seed),
        g_lab=build_generator(gen_cfg, seed + 1),
        d_uw=build_discriminator(disc_cfg, seed + 2),
        d_lab=build_discriminator(disc_cfg, seed + 3),
    )


def _pack_tree(out: dict, prefix: str, tree: dict) -> None:
    for key, arr in tree_flatten(tree).items():
        out[f"{prefix}/{key}"] = arr


def _unpack_trees(archive, prefix: str) -> dict:
    flat = {}
    skip = len(prefix) + 1
    for key in archive.files:
        if key.startswith(prefix + "/"):
            flat[key[skip:]] = archive[key]
    return flat


def save_cyclegan_state(state: CycleGanState, path) -> str:
    """Write a single-file checkpoint; returns its checkpoint id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_id = f"{path.stem}-step{state.step:08d}-{config_hash(state.gen_cfg)[:8]}"
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "cyclegan",
        "step": state.step,
        "checkpoint_id": ckpt_id,
        "gen_cfg": asdict(state.gen_cfg),
        "disc_cfg": asdict(state.disc_cfg),
        "gen_cfg_hash": config_hash(state.gen_cfg),
        "disc_cfg_hash": config_hash(state.disc_cfg),
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for name in ("g_uw", "g_lab", "d_uw", "d_lab"):
        _pack_tree(arrays, f"params/{name}", getattr(state, name))
    for name, tree in state.opt.items():
        _pack_tree(arrays, f"opt/{name}/m", tree["m"])
        _pack_tree(arrays, f"opt/{name}/v", tree["v"])
        arrays[f"opt/{name}/t"] = np.asarray(tree["t"], dtype=np.int64)
    np.savez(path, **arrays)
    return ckpt_id


def _read_header(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
        header = json.loads(bytes(archive["__header__"]).decode())
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {header.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return archive, header


def load_cyclegan_state(path) -> CycleGanState:
    archive, header = _read_header(path)
    if header["kind"] != "cyclegan":
        raise CheckpointError(f"{path} holds a {header['kind']!r} checkpoint, not cyclegan")
    gen_cfg = GeneratorConfig(**header["gen_cfg"])
    disc_cfg = DiscriminatorConfig(**header["disc_cfg"])
    nets = {
        name: tree_unflatten(_unpack_trees(archive, f"params/{name}"))
        for name in ("g_uw", "g_lab", "d_uw", "d_lab")
    }
    opt = {}
    opt_names = {k.split("/")[1] for k in archive.files if k.startswith("opt/")}
    for name in sorted(opt_names):
        opt[name] = {
            "m": tree_unflatten(_unpack_trees(archive, f"opt/{name}/m")),
            "v": tree_unflatten(_unpack_trees(archive, f"opt/{name}/v")),
            "t": int(archive[f"opt/{name}/t"]),
        }
    return CycleGanState(
        gen_cfg=gen_cfg,
        disc_cfg=disc_cfg,
        opt=opt,
        step=header["step"],
        checkpoint_id=header["checkpoint_id"],
        **nets,
    )


def save_classifier(model: ClassifierModel, path, step: int = 0, extra: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_id = f"{path.stem}-step{step:08d}"
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "classifier",
        "step": step,
        "checkpoint_id": ckpt_id,
        "dropout_rate": model.dropout_rate,
        "input_size": model.input_size,
        "extra": extra or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    _pack_tree(arrays, "params/net", model.params)
    np.savez(path, **arrays)
    return ckpt_id


def load_classifier(path) -> ClassifierModel:
    archive, header = _read_header(path)
    if header["kind"] != "classifier":
        raise CheckpointError(f"{path} holds a {header['kind']!r} checkpoint, not classifier")
    model = ClassifierModel(
        dropout_rate=header["dropout_rate"], input_size=header["input_size"]
    )
    model.params = tree_unflatten(_unpack_trees(archive, "params/net"))
    return model
