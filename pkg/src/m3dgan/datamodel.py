"""Core value types, model configuration and the translation-task registry.

Everything here is an immutable value object; arrays are frozen on
construction so instances are safe to share across threads and workers.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np


class Modality(str, enum.Enum):
    """Data type class of a sample; speech-like data travels as SEQUENCE frames."""

    IMAGE = "image"
    TEXT = "text"
    SEQUENCE = "sequence"


class LatentOrigin(str, enum.Enum):
    SAMPLED_PRIOR = "sampled_prior"
    ENCODED_REFERENCE = "encoded_reference"


class ReferencePolicy(str, enum.Enum):
    GROUND_TRUTH_TARGET = "ground_truth_target"
    RANDOM_TARGET_SAMPLE = "random_target_sample"
    NONE = "none"


class ContractError(ValueError):
    """A caller violated an operation's stated contract."""


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    """One modality-tagged tensor.

    Images are (C, H, W) floats in [-1, 1]; text is a 1-D int id sequence;
    sequences are (T, F) float frames.
    """

    modality: Modality
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.modality == Modality.TEXT:
            if data.ndim != 1 or data.dtype.kind not in "iu":
                raise ContractError("text sample must be a 1-D integer id array")
            if data.size and data.min() < 0:
                raise ContractError("text ids must be non-negative")
            data = data.astype(np.int32)
        elif self.modality == Modality.IMAGE:
            if data.ndim != 3:
                raise ContractError("image sample must be (C, H, W)")
            data = data.astype(np.float32, copy=False)
            if data.size and (data.min() < -1.0 - 1e-5 or data.max() > 1.0 + 1e-5):
                raise ContractError("image values must lie in [-1, 1]")
        elif self.modality == Modality.SEQUENCE:
            if data.ndim != 2 or data.shape[0] < 1:
                raise ContractError("sequence sample must be (T, F) with T >= 1")
            data = data.astype(np.float32, copy=False)
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ContractError("sample data must be finite")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self):
        return tuple(self.data.shape)

    def equals(self, other):
        return self.modality == other.modality and self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class PairedExample:
    """A (source, target, reference) training triple.

    During training the reference is the ground-truth target, so target
    and reference always share a modality.
    """

    source: Sample
    target: Sample
    reference: Sample

    def __post_init__(self):
        if self.target.modality != self.reference.modality:
            raise ContractError("target and reference must share a modality")


@dataclass(frozen=True, eq=False)
class LatentCode:
    """A latent vector plus where it came from.

    ``node`` optionally carries the autodiff tensor that produced the
    values so training losses stay differentiable; value-level consumers
    ignore it.
    """

    values: np.ndarray
    origin: LatentOrigin
    node: object = dataclasses.field(default=None, compare=False, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim not in (1, 2):
            raise ContractError("latent values must be a vector or a batch of vectors")
        if not np.all(np.isfinite(vals)):
            raise ContractError("latent values must be finite")
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def dim(self):
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class LossWeights:
    """Scalar coefficients combining the translation objective's terms."""

    lambda_rec: float = 10.0
    lambda_kl: float = 0.01
    lambda_lat: float = 0.5
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_3: float = 0.05

    def validate(self):
        errors = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                errors.append(f"LossWeights.{f.name} must be finite and >= 0, got {v}")
        return errors


@dataclass(frozen=True)
class TaskSpec:
    """Declarative record of one translation task.

    ``t_enc``/``t_sam`` say which inference outputs the task supports:
    reference-conditioned synthesis and prior-sampled synthesis.
    """

    name: str
    source_modality: Modality
    target_modality: Modality
    train_reference_policy: ReferencePolicy
    test_reference_policy: ReferencePolicy
    t_enc: bool
    t_sam: bool

    def __post_init__(self):
        if self.test_reference_policy == ReferencePolicy.NONE and self.t_enc:
            raise ContractError(f"task {self.name}: no test-time reference implies t_enc must be false")


@dataclass(frozen=True)
class ModelConfig:
    """All architecture and training knobs.

    Field defaults are the faithful preset sizes; ``desk()`` and
    ``micro()`` shrink them for laptop-scale experiments and
    finite-difference checks.  Every network shape derives from these
    fields; nothing is hard-coded.
    """

    latent_dim: int = 64
    n_tokens: int = 10
    n_heads: int = 4
    token_dim: int = 128
    # reference encoder: 2-D conv stack, time resolution preserved, then a GRU
    ref_encoder_channels: tuple = (64, 64, 128, 128)
    ref_encoder_feat_strides: tuple = (2, 2, 2, 2)
    ref_encoder_time_strides: tuple = (1, 1, 1, 1)
    ref_gru_units: int = 128
    # image/sequence prenet
    prenet_conv_channels: tuple = (32, 32)
    # text prenet (character pipeline with a 1-D conv bank)
    char_embed_dim: int = 128
    text_fc_units: tuple = (256, 128)
    conv1d_bank_size: int = 16
    conv1d_bank_units: int = 128
    text_post_fc_units: tuple = (128, 128, 128, 128)
    text_bigru_units: int = 128
    vocab_size: int = 64
    # sequence generator
    generator_gru_units: int = 256
    # image generator: residual conv down / deconv up stacks
    image_gen_channels: tuple = (64, 128, 128, 256, 256, 256)
    image_down_strides: tuple = (2, 2, 1, 1, 1, 1)
    disc_channels: tuple = (32, 64, 128)
    disc_cond_channels: int = 16
    # behaviour flags
    gan_nonsaturating: bool = True
    rec_norm: str = "l1"
    dist_norm: str = "l1"
    kl_pre_utl: bool = False
    recovery_through_utl: bool = True
    use_token_layer: bool = True
    z_inject: str = "bottleneck"
    latent_recovery_use_mu: bool = True
    weight_sharing: str = "per_modality"
    logvar_clamp: float = 10.0
    dist_eps: float = 1e-6
    # optimisation
    adam_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 30
    steps: int = 0  # when > 0, overrides epochs
    d_steps: int = 1
    diverged_patience: int = 10
    checkpoint_every: int = 0  # 0 = final checkpoint only
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def total_steps(self, n_examples):
        if self.steps > 0:
            return self.steps
        return self.epochs * max(1, math.ceil(n_examples / self.batch_size))


_POSITIVE_INT_FIELDS = (
    "latent_dim",
    "n_tokens",
    "n_heads",
    "token_dim",
    "ref_gru_units",
    "char_embed_dim",
    "conv1d_bank_size",
    "conv1d_bank_units",
    "text_bigru_units",
    "vocab_size",
    "generator_gru_units",
    "disc_cond_channels",
    "batch_size",
    "d_steps",
    "diverged_patience",
)

_POSITIVE_TUPLE_FIELDS = (
    "ref_encoder_channels",
    "ref_encoder_feat_strides",
    "ref_encoder_time_strides",
    "prenet_conv_channels",
    "text_fc_units",
    "text_post_fc_units",
    "image_gen_channels",
    "image_down_strides",
    "disc_channels",
)

_CHOICE_FIELDS = {
    "rec_norm": ("l1", "l2"),
    "dist_norm": ("l1", "l2"),
    "z_inject": ("bottleneck", "input"),
    "weight_sharing": ("per_modality", "per_task"),
}


def validate_config(cfg: ModelConfig):
    """Return a list of invariant violations; an empty list means ok."""
    errors = []
    for name in _POSITIVE_INT_FIELDS:
        v = getattr(cfg, name)
        if not isinstance(v, int) or v < 1:
            errors.append(f"{name} must be >= 1, got {v!r}")
    for name in _POSITIVE_TUPLE_FIELDS:
        tup = getattr(cfg, name)
        if not tup or any((not isinstance(v, int)) or v < 1 for v in tup):
            errors.append(f"{name} must be a non-empty tuple of ints >= 1, got {tup!r}")
    if isinstance(cfg.n_heads, int) and isinstance(cfg.token_dim, int) and cfg.n_heads >= 1 and cfg.token_dim % max(cfg.n_heads, 1) != 0:
        errors.append(f"token_dim ({cfg.token_dim}) must be divisible by n_heads ({cfg.n_heads})")
    if len(cfg.ref_encoder_feat_strides) != len(cfg.ref_encoder_channels):
        errors.append("ref_encoder_feat_strides length must match ref_encoder_channels")
    if len(cfg.ref_encoder_time_strides) != len(cfg.ref_encoder_channels):
        errors.append("ref_encoder_time_strides length must match ref_encoder_channels")
    if len(cfg.image_down_strides) != len(cfg.image_gen_channels):
        errors.append("image_down_strides length must match image_gen_channels")
    if any(s not in (1, 2) for s in cfg.image_down_strides):
        errors.append("image_down_strides entries must be 1 or 2")
    for name, choices in _CHOICE_FIELDS.items():
        if getattr(cfg, name) not in choices:
            errors.append(f"{name} must be one of {choices}")
    for name in ("adam_lr", "adam_beta1", "adam_beta2", "logvar_clamp", "dist_eps"):
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            errors.append(f"{name} must be a positive finite number, got {v!r}")
    if cfg.epochs < 0 or cfg.steps < 0:
        errors.append("epochs and steps must be >= 0")
    if cfg.epochs == 0 and cfg.steps == 0:
        errors.append("one of epochs or steps must be positive")
    if cfg.seed < 0:
        errors.append("seed must be >= 0")
    errors.extend(cfg.loss_weights.validate())
    return errors


# ---------------------------------------------------------------------------
# presets


def paper_faithful(task_name="image→image"):
    """Full-size configuration; image-to-image trains 30 epochs at batch 1."""
    batch = 1 if task_name in ("image→image", "shapes→shapes") else 32
    return ModelConfig(batch_size=batch, epochs=30)


def desk(seed=0):
    """Laptop-scale configuration for the synthetic experiments."""
    return ModelConfig(
        latent_dim=8,
        n_tokens=8,
        n_heads=2,
        token_dim=32,
        ref_encoder_channels=(8, 12, 16, 16),
        ref_encoder_feat_strides=(2, 2, 2, 2),
        ref_encoder_time_strides=(2, 2, 1, 1),
        ref_gru_units=32,
        prenet_conv_channels=(12, 12),
        char_embed_dim=16,
        text_fc_units=(32, 24),
        conv1d_bank_size=4,
        conv1d_bank_units=24,
        text_post_fc_units=(24, 24),
        text_bigru_units=16,
        vocab_size=16,
        generator_gru_units=32,
        image_gen_channels=(16, 24, 32, 32, 32, 32),
        image_down_strides=(2, 2, 1, 1, 1, 1),
        disc_channels=(12, 24, 32),
        disc_cond_channels=8,
        adam_lr=1e-3,
        batch_size=8,
        epochs=0,
        steps=600,
        seed=seed,
    )


def micro(seed=0):
    """Tiny configuration for finite-difference gradient verification."""
    return ModelConfig(
        latent_dim=3,
        n_tokens=3,
        n_heads=1,
        token_dim=6,
        ref_encoder_channels=(3, 4),
        ref_encoder_feat_strides=(2, 2),
        ref_encoder_time_strides=(2, 1),
        ref_gru_units=6,
        prenet_conv_channels=(3, 3),
        char_embed_dim=4,
        text_fc_units=(6, 5),
        conv1d_bank_size=2,
        conv1d_bank_units=5,
        text_post_fc_units=(5,),
        text_bigru_units=4,
        vocab_size=12,
        generator_gru_units=6,
        image_gen_channels=(4, 5),
        image_down_strides=(2, 1),
        disc_channels=(4, 5),
        disc_cond_channels=3,
        batch_size=2,
        epochs=0,
        steps=10,
        seed=seed,
    )


PRESETS = {"paper": paper_faithful, "desk": desk, "micro": micro}


# ---------------------------------------------------------------------------
# task registry

ARROW = "→"


def _task(name, src, tgt, train_pol, test_pol, t_enc, t_sam):
    return TaskSpec(name, src, tgt, train_pol, test_pol, t_enc, t_sam)


def task_registry():
    """All registered translation tasks and their inference-output flags."""
    gt = ReferencePolicy.GROUND_TRUTH_TARGET
    rand = ReferencePolicy.RANDOM_TARGET_SAMPLE
    none = ReferencePolicy.NONE
    img, txt, seq = Modality.IMAGE, Modality.TEXT, Modality.SEQUENCE
    return [
        _task(f"image{ARROW}image", img, img, gt, rand, True, True),
        _task(f"text{ARROW}image", txt, img, gt, none, False, True),
        _task(f"image{ARROW}text", img, txt, gt, none, False, True),
        _task(f"text{ARROW}speech", txt, seq, gt, rand, True, True),
        _task(f"speech{ARROW}text", seq, txt, gt, none, False, True),
        _task(f"text{ARROW}text", txt, txt, gt, none, False, True),
        # synthetic desk-scale tasks
        _task(f"shapes{ARROW}shapes", img, img, gt, rand, True, True),
        _task(f"captions{ARROW}shapes", txt, img, gt, none, False, True),
        _task(f"waves{ARROW}waves", seq, seq, gt, rand, True, True),
    ]


def lookup_task(name):
    name = name.replace("->", ARROW)
    for spec in task_registry():
        if spec.name == name:
            return spec
    known = ", ".join(t.name for t in task_registry())
    raise ContractError(f"unknown task {name!r}; registered tasks: {known}")


# ---------------------------------------------------------------------------
# flat key/value config files


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_config(cfg: ModelConfig, path):
    """Write a flat key=value file mirroring the config field names."""
    lines = []
    for f in dataclasses.fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name == "loss_weights":
            for wf in dataclasses.fields(LossWeights):
                lines.append(f"{wf.name} = {_format_value(getattr(v, wf.name))}")
        else:
            lines.append(f"{f.name} = {_format_value(v)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_value(raw, f):
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        if raw not in ("true", "false"):
            raise ValueError(f"{f.name}: expected true/false, got {raw!r}")
        return raw == "true"
    if f.type in ("tuple", tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def load_config(path):
    """Parse a flat key=value config file into a ModelConfig."""
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    wfields = {f.name: f for f in dataclasses.fields(LossWeights)}
    kwargs = {}
    wkwargs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in wfields:
                wkwargs[key] = float(raw)
            elif key in fields:
                kwargs[key] = _parse_value(raw, fields[key])
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    if wkwargs:
        kwargs["loss_weights"] = LossWeights(**wkwargs)
    return ModelConfig(**kwargs)
