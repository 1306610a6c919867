"""Synthetic one-to-many paired datasets plus their closed-form oracles.

Three families: colored shapes (silhouette -> styled fill), toy captions
(three-word text -> styled shape image) and styled sequences (content
curve -> spectral-envelope-modulated frames).  Style labels are kept in a
sidecar, never fed to the model, so training remains label-free; the
oracles that consume them are deterministic closed-form classifiers.

Per-example generation derives an independent seed from (seed, index),
so regeneration is byte-identical regardless of worker count.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .archive import ArchiveError, read_tensor, write_tensor
from .datamodel import ContractError, Modality, PairedExample, Sample

PALETTE_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange")
PALETTE = np.array(
    [
        [0.8, -0.8, -0.8],
        [-0.8, 0.8, -0.8],
        [-0.8, -0.8, 0.8],
        [0.8, 0.8, -0.8],
        [0.8, -0.8, 0.8],
        [-0.8, 0.8, 0.8],
        [0.8, 0.8, 0.8],
        [0.8, 0.0, -0.8],
    ],
    dtype=np.float32,
)

SHAPE_NAMES = ("circle", "square", "triangle", "bar")

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ShapeStyleSpec:
    resolution: int = 32
    k_styles: int = 4
    n_examples: int = 2000
    seed: int = 0

    def validate(self):
        if self.k_styles < 2:
            raise ContractError("k_styles must be >= 2 for one-to-many data")
        if self.k_styles > len(PALETTE):
            raise ContractError(f"at most {len(PALETTE)} styles available")
        if self.resolution < 16:
            raise ContractError("resolution must be >= 16")


@dataclass(frozen=True)
class CaptionImageSpec:
    resolution: int = 32
    k_styles: int = 4
    n_examples: int = 1000
    color_drop_prob: float = 0.5
    seed: int = 0

    def validate(self):
        if self.k_styles < 2 or self.k_styles > len(PALETTE):
            raise ContractError(f"k_styles must be in [2, {len(PALETTE)}]")
        if not 0.0 <= self.color_drop_prob <= 1.0:
            raise ContractError("color_drop_prob must be a probability")


@dataclass(frozen=True)
class SequenceStyleSpec:
    feat_dim: int = 8
    min_len: int = 8
    max_len: int = 16
    k_styles: int = 4
    n_examples: int = 1000
    seed: int = 0
    envelope_margin: float = 0.5

    def validate(self):
        if self.k_styles < 2:
            raise ContractError("k_styles must be >= 2 for one-to-many data")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError("need 1 <= min_len <= max_len")
        if self.feat_dim < 2:
            raise ContractError("feat_dim must be >= 2")


@dataclass
class PairedDataset:
    task_name: str
    examples: list
    style_labels: np.ndarray
    content_labels: np.ndarray
    spec_fields: dict = field(default_factory=dict)
    vocab: tuple = ()

    def __len__(self):
        return len(self.examples)

    def split(self, n_test):
        """Deterministic tail split into (train, test)."""
        if not 0 < n_test < len(self.examples):
            raise ContractError("n_test must be inside the dataset size")
        cut = len(self.examples) - n_test
        head = PairedDataset(self.task_name, self.examples[:cut], self.style_labels[:cut], self.content_labels[:cut], dict(self.spec_fields), self.vocab)
        tail = PairedDataset(self.task_name, self.examples[cut:], self.style_labels[cut:], self.content_labels[cut:], dict(self.spec_fields), self.vocab)
        return head, tail

    def equals(self, other):
        if (
            self.task_name != other.task_name
            or len(self) != len(other)
            or self.vocab != other.vocab
            or not np.array_equal(self.style_labels, other.style_labels)
            or not np.array_equal(self.content_labels, other.content_labels)
        ):
            return False
        for a, b in zip(self.examples, other.examples):
            if not (a.source.equals(b.source) and a.target.equals(b.target) and a.reference.equals(b.reference)):
                return False
        return True


def _example_rng(seed, index):
    return np.random.default_rng([seed, index])


def _balanced_assignment(n, k, rng):
    arr = np.tile(np.arange(k), n // k + 1)[:n]
    rng.shuffle(arr)
    return arr


def _shape_mask(res, shape_idx, rng):
    """Rasterize one shape with jittered center and size; returns bool (res, res)."""
    yy, xx = np.mgrid[0:res, 0:res]
    jit = res // 8
    name = SHAPE_NAMES[shape_idx]
    if name == "circle":
        r = int(rng.integers(res // 6, res // 4 + 1))
        cx = int(rng.integers(r + 1, res - r - 1))
        cy = int(rng.integers(r + 1, res - r - 1))
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if name == "square":
        s = int(rng.integers(res // 6, res // 4 + 1))
        cx = int(rng.integers(s + 1, res - s - 1))
        cy = int(rng.integers(s + 1, res - s - 1))
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    if name == "triangle":
        b = int(rng.integers(res // 5, res // 3 + 1))
        cx = int(rng.integers(b + 1, res - b - 1))
        cy = int(rng.integers(b + 1, res - b - 1))
        rel = (yy - (cy - b)) / (2.0 * b)
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= b * rel)
    # bar: wide and short so the aspect ratio separates it
    hw = int(rng.integers(res // 3, res // 2 - 2))
    hh = max(2, res // 16)
    cx = int(rng.integers(hw + 1, res - hw - 1))
    cy = int(rng.integers(hh + 1 + jit, res - hh - 1 - jit))
    return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)


def _styled_image(mask, style):
    res = mask.shape[0]
    img = np.full((3, res, res), -1.0, dtype=np.float32)
    img[:, mask] = PALETTE[style][:, None]
    return img


def _silhouette(mask):
    return np.where(mask, 1.0, -1.0).astype(np.float32)[None, :, :]


def gen_colored_shapes(spec: ShapeStyleSpec):
    """Silhouette -> styled-fill image pairs; reference is the target."""
    spec.validate()
    top = np.random.default_rng([spec.seed, 0xC0105])
    styles = _balanced_assignment(spec.n_examples, spec.k_styles, top)
    classes = _balanced_assignment(spec.n_examples, len(SHAPE_NAMES), top)
    examples = []
    for i in range(spec.n_examples):
        rng = _example_rng(spec.seed, i)
        mask = _shape_mask(spec.resolution, classes[i], rng)
        src = Sample(Modality.IMAGE, _silhouette(mask))
        tgt = Sample(Modality.IMAGE, _styled_image(mask, styles[i]))
        examples.append(PairedExample(src, tgt, tgt))
    return PairedDataset(
        "shapes→shapes",
        examples,
        styles.astype(np.int64),
        classes.astype(np.int64),
        {f.name: str(getattr(spec, f.name)) for f in fields(spec)},
    )


def caption_vocab(k_styles):
    return ("<pad>", "a") + PALETTE_NAMES[:k_styles] + SHAPE_NAMES


def caption_to_ids(words, vocab):
    """Map caption words to ids, padded to length 3; unknown words error."""
    idx = {w: i for i, w in enumerate(vocab)}
    unknown = [w for w in words if w not in idx]
    if unknown:
        raise ContractError(f"unknown word(s) in vocabulary build: {unknown}")
    ids = [idx[w] for w in words]
    while len(ids) < 3:
        ids.insert(1, 0)
    return np.array(ids[:3], dtype=np.int32)


def gen_toy_captions(spec: CaptionImageSpec):
    """Caption -> styled shape image; dropping the color word makes the
    mapping genuinely one-to-many."""
    spec.validate()
    vocab = caption_vocab(spec.k_styles)
    top = np.random.default_rng([spec.seed, 0xCA9])
    styles = _balanced_assignment(spec.n_examples, spec.k_styles, top)
    classes = _balanced_assignment(spec.n_examples, len(SHAPE_NAMES), top)
    examples = []
    for i in range(spec.n_examples):
        rng = _example_rng(spec.seed, i)
        mask = _shape_mask(spec.resolution, classes[i], rng)
        drop_color = rng.random() < spec.color_drop_prob
        shape_word = SHAPE_NAMES[classes[i]]
        if drop_color:
            words = ["a", shape_word]
        else:
            words = ["a", PALETTE_NAMES[styles[i]], shape_word]
        src = Sample(Modality.TEXT, caption_to_ids(words, vocab))
        tgt = Sample(Modality.IMAGE, _styled_image(mask, styles[i]))
        examples.append(PairedExample(src, tgt, tgt))
    return PairedDataset(
        "captions→shapes",
        examples,
        styles.astype(np.int64),
        classes.astype(np.int64),
        {f.name: str(getattr(spec, f.name)) for f in fields(spec)},
        vocab=vocab,
    )


def style_envelopes(k, feat_dim):
    """k positive spectral envelopes, normalized to unit mean."""
    centers = (np.arange(k) + 0.5) / k * (feat_dim - 1)
    width = max(feat_dim / (2.5 * k), 0.8)
    f = np.arange(feat_dim)
    env = 0.25 + np.exp(-0.5 * ((f[None, :] - centers[:, None]) / width) ** 2)
    env /= env.mean(axis=1, keepdims=True)
    return env.astype(np.float32)


def gen_sequence_styles(spec: SequenceStyleSpec):
    """Content curve -> envelope-modulated frames.

    Examples come in pairs sharing one content curve under two different
    styles, so one-to-many structure exists by construction.
    """
    spec.validate()
    env = style_envelopes(spec.k_styles, spec.feat_dim)
    dists = np.sqrt(((env[:, None, :] - env[None, :, :]) ** 2).sum(-1))
    off = dists[~np.eye(spec.k_styles, dtype=bool)]
    if off.min() < spec.envelope_margin:
        raise ContractError(f"envelope separation {off.min():.3f} below margin {spec.envelope_margin}")
    top = np.random.default_rng([spec.seed, 0x5E9])
    n_pairs = (spec.n_examples + 1) // 2
    even_styles = _balanced_assignment(n_pairs, spec.k_styles, top)
    offsets = top.integers(1, spec.k_styles, size=n_pairs)
    styles = np.zeros(spec.n_examples, dtype=np.int64)
    examples = []
    contents = []
    for i in range(spec.n_examples):
        m = i // 2
        # both pair members derive the same rng, hence identical content;
        # the odd member gets a guaranteed-different style
        crng = _example_rng(spec.seed, m)
        t = int(crng.integers(spec.min_len, spec.max_len + 1))
        walk = np.cumsum(crng.standard_normal(t))
        walk = (walk - walk.min()) / max(walk.max() - walk.min(), 1e-6)
        content = (0.3 + 0.7 * walk).astype(np.float32)
        styles[i] = even_styles[m] if i % 2 == 0 else (even_styles[m] + offsets[m]) % spec.k_styles
        src = np.repeat(content[:, None], spec.feat_dim, axis=1)
        tgt = content[:, None] * env[styles[i]][None, :]
        examples.append(PairedExample(Sample(Modality.SEQUENCE, src), Sample(Modality.SEQUENCE, tgt), Sample(Modality.SEQUENCE, tgt)))
        contents.append(m)
    return PairedDataset(
        "waves→waves",
        examples,
        styles,
        np.array(contents, dtype=np.int64),
        {f.name: str(getattr(spec, f.name)) for f in fields(spec)},
    )


# ---------------------------------------------------------------------------
# closed-form oracles


class PaletteOracle:
    """Classify an image's fill color as the nearest palette entry.

    Pixels brighter than the background threshold in any channel count as
    foreground; images with almost no foreground, or a mean color far from
    every palette entry, are unclassifiable (None).
    """

    def __init__(self, k_styles, fg_threshold=-0.5, min_coverage=0.02, max_distance=1.0):
        self.k = k_styles
        self.fg_threshold = fg_threshold
        self.min_coverage = min_coverage
        self.max_distance = max_distance

    def classify(self, sample):
        img = np.asarray(sample.data if isinstance(sample, Sample) else sample, dtype=np.float64)
        fg = img.max(axis=0) > self.fg_threshold
        if fg.mean() < self.min_coverage:
            return None
        mean_rgb = img[:, fg].mean(axis=1)
        d = np.linalg.norm(PALETTE[: self.k] - mean_rgb[None, :], axis=1)
        best = int(np.argmin(d))
        return best if d[best] <= self.max_distance else None


class ShapeClassOracle:
    """Classify the foreground silhouette as circle/square/triangle/bar.

    Uses two scale-invariant features of the foreground mask: bounding-box
    aspect ratio (bars) and fill ratio (square 1.0, circle ~0.69,
    triangle ~0.5).
    """

    def __init__(self, fg_threshold=-0.5, min_pixels=8):
        self.fg_threshold = fg_threshold
        self.min_pixels = min_pixels

    def classify(self, sample):
        img = np.asarray(sample.data if isinstance(sample, Sample) else sample, dtype=np.float64)
        if img.ndim == 3:
            fg = img.max(axis=0) > self.fg_threshold
        else:
            fg = img > self.fg_threshold
        if fg.sum() < self.min_pixels:
            return None
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        h = rows[-1] - rows[0] + 1
        w = cols[-1] - cols[0] + 1
        if w / h >= 2.2:
            return SHAPE_NAMES.index("bar")
        fill = fg.sum() / (h * w)
        if fill >= 0.86:
            return SHAPE_NAMES.index("square")
        if fill >= 0.58:
            return SHAPE_NAMES.index("circle")
        return SHAPE_NAMES.index("triangle")


class EnvelopeOracle:
    """Classify a frame sequence by its nearest spectral envelope."""

    def __init__(self, k_styles, feat_dim, max_distance_ratio=0.75):
        self.env = style_envelopes(k_styles, feat_dim)
        dists = np.sqrt(((self.env[:, None, :] - self.env[None, :, :]) ** 2).sum(-1))
        self.cutoff = max_distance_ratio * dists[~np.eye(k_styles, dtype=bool)].min()

    def classify(self, sample):
        arr = np.asarray(sample.data if isinstance(sample, Sample) else sample, dtype=np.float64)
        profile = np.abs(arr).mean(axis=0)
        m = profile.mean()
        if m < 1e-6:
            return None
        profile = profile / m
        d = np.linalg.norm(self.env - profile[None, :], axis=1)
        best = int(np.argmin(d))
        return best if d[best] <= self.cutoff else None


def oracle_for(dataset: PairedDataset):
    """The style oracle matching a generated dataset."""
    k = int(dataset.spec_fields.get("k_styles", "4"))
    if dataset.task_name.startswith("waves"):
        return EnvelopeOracle(k, int(dataset.spec_fields["feat_dim"]))
    return PaletteOracle(k)


# ---------------------------------------------------------------------------
# persistence

_MODALITY_DIRS = {"source": "src", "target": "tgt"}


def save_dataset(dataset: PairedDataset, out_dir):
    """Write manifest + per-example tensor archives + oracle-only labels."""
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"task = {dataset.task_name}",
        f"n_examples = {len(dataset)}",
        f"source_modality = {dataset.examples[0].source.modality.value}",
        f"target_modality = {dataset.examples[0].target.modality.value}",
        f"vocab = {','.join(dataset.vocab)}",
    ]
    for key in sorted(dataset.spec_fields):
        lines.append(f"spec.{key} = {dataset.spec_fields[key]}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, ex in enumerate(dataset.examples):
        write_tensor(os.path.join(out_dir, "samples", f"{i:06d}.src.m3dt"), ex.source.data)
        write_tensor(os.path.join(out_dir, "samples", f"{i:06d}.tgt.m3dt"), ex.target.data)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "style", "content"])
        for i in range(len(dataset)):
            writer.writerow([i, int(dataset.style_labels[i]), int(dataset.content_labels[i])])


def load_dataset(in_dir):
    """Inverse of save_dataset; round-trips bit-exactly."""
    manifest_path = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ArchiveError(f"{in_dir}: missing manifest.txt")
    meta = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = (part.strip() for part in line.split("=", 1))
                meta[k] = v
    if int(meta.get("format_version", "-1")) != FORMAT_VERSION:
        raise ArchiveError(f"{in_dir}: unsupported dataset format version {meta.get('format_version')}")
    n = int(meta["n_examples"])
    src_mod = Modality(meta["source_modality"])
    tgt_mod = Modality(meta["target_modality"])
    sample_dir = os.path.join(in_dir, "samples")
    present = len([f for f in os.listdir(sample_dir) if f.endswith(".m3dt")]) if os.path.isdir(sample_dir) else 0
    if present != 2 * n:
        raise ArchiveError(f"{in_dir}: manifest lists {n} examples but {present} archives found")
    examples = []
    for i in range(n):
        src = Sample(src_mod, read_tensor(os.path.join(sample_dir, f"{i:06d}.src.m3dt")))
        tgt = Sample(tgt_mod, read_tensor(os.path.join(sample_dir, f"{i:06d}.tgt.m3dt")))
        examples.append(PairedExample(src, tgt, tgt))
    styles = np.zeros(n, dtype=np.int64)
    contents = np.zeros(n, dtype=np.int64)
    with open(os.path.join(in_dir, "labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            idx = int(row["index"])
            styles[idx] = int(row["style"])
            contents[idx] = int(row["content"])
    spec_fields = {k[len("spec.") :]: v for k, v in meta.items() if k.startswith("spec.")}
    vocab = tuple(w for w in meta.get("vocab", "").split(",") if w)
    return PairedDataset(meta["task"], examples, styles, contents, spec_fields, vocab)


def export_ppm(sample: Sample, path):
    """Dump an image sample as binary PPM for eyeballing."""
    if sample.modality != Modality.IMAGE:
        raise ContractError("only image samples export to PPM")
    img = ((np.asarray(sample.data, dtype=np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(img.transpose(1, 2, 0).tobytes())
