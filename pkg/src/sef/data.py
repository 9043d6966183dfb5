"""Synthetic part-composition images and the SEFD dataset file format.

Every class is a distinct tuple of glyph ids. Glyph ``p`` of the tuple is
stamped into grid cell ``p`` of the image, so each class is identified by
several small, spatially separated parts. Each part slot has its own family
of ``alphabet_size`` glyphs, so parts differ in appearance and not only in
position.

SEFD layout (little-endian)::

    b"SEFD" | u32 version=1 | u32 N | u32 channels | u32 height | u32 width
    | u32 class_count | N*channels*height*width u8 pixels | N u16 labels
"""

import itertools
import struct
from dataclasses import dataclass, replace
from math import ceil, sqrt

import numpy as np

MAGIC = b"SEFD"
VERSION = 1
HEADER = struct.Struct("<4sIIIIII")
GLYPH_SIZE = 5
GLYPH_SEED = 0x5EF
BACKGROUND = 32.0
FOREGROUND = 224.0
# pixel statistics of the default synthetic set, used to standardize inputs
INPUT_MEAN = 52.0
INPUT_STD = 56.0


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 16
    parts_per_image: int = 2
    alphabet_size: int = 8
    image_size: int = 32
    jitter: int = 2
    noise_sigma: float = 8.0
    train_per_class: int = 128
    test_per_class: int = 64
    seed: int = 0
    glyph_scale: int = 2
    val_fraction: float = 0.1

    def grid(self):
        cols = ceil(sqrt(self.parts_per_image))
        rows = ceil(self.parts_per_image / cols)
        return rows, cols

    def validate(self):
        if self.class_count > self.alphabet_size ** self.parts_per_image:
            raise ValueError(
                f"class space exhausted: {self.class_count} classes > "
                f"{self.alphabet_size}^{self.parts_per_image} glyph tuples")
        if self.class_count < 1 or self.parts_per_image < 1 or self.alphabet_size < 1:
            raise ValueError("class_count, parts_per_image and alphabet_size must be >= 1")
        if self.alphabet_size * self.parts_per_image > 2 ** (GLYPH_SIZE * GLYPH_SIZE) // 2:
            raise ValueError("alphabet larger than the number of distinct glyphs")
        rows, cols = self.grid()
        need = GLYPH_SIZE * self.glyph_scale + 2 * self.jitter
        if self.image_size // rows < need or self.image_size // cols < need:
            raise ValueError(
                f"image_size {self.image_size} too small for a {rows}x{cols} grid of "
                f"{GLYPH_SIZE * self.glyph_scale}px glyphs with jitter {self.jitter}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, S, S] uint8
    labels: np.ndarray  # [N] int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split=None):
        return Dataset(self.images[index], self.labels[index], self.class_count,
                       split or self.split)

    def equals(self, other):
        return (self.class_count == other.class_count
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


def glyph_bank(count):
    """``count`` distinct, non-empty 5x5 binary glyphs, fixed per glyph id."""
    rng = np.random.default_rng(GLYPH_SEED)
    glyphs, seen = [], set()
    while len(glyphs) < count:
        g = rng.random((GLYPH_SIZE, GLYPH_SIZE)) < 0.5
        key = g.tobytes()
        if g.sum() < 6 or key in seen:
            continue
        seen.add(key)
        glyphs.append(g)
    return np.stack(glyphs)


def class_tuples(spec):
    """The glyph-id tuple of every class (a seeded choice of distinct tuples)."""
    spec.validate()
    all_tuples = list(itertools.product(range(spec.alphabet_size), repeat=spec.parts_per_image))
    rng = np.random.default_rng([spec.seed, 1])
    pick = rng.permutation(len(all_tuples))[:spec.class_count]
    return [all_tuples[i] for i in sorted(pick)]


def _render(spec, glyphs, tuples, per_class, rng, split):
    rows, cols = spec.grid()
    cell_h, cell_w = spec.image_size // rows, spec.image_size // cols
    side = GLYPH_SIZE * spec.glyph_scale
    scaled = np.kron(glyphs, np.ones((spec.glyph_scale, spec.glyph_scale))).astype(bool)
    s = spec.image_size
    n = spec.class_count * per_class
    images = np.zeros((n, 3, s, s), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.class_count), per_class)
    for idx, label in enumerate(labels):
        canvas = np.full((s, s), BACKGROUND)
        for part, symbol in enumerate(tuples[label]):
            glyph_id = part * spec.alphabet_size + symbol
            r, c = divmod(part, cols)
            top = r * cell_h + (cell_h - side) // 2
            left = c * cell_w + (cell_w - side) // 2
            if spec.jitter:
                dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
                top, left = top + dy, left + dx
            canvas[top:top + side, left:left + side][scaled[glyph_id]] = FOREGROUND
        if spec.noise_sigma > 0:
            canvas = canvas + rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
        images[idx] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)[None]
    return Dataset(images, labels, spec.class_count, split)


def split_validation(ds, fraction, seed):
    """Stratified hold-out: ``round(fraction * n_c)`` samples of each class go to val."""
    if fraction <= 0:
        return ds, ds.subset(np.zeros(0, dtype=np.int64), "val")
    rng = np.random.default_rng([seed, 2])
    val_idx = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        k = int(round(fraction * len(members)))
        val_idx.extend(members[rng.permutation(len(members))[:k]])
    val_idx = np.sort(np.asarray(val_idx, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(ds)), val_idx)
    return ds.subset(keep, ds.split), ds.subset(val_idx, "val")


def generate_full(spec):
    """Return the complete train split (before the val hold-out) and the test split."""
    spec.validate()
    glyphs = glyph_bank(spec.alphabet_size * spec.parts_per_image)
    tuples = class_tuples(spec)
    train_rng, test_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(spec.seed).spawn(2))
    train = _render(spec, glyphs, tuples, spec.train_per_class, train_rng, "train")
    test = _render(spec, glyphs, tuples, spec.test_per_class, test_rng, "test")
    return train, test


def generate(spec):
    """Return ``(train, val, test)``; val is a stratified slice of the training samples."""
    train, test = generate_full(spec)
    train, val = split_validation(train, spec.val_fraction, spec.seed)
    return train, val, test


def to_input(images):
    """uint8 images -> standardized float64 network input."""
    return (np.asarray(images, dtype=np.float64) - INPUT_MEAN) / INPUT_STD


def dataset_bytes(ds):
    n, c, h, w = ds.images.shape
    if ds.labels.size and ds.labels.max() > 0xFFFF:
        raise DatasetFormatError("labels do not fit in u16")
    header = HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.class_count)
    return header + ds.images.tobytes() + ds.labels.astype("<u2").tobytes()


def write_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def parse_dataset(buf, split="train"):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic at offset 0")
    if len(buf) < HEADER.size:
        raise DatasetFormatError(
            f"truncated header: expected {HEADER.size} bytes, got {len(buf)} (offset {len(buf)})")
    _, version, n, c, h, w, k = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    pix = n * c * h * w
    expected = HEADER.size + pix + 2 * n
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "trailing data in"
        raise DatasetFormatError(
            f"{kind} file: expected {expected} bytes, got {len(buf)} "
            f"(payload starts at offset {HEADER.size})")
    images = np.frombuffer(buf, dtype=np.uint8, count=pix, offset=HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=HEADER.size + pix).astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DatasetFormatError(
            f"label {labels[bad]} >= class_count {k} at offset {HEADER.size + pix + 2 * bad}")
    return Dataset(images.copy(), labels, k, split)


def read_dataset(path, split="train"):
    with open(path, "rb") as fh:
        return parse_dataset(fh.read(), split)


def with_split(ds, split):
    return replace(ds, split=split)
