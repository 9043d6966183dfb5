"""Diagnostics: method scoring, correlation heatmaps, activation maps, ablations.

Image outputs are binary PGM (P5) and PPM (P6) files with maxval 255.
"""

import csv
import dataclasses
import io
import os
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import numpy as np

from . import nn
from . import tensor as T
from .data import to_input
from .losses import LossWeights, channel_correlation, normalize_channels, sef_objective
from .tensor import Tensor


class AnalysisError(ValueError):
    pass


# ------------------------------------------------------------------ scoring

@dataclass
class MethodTable:
    methods: list
    datasets: list
    accuracy: np.ndarray  # [methods, datasets], NaN where missing

    def __post_init__(self):
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if not self.methods or not self.datasets:
            raise AnalysisError("empty method table")
        if self.accuracy.shape != (len(self.methods), len(self.datasets)):
            raise AnalysisError(
                f"accuracy shape {self.accuracy.shape} does not match "
                f"{len(self.methods)} methods x {len(self.datasets)} datasets")
        present = ~np.isnan(self.accuracy)
        for m, row in zip(self.methods, present):
            if not row.any():
                raise AnalysisError(f"method {m!r} has no accuracy entries")
        vals = self.accuracy[present]
        if ((vals < 0) | (vals > 100)).any():
            raise AnalysisError("accuracies must lie in [0, 100]")

    @classmethod
    def from_csv_text(cls, text):
        rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
        if len(rows) < 2:
            raise AnalysisError("empty method table")
        header = [c.strip() for c in rows[0]]
        if not header or header[0] != "method":
            raise AnalysisError("first header cell must be 'method'")
        datasets = header[1:]
        methods, acc = [], []
        for lineno, row in enumerate(rows[1:], 2):
            if len(row) != len(header):
                raise AnalysisError(f"line {lineno}: {len(row)} cells, header has {len(header)}")
            methods.append(row[0].strip())
            try:
                acc.append([float(c) if c.strip() else np.nan for c in row[1:]])
            except ValueError as exc:
                raise AnalysisError(f"line {lineno}: {exc}") from None
        return cls(methods, datasets, np.array(acc))

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return cls.from_csv_text(fh.read())


def bundled_table1():
    """Published accuracies of the 13 compared methods on the four FGIC sets."""
    text = resources.files("sef").joinpath("data/table1.csv").read_text()
    return MethodTable.from_csv_text(text)


@dataclass
class ScoreResult:
    methods: list
    datasets: list
    ranks: np.ndarray  # [methods, datasets] float, NaN where missing
    scores: np.ndarray
    counts: np.ndarray

    def display(self, i):
        """Score of method ``i`` rounded half-up to one decimal."""
        return str(Decimal(repr(float(self.scores[i]))).quantize(Decimal("0.1"), ROUND_HALF_UP))

    def as_dict(self):
        return dict(zip(self.methods, self.scores.tolist()))

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method", "score"] + list(self.datasets))
        for i, m in enumerate(self.methods):
            ranks = ["" if np.isnan(r) else str(int(r)) for r in self.ranks[i]]
            w.writerow([m, repr(float(self.scores[i]))] + ranks)
        return out.getvalue()


def dense_rank_desc(values):
    """1 for the largest value; equal values share a rank, no gaps."""
    values = np.asarray(values, dtype=np.float64)
    distinct = np.unique(values)[::-1]
    return np.searchsorted(-distinct, -values) + 1


def score_table(table):
    acc = table.accuracy
    ranks = np.full(acc.shape, np.nan)
    for d in range(acc.shape[1]):
        present = ~np.isnan(acc[:, d])
        if present.any():
            ranks[present, d] = dense_rank_desc(acc[present, d])
    counts = (~np.isnan(ranks)).sum(axis=1)
    scores = np.nansum(ranks, axis=1) / counts
    return ScoreResult(list(table.methods), list(table.datasets), ranks, scores, counts)


# ----------------------------------------------------------- image writers

def write_pgm(path, image, comment=None):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise AnalysisError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    head = "P5\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii") + image.tobytes())


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise AnalysisError(f"PPM needs an [H,W,3] uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pnm(path):
    """Read a binary P5/P6 file written by this module; returns ``(magic, array)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise AnalysisError(f"{path}: unsupported header {tokens}")
    depth = 1 if magic == "P5" else 3
    raster = buf[pos:]
    if len(raster) != w * h * depth:
        raise AnalysisError(f"{path}: header declares {w*h*depth} bytes, payload has {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape((h, w) if depth == 1 else (h, w, 3))
    return magic, arr.copy()


# -------------------------------------------------------------- correlation

def per_image_correlation(model, images):
    """``[N, C, C]`` channel correlations of the last feature map, one per image."""
    x = Tensor(to_input(images))
    features = model.backbone(x)
    return channel_correlation(normalize_channels(features)).data


def mean_correlation(model, images, batch_size=64):
    total, n = None, 0
    for start in range(0, len(images), batch_size):
        corr = per_image_correlation(model, images[start:start + batch_size])
        total = corr.sum(axis=0) if total is None else total + corr.sum(axis=0)
        n += len(corr)
    if n == 0:
        raise AnalysisError("no images to correlate")
    return total / n


def block_gap(corr, partition):
    """Mean within-group correlation (self-pairs excluded) minus mean between-group correlation."""
    labels = partition.labels()
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = corr[same & off]
    between = corr[~same]
    if within.size == 0 or between.size == 0:
        raise AnalysisError("block gap needs >= 2 groups and a group with >= 2 channels")
    return float(within.mean() - between.mean())


def correlation_to_pixels(corr):
    return np.clip(np.rint((np.asarray(corr) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_correlation(model, dataset, sample_count=64, out_csv=None, out_pgm=None, seed=0):
    """Average channel correlation over a seeded random selection of ``sample_count`` images.

    Returns ``(matrix, indices)``; the seed is recorded as a PGM comment.
    """
    if sample_count < 1 or sample_count > len(dataset):
        raise AnalysisError(f"sample_count {sample_count} must lie in [1, {len(dataset)}]")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), sample_count, replace=False))
    corr = mean_correlation(model, dataset.images[idx])
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(
                [[repr(float(v)) for v in row] for row in corr])
    if out_pgm:
        write_pgm(out_pgm, correlation_to_pixels(corr),
                  comment=f"seed={seed} samples={sample_count}")
    return corr, idx


# ---------------------------------------------------------- activation maps

def group_activation_maps(model, images):
    """``[N, G, h, w]`` mean over each group's channels of the last feature map."""
    features = model.backbone(Tensor(to_input(images))).data
    return np.stack([features[:, s].mean(axis=1) for s in model.partition.slices()], axis=1)


def normalize_map(m):
    """Min-max scale to [0, 255] uint8; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def upsample_nearest(m, height, width):
    h, w = m.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return m[rows[:, None], cols[None, :]]


def overlay(gray_map, image):
    """50/50 blend of a grayscale map with a ``[3, H, W]`` image -> ``[H, W, 3]``."""
    rgb = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    blend = 0.5 * gray_map[..., None].astype(np.float64) + 0.5 * rgb
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)


def export_activation_maps(model, images, out_dir):
    """Write ``img{n}_group{g}.pgm`` and ``img{n}_group{g}_overlay.ppm``; return the paths."""
    images = np.asarray(images, dtype=np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    maps = group_activation_maps(model, images)
    height, width = images.shape[2:]
    paths = []
    for n in range(len(images)):
        for g in range(maps.shape[1]):
            up = upsample_nearest(normalize_map(maps[n, g]), height, width)
            pgm = os.path.join(out_dir, f"img{n}_group{g}.pgm")
            ppm = os.path.join(out_dir, f"img{n}_group{g}_overlay.ppm")
            write_pgm(pgm, up)
            write_ppm(ppm, overlay(up, images[n]))
            paths += [pgm, ppm]
    return paths


# -------------------------------------------------------------- curves

def history_rows(history):
    """Flatten training history into CSV-ready dicts (one per epoch)."""
    rows = []
    for rec in history:
        row = {"epoch": rec.epoch, "lr": rec.lr, "val_accuracy": rec.val_accuracy}
        row.update(rec.losses)
        for g, acc in enumerate(rec.group_val_accuracy):
            row[f"group{g}_val_accuracy"] = acc
        rows.append(row)
    return rows


def write_rows_csv(rows, path):
    if not rows:
        with open(path, "w") as fh:
            fh.write("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -------------------------------------------------------------- ablation

# (name, lambda, gamma, phi)
ABLATION_ROWS = (
    ("baseline", 0.0, 0.0, 0.0),
    ("grouping_only", 0.0, 0.0, 1.0),
    ("weak_entropy_distill", 0.05, 0.05, 0.0),
    ("weak_entropy_distill_grouping", 0.05, 0.05, 1.0),
    ("full", 1.0, 0.05, 1.0),
)


def run_ablation(base_cfg, train_ds, val_ds, test_ds, out_csv=None, progress=None):
    """Train every :data:`ABLATION_ROWS` configuration from the same seed; return CSV rows."""
    from .train import evaluate, train

    rows = []
    for name, lam, gamma, phi in ABLATION_ROWS:
        cfg = dataclasses.replace(base_cfg, lam=lam, gamma=gamma, phi=phi)
        model = nn.SefModel.build(train_ds.class_count, cfg.channels, cfg.groups, seed=cfg.seed)
        result = train(model, train_ds, val_ds, cfg)
        row = {"config": name, "lambda": lam, "gamma": gamma, "phi": phi,
               "test_accuracy": evaluate(model, test_ds)}
        row.update(result.final.losses if result.final else {})
        rows.append(row)
        if progress is not None:
            progress(row)
    if out_csv:
        write_rows_csv(rows, out_csv)
    return rows


# -------------------------------------------------------------- gradcheck

def tiny_objective_gradcheck(seed=0, h=1e-5, tol=1e-4):
    """Finite-difference check of the full objective on a 3x8x8, C=8, G=2, K=3 model."""
    rng = np.random.default_rng(seed)
    model = nn.SefModel.build(3, channels=8, groups=2, stages=(4,), seed=seed)
    for head in model.group_heads:
        head.weight.data = rng.normal(0.0, 0.5, head.weight.shape)
    for conv in model.convs:
        conv.bias.data = rng.normal(0.0, 0.1, conv.bias.shape)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    labels = np.array([0, 2])
    weights = LossWeights(1.0, 0.05, 1.0, 2)

    def f():
        out = nn.sef_forward(model, x)
        total, _ = sef_objective(out.logits_global, out.logits_groups, out.features,
                                 labels, model.partition, weights)
        return total

    return T.finite_diff_check(f, model.parameters(), h=h, tol=tol)
