"""SGD-with-momentum training loop, evaluation, config files and checkpoints.

Checkpoint layout (little-endian)::

    b"SEFW" | u32 version=1 | u32 tensor_count
    then per tensor: u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f64 payload
"""

import dataclasses
import logging
import os
import struct
from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import nn
from .data import split_validation, to_input
from .losses import LossReport, LossWeights, sef_objective
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SEFW"
CKPT_VERSION = 1
U32 = struct.Struct("<I")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_every: int = 12
    lr_decay_factor: float = 0.1
    lam: float = 1.0
    gamma: float = 0.05
    phi: float = 1.0
    groups: int = 2
    channels: int = 24
    classes: int = 16
    train_path: str = ""
    val_fraction: float = 0.1
    test_path: str = ""
    checkpoint_dir: str = ""
    flip: bool = True
    stop_teacher_grad: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigFileError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigFileError("momentum must lie in [0, 1)")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigFileError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigFileError("batch_size and lr_decay_every must be >= 1")

    @classmethod
    def full_scale(cls, **overrides):
        """Schedule used for the 448x448 fine-grained benchmarks."""
        base = dict(epochs=50, batch_size=32, lr=0.01, lr_decay_every=20)
        base.update(overrides)
        return cls(**base)

    @property
    def weights(self):
        return LossWeights(self.lam, self.gamma, self.phi, self.groups)


# config file keys that differ from the attribute names
_KEY_ALIASES = {"lambda": "lam"}


def _parse_value(raw, kind, key):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from None


def parse_config(text, **overrides):
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    types = {k: {"int": int, "float": float, "bool": bool, "str": str}.get(v, v)
             for k, v in types.items()}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in types or key == "lam":
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        values[name] = _parse_value(raw, types[name], key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides):
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def lr_at(epoch, cfg):
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_step(params, grads, velocities, lr, momentum):
    """Classical momentum, in place: ``v = m*v + g; p = p - lr*v``."""
    for name, p in params.items():
        g, v = grads[name], velocities[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(
                f"{name}: param {list(p.shape)}, grad {list(g.shape)}, velocity {list(v.shape)}")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocities


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: dict
    val_accuracy: float
    group_val_accuracy: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: nn.SefModel
    history: list
    velocities: dict

    @property
    def final(self):
        return self.history[-1] if self.history else None


def evaluate(model, ds, batch_size=256):
    """Global-head accuracy, no augmentation."""
    if len(ds) == 0:
        return 0.0
    pred = nn.predict(model, to_input(ds.images), batch_size)
    return float(np.mean(pred == ds.labels))


def group_head_accuracy(model, ds, batch_size=256):
    """Accuracy of each group head's own argmax, in group order."""
    G = model.partition.group_count
    if len(ds) == 0:
        return [0.0] * G
    hits = np.zeros(G)
    for start in range(0, len(ds), batch_size):
        x = Tensor(to_input(ds.images[start:start + batch_size]))
        out = nn.sef_forward(model, x)
        y = ds.labels[start:start + batch_size]
        for g, lg in enumerate(out.logits_groups):
            hits[g] += np.sum(np.argmax(lg.data, axis=1) == y)
    return list(hits / len(ds))


def _batch_report(reports):
    keys = reports[0].as_dict().keys()
    return {k: float(np.mean([r.as_dict()[k] for r in reports])) for k in keys}


def train(model, train_ds, val_ds, cfg, velocities=None, start_epoch=0, progress=None):
    """Run ``cfg.epochs`` epochs of minibatch SGD on the full objective.

    Shuffling and flips come from one generator seeded with ``cfg.seed``:
    each epoch draws ``permutation(n)`` and then, if flipping is enabled,
    ``random(n) < 0.5``.
    """
    if train_ds.class_count != model.num_classes:
        raise TrainingError(
            f"dataset has {train_ds.class_count} classes, model predicts {model.num_classes}")
    params = model.parameters()
    if velocities is None:
        velocities = {k: np.zeros_like(p.data) for k, p in params.items()}
    weights = LossWeights(cfg.lam, cfg.gamma, cfg.phi, model.partition.group_count)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_ds)
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip else np.zeros(n, dtype=bool)
        reports = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = to_input(train_ds.images[idx])
            fl = flips[idx]
            if fl.any():
                x[fl] = x[fl][..., ::-1]
            out = nn.sef_forward(model, Tensor(x))
            total, report = sef_objective(out.logits_global, out.logits_groups, out.features,
                                          train_ds.labels[idx], model.partition, weights,
                                          cfg.stop_teacher_grad)
            if not np.isfinite(report.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in params.values():
                p.grad = None
            backward(total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            sgd_step({k: p.data for k, p in params.items()}, grads, velocities, lr, cfg.momentum)
            reports.append(report)
        rec = EpochRecord(epoch, lr, _batch_report(reports) if reports else {},
                          evaluate(model, val_ds), group_head_accuracy(model, val_ds))
        history.append(rec)
        log.info("epoch %d lr=%g total=%.4f val=%.4f groups=%s", epoch, lr,
                 rec.losses.get("total", float("nan")), rec.val_accuracy,
                 ["%.3f" % a for a in rec.group_val_accuracy])
        if progress is not None:
            progress(rec)
        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            for name in (f"epoch_{epoch:03d}.sefw", "last.sefw"):
                save_checkpoint(os.path.join(cfg.checkpoint_dir, name), model, velocities, epoch + 1)
    return TrainResult(model, history, velocities)


def prepare_datasets(cfg):
    """Load the train file named in ``cfg`` and carve the validation split."""
    from .data import read_dataset
    full = read_dataset(cfg.train_path, "train")
    return split_validation(full, cfg.val_fraction, cfg.seed)


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(arrays):
    parts = [CKPT_MAGIC, U32.pack(CKPT_VERSION), U32.pack(len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [U32.pack(len(raw)), raw, U32.pack(arr.ndim)]
        parts += [U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def parse_checkpoint(buf):
    def need(offset, count, what):
        if offset + count > len(buf):
            raise CheckpointError(
                f"truncated checkpoint reading {what} at offset {offset}: expected at least "
                f"{offset + count} bytes, file has {len(buf)}")

    need(0, 4, "magic")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic at offset 0")
    need(4, 8, "header")
    version, count = U32.unpack_from(buf, 4)[0], U32.unpack_from(buf, 8)[0]
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    off, arrays = 12, {}
    for _ in range(count):
        need(off, 4, "name length")
        nlen = U32.unpack_from(buf, off)[0]
        off += 4
        need(off, nlen, "name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(off, 4, f"rank of {name}")
        rank = U32.unpack_from(buf, off)[0]
        off += 4
        need(off, 4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 8 * prod(dims)
        need(off, nbytes, f"payload of {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=prod(dims), offset=off).reshape(dims).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after offset {off} (file has {len(buf)})")
    return arrays


def model_state(model, velocities=None, epoch=None):
    arrays = {k: p.data for k, p in model.parameters().items()}
    if velocities is not None:
        arrays.update({f"velocity/{k}": v for k, v in velocities.items()})
    if epoch is not None:
        arrays["meta/epoch"] = np.array([float(epoch)])
    return arrays


def save_checkpoint(path, model=None, velocities=None, epoch=None, arrays=None):
    if arrays is None:
        arrays = model_state(model, velocities, epoch) if model is not None else {}
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(arrays))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def model_from_arrays(arrays):
    """Rebuild a :class:`nn.SefModel` from checkpoint arrays (shapes give the architecture)."""
    convs = []
    i = 0
    while f"conv{i}.weight" in arrays:
        w, b = arrays[f"conv{i}.weight"], arrays[f"conv{i}.bias"]
        k = w.shape[2]
        convs.append(nn.Conv2dLayer(Tensor(w.copy(), True), Tensor(b.copy(), True), 1, k // 2))
        i += 1
    if not convs:
        raise CheckpointError("checkpoint has no conv layers")
    gw, gb = arrays["global_head.weight"], arrays["global_head.bias"]
    heads, g = [], 0
    while f"group_head{g}.weight" in arrays:
        heads.append(nn.Linear(Tensor(arrays[f"group_head{g}.weight"].copy(), True)))
        g += 1
    partition = nn.GroupPartition.from_sizes([h.weight.shape[0] for h in heads])
    model = nn.SefModel(convs, partition, nn.Linear(Tensor(gw.copy(), True), Tensor(gb.copy(), True)),
                        heads, gw.shape[1])
    velocities = {k[len("velocity/"):]: v.copy() for k, v in arrays.items()
                  if k.startswith("velocity/")}
    epoch = int(arrays["meta/epoch"][0]) if "meta/epoch" in arrays else 0
    return model, velocities or None, epoch
