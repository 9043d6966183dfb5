"""Layers, channel partitions and the grouped-head classifier.

The classifier is a small conv backbone whose last feature map is average
pooled into a global feature. One linear head reads the whole feature and is
the only head used at inference; G bias-free heads each read one contiguous
block of channels and only take part in training.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Conv2dLayer:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        cout, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ConfigError(f"bias shape {list(self.bias.shape)} does not match {cout} output channels")

    @classmethod
    def init(cls, rng, in_channels, out_channels, kernel_size=3, stride=1, padding=None):
        if padding is None:
            padding = kernel_size // 2
        k = kernel_size
        w = glorot_uniform(rng, (out_channels, in_channels, k, k),
                           in_channels * k * k, out_channels * k * k)
        return cls(Tensor(w, requires_grad=True),
                   Tensor(np.zeros(out_channels), requires_grad=True), stride, padding)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def output_size(self, size):
        k = self.weight.shape[2]
        return (size + 2 * self.padding - k) // self.stride + 1


def conv2d_forward(layer, x):
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise T.ShapeError(
            f"conv layer expects [N,{layer.in_channels},H,W] input, got {list(x.shape)}")
    return T.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


def global_avg_pool(x):
    if x.ndim != 4:
        raise T.ShapeError(f"global_avg_pool expects [N,C,H,W], got {list(x.shape)}")
    return T.mean(x, axis=(2, 3))


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng, in_features, out_features, bias=True):
        w = glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        b = Tensor(np.zeros(out_features), requires_grad=True) if bias else None
        return cls(Tensor(w, requires_grad=True), b)

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


@dataclass(frozen=True)
class GroupPartition:
    """Contiguous, ordered channel blocks covering ``total_channels``."""

    total_channels: int
    sizes: tuple

    def __post_init__(self):
        if not self.sizes:
            raise ConfigError("partition needs at least one group")
        if any(s < 1 for s in self.sizes):
            raise ConfigError(f"every group needs >= 1 channel, got sizes {list(self.sizes)}")
        if sum(self.sizes) != self.total_channels:
            raise ConfigError(
                f"group sizes {list(self.sizes)} sum to {sum(self.sizes)}, not {self.total_channels}")

    @classmethod
    def equal(cls, channels, groups):
        """Equal blocks; the ``channels % groups`` leftover goes to the last group."""
        if groups < 1 or groups > channels:
            raise ConfigError(f"cannot split {channels} channels into {groups} groups")
        base = channels // groups
        sizes = [base] * groups
        sizes[-1] += channels - base * groups
        return cls(channels, tuple(sizes))

    @classmethod
    def from_sizes(cls, sizes):
        sizes = tuple(int(s) for s in sizes)
        return cls(sum(sizes), sizes)

    @property
    def group_count(self):
        return len(self.sizes)

    @property
    def boundaries(self):
        return tuple(int(b) for b in np.cumsum((0,) + self.sizes))

    def slices(self):
        b = self.boundaries
        return [slice(b[g], b[g + 1]) for g in range(self.group_count)]

    def labels(self):
        """Group index of every channel."""
        return np.repeat(np.arange(self.group_count), self.sizes)

    def averaging_matrix(self):
        """``M[g, i] = 1/C_g`` when channel ``i`` is in group ``g``, else 0."""
        m = np.zeros((self.group_count, self.total_channels))
        for g, s in enumerate(self.slices()):
            m[g, s] = 1.0 / self.sizes[g]
        return m


SefOutput = namedtuple("SefOutput", "features pooled logits_global logits_groups")

DEFAULT_STAGES = (16, 24)


class SefModel:
    """Conv backbone + global head + per-group heads.

    Backbone: for each width in ``stages``: conv3x3 -> relu -> maxpool2,
    then a final conv3x3 with ``channels`` outputs -> relu.
    """

    def __init__(self, convs, partition, global_head, group_heads, num_classes):
        self.convs = list(convs)
        self.partition = partition
        self.global_head = global_head
        self.group_heads = list(group_heads)
        self.num_classes = num_classes
        if self.convs[-1].out_channels != partition.total_channels:
            raise ConfigError(
                f"partition covers {partition.total_channels} channels but the backbone "
                f"emits {self.convs[-1].out_channels}")
        if global_head.weight.shape != (partition.total_channels, num_classes):
            raise ConfigError("global head must map C -> K")
        for g, (head, size) in enumerate(zip(self.group_heads, partition.sizes)):
            if head.weight.shape != (size, num_classes) or head.bias is not None:
                raise ConfigError(f"group head {g} must be a bias-free {size} -> {num_classes} map")
        if len(self.group_heads) != partition.group_count:
            raise ConfigError(
                f"{len(self.group_heads)} group heads for {partition.group_count} groups")

    @classmethod
    def build(cls, num_classes, channels=24, groups=2, in_channels=3, stages=DEFAULT_STAGES,
              seed=0, partition=None):
        rng = np.random.default_rng(seed)
        convs, cin = [], in_channels
        for width in list(stages) + [channels]:
            convs.append(Conv2dLayer.init(rng, cin, width, 3))
            cin = width
        partition = partition or GroupPartition.equal(channels, groups)
        global_head = Linear.init(rng, channels, num_classes, bias=True)
        heads = [Linear.init(rng, size, num_classes, bias=False) for size in partition.sizes]
        return cls(convs, partition, global_head, heads, num_classes)

    @property
    def channels(self):
        return self.partition.total_channels

    def parameters(self):
        """Ordered name -> Tensor mapping of every trainable tensor."""
        params = {}
        for i, conv in enumerate(self.convs):
            params[f"conv{i}.weight"] = conv.weight
            params[f"conv{i}.bias"] = conv.bias
        params["global_head.weight"] = self.global_head.weight
        params["global_head.bias"] = self.global_head.bias
        for g, head in enumerate(self.group_heads):
            params[f"group_head{g}.weight"] = head.weight
        return params

    def group_head_parameters(self):
        return {k: v for k, v in self.parameters().items() if k.startswith("group_head")}

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def load_parameters(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {list(arr.shape)} != {list(p.shape)}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def backbone(self, images):
        x = T.as_tensor(images)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = T.relu(conv2d_forward(conv, x))
            if i != last:
                x = T.maxpool2d(x, 2)
        return x


def sef_forward(model, images):
    features = model.backbone(images)
    if features.shape[1] != model.partition.total_channels:
        raise ConfigError(
            f"backbone produced {features.shape[1]} channels, partition expects "
            f"{model.partition.total_channels}")
    pooled = global_avg_pool(features)
    logits_global = model.global_head(pooled)
    logits_groups = [head(pooled[:, s])
                     for head, s in zip(model.group_heads, model.partition.slices())]
    return SefOutput(features, pooled, logits_global, logits_groups)


def global_logits(model, images, batch_size=256):
    """Global-head scores only; group heads are never evaluated."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        pooled = global_avg_pool(model.backbone(Tensor(images[start:start + batch_size])))
        out.append(model.global_head(pooled).data)
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out)


def predict(model, images, batch_size=256):
    """Class index per image from the global head (ties -> lowest index)."""
    return np.argmax(global_logits(model, images, batch_size), axis=1)


def count_extra_params(channels, classes, partition):
    """Parameters the group heads add on top of backbone + global head."""
    if partition.total_channels != channels:
        raise ConfigError(f"partition covers {partition.total_channels} channels, not {channels}")
    return sum(size * classes for size in partition.sizes)
