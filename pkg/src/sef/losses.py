"""Channel-correlation grouping loss and the distribution-matching terms.

All logs are natural logs with the argument clamped at 1e-12. Losses are
computed per sample and averaged over the batch.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROW_SUM_TOL = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0  # max-entropy weight
    gamma: float = 0.05  # distillation weight
    phi: float = 1.0  # grouping weight
    groups: int = 2

    def __post_init__(self):
        if min(self.lam, self.gamma, self.phi) < 0:
            raise LossError("loss weights must be >= 0")
        if self.groups < 1:
            raise LossError("groups must be >= 1")


@dataclass
class LossReport:
    cross_entropy: float
    entropy_global: float
    distill_mean: float
    grouping: float
    total: float

    def as_dict(self):
        return dict(cross_entropy=self.cross_entropy, entropy_global=self.entropy_global,
                    distill_mean=self.distill_mean, grouping=self.grouping, total=self.total)

    def recombine(self, weights):
        return (self.cross_entropy - weights.lam * self.entropy_global
                + weights.gamma * self.distill_mean + weights.phi * self.grouping)


def normalize_channels(features):
    """Flatten each channel of ``[N,C,H,W]`` and scale it to unit L2 norm."""
    n, c, h, w = features.shape
    flat = T.reshape(features, (n, c, h * w))
    norms = T.clamp_min(T.l2norm(flat, axis=-1, keepdims=True), T.NORM_FLOOR)
    return T.div(flat, norms)


def channel_correlation(normed):
    """Per-sample inner products of normalized channels: ``[N,C,HW] -> [N,C,C]``."""
    return T.matmul(normed, T.transpose(normed, (0, 2, 1)))


def group_correlation_matrix(corr, partition):
    """Block means of the channel correlations, self-pairs included."""
    if corr.shape[-1] != partition.total_channels:
        raise LossError(
            f"correlation is over {corr.shape[-1]} channels, partition covers "
            f"{partition.total_channels}")
    m = Tensor(partition.averaging_matrix())
    return T.matmul(T.matmul(m, corr), T.transpose(m, (1, 0)))


def grouping_loss(D):
    """Half of (squared Frobenius norm of D minus twice its squared diagonal), batch mean."""
    g = D.shape[-1]
    eye = Tensor(np.eye(g))
    sq = T.mul(D, D)
    per_sample = T.sub(T.tsum(sq, axis=(-2, -1)), T.scale(T.tsum(T.mul(sq, eye), axis=(-2, -1)), 2.0))
    return T.scale(T.mean(per_sample), 0.5)


def _check_rows(P, name):
    if P.ndim != 2:
        raise LossError(f"{name} must be [N,K], got {list(P.shape)}")
    sums = P.data.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size or (P.data < 0).any():
        row = int(bad[0]) if bad.size else int(np.argwhere(P.data < 0)[0, 0])
        raise LossError(f"{name} row {row} is not a distribution (sum={sums[row]:.8g})")


def entropy(P):
    _check_rows(P, "P")
    return T.scale(T.mean(T.tsum(T.mul(P, T.log(P)), axis=1)), -1.0)


def cross_entropy_dist(P, Q):
    _check_rows(P, "P")
    _check_rows(Q, "Q")
    if P.shape != Q.shape:
        raise LossError(f"P {list(P.shape)} and Q {list(Q.shape)} differ in shape")
    return T.scale(T.mean(T.tsum(T.mul(P, T.log(Q)), axis=1)), -1.0)


def kl_divergence(P, Q):
    """KL(P || Q) written as cross entropy minus entropy."""
    return T.sub(cross_entropy_dist(P, Q), entropy(P))


def classification_loss(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LossError(f"{labels.size} labels for {n} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LossError(f"label {labels[i]} at index {i} outside [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return T.scale(T.mean(T.tsum(T.mul(T.log_softmax(logits), Tensor(onehot)), axis=1)), -1.0)


def sef_objective(logits_global, logits_groups, features, labels, partition, weights,
                  stop_teacher_grad=False):
    """Return ``(total_tensor, LossReport)``.

    total = CE - lam*H(P_w) + (gamma/G) * sum_g H(P_w, P_g) + phi*L_group,
    with P_w the global softmax and P_g each group head's softmax.
    """
    G = len(logits_groups)
    if G != weights.groups or G != partition.group_count:
        raise LossError(
            f"{G} group logits, weights.groups={weights.groups}, "
            f"partition has {partition.group_count} groups")
    ce = classification_loss(logits_global, labels)
    p_w = T.softmax(logits_global)
    h_w = entropy(p_w)
    teacher = p_w.detach() if stop_teacher_grad else p_w
    distill = [cross_entropy_dist(teacher, T.softmax(lg)) for lg in logits_groups]
    distill_sum = distill[0]
    for term in distill[1:]:
        distill_sum = T.add(distill_sum, term)
    distill_mean = T.scale(distill_sum, 1.0 / G)
    D = group_correlation_matrix(channel_correlation(normalize_channels(features)), partition)
    l_group = grouping_loss(D)

    total = T.add(
        T.add(T.sub(ce, T.scale(h_w, weights.lam)), T.scale(distill_mean, weights.gamma)),
        T.scale(l_group, weights.phi))
    report = LossReport(ce.item(), h_w.item(), distill_mean.item(), l_group.item(), total.item())
    return total, report
