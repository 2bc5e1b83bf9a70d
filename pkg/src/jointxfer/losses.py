"""Classification and matching losses with exact gradients."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .numerics import log_softmax, softmax


@dataclass
class LossOutput:
    value: float
    d_feature: object  # ndarray, or (d_fi, d_fj) for pairwise losses
    d_head: list = field(default_factory=list)


@dataclass
class MatchHead:
    """Matching-head parameters: a fixed margin and an optional projection.

    Without a projection the contrastive loss runs on raw features and has no
    trainable parameters.
    """
    margin: float = 1.0
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if (self.weight is None) != (self.bias is None):
            raise ConfigError("projection needs both weight and bias")

    @property
    def has_projection(self):
        return self.weight is not None

    def tensors(self):
        return [self.weight, self.bias] if self.has_projection else []


def cross_entropy(f, labels, head):
    """Mean-over-batch ``-log p_c`` for ``p = softmax(f @ W.T + b)``.

    ``head`` is a ``(weight, bias)`` pair with weight of shape ``[C, D]``.
    """
    weight, bias = head
    f = np.asarray(f)
    labels = np.asarray(labels)
    if f.ndim != 2 or f.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"features {f.shape} incompatible with head weight {weight.shape}")
    if labels.shape != (f.shape[0],):
        raise DimensionError(f"expected {f.shape[0]} labels, got {labels.shape}")
    n_classes = weight.shape[0]
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} out of range [0,{n_classes}) at sample {i}")
    n = f.shape[0]
    logits = f @ weight.T + bias
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = -logp[rows, labels].mean()
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return LossOutput(float(value), dlogits @ weight, [dlogits.T @ f, dlogits.sum(axis=0)])


def pair_label(l_i, l_j):
    return 1 if l_i == l_j else 0


def _project(f, head):
    return f @ head.weight.T + head.bias if head.has_projection else f


def contrastive(f_i, f_j, y_ij, head):
    """Single-pair contrastive loss; the margin applies to the squared distance.

    ``d_feature`` is the pair ``(dL/df_i, dL/df_j)``.
    """
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape or f_i.ndim != 1:
        raise DimensionError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    if y_ij not in (0, 1):
        raise DataError(f"pair label must be 0 or 1, got {y_ij}")
    out = contrastive_pairs(f_i[None], f_j[None], np.array([y_ij]), np.array([1]), head,
                            pair_labels=np.array([[y_ij]]))
    d_a, d_b = out.d_feature
    return LossOutput(out.value, (d_a[0], d_b[0]), out.d_head)


def contrastive_pairs(f_a, f_b, labels_a, labels_b, head, pair_labels=None):
    """Mean contrastive loss over the full ``K_a x K_b`` cross product.

    Pair labels default to ``labels_a[i] == labels_b[j]``.
    Returns gradients w.r.t. ``f_a`` and ``f_b`` and, with a projection, the
    projection weight and bias.
    """
    if f_a.ndim != 2 or f_b.ndim != 2 or f_a.shape[1] != f_b.shape[1]:
        raise DimensionError(f"feature shapes differ: {f_a.shape} vs {f_b.shape}")
    if pair_labels is None:
        pair_labels = (np.asarray(labels_a)[:, None] == np.asarray(labels_b)[None, :])
    y = np.asarray(pair_labels).astype(bool)
    ka, kb = f_a.shape[0], f_b.shape[0]
    g_a = _project(f_a, head)
    g_b = _project(f_b, head)
    diff = g_a[:, None, :] - g_b[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    m = head.margin
    per_pair = np.where(y, 0.5 * d2, 0.5 * np.maximum(0.0, m - d2))
    npairs = ka * kb
    # dL/d(diff) per pair, zero in the clamped region
    coef = np.where(y, 1.0, np.where(d2 < m, -1.0, 0.0)) / npairs
    ddiff = coef[:, :, None] * diff
    dg_a = ddiff.sum(axis=1)
    dg_b = -ddiff.sum(axis=0)
    d_head = []
    if head.has_projection:
        d_head = [dg_a.T @ f_a + dg_b.T @ f_b, dg_a.sum(axis=0) + dg_b.sum(axis=0)]
        dg_a = dg_a @ head.weight
        dg_b = dg_b @ head.weight
    return LossOutput(float(per_pair.mean()), (dg_a, dg_b), d_head)


def joint_loss(l1, l2, lc, lambda1=1.0, lambda2=1.0, lambda3=0.01):
    return lambda1 * l1 + lambda2 * l2 + lambda3 * lc
