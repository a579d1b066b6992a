"""ArcFace classification loss and the layer-wise distillation loss."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .encoder import LayerStack, StructureError
from .nn import Module
from .tensor import Tensor


class ArcFace(Module):
    """Class-centre matrix plus additive angular margin settings."""

    def __init__(self, num_classes: int, embed_dim: int, rng, margin: float = 0.2, scale: float = 32.0):
        self.weight = T.parameter(rng.normal(0.0, 0.01, size=(num_classes, embed_dim)))
        self.margin = margin
        self.scale = scale

    @property
    def margin(self) -> float:
        return self._margin

    @margin.setter
    def margin(self, m: float):
        if not 0.0 <= m <= 0.6:
            raise ValueError(f"ArcFace margin {m} outside [0, 0.6]")
        self._margin = float(m)

    @property
    def scale(self) -> float:
        return self._scale

    @scale.setter
    def scale(self, s: float):
        if s <= 0:
            raise ValueError("ArcFace scale must be positive")
        self._scale = float(s)

    def forward(self, emb, labels):
        return arcface_loss(emb, labels, self)


def arcface_logits(emb: Tensor, labels, p: ArcFace) -> Tensor:
    """Scaled cosines with cos(theta_y + m) on the target class."""
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = p.weight.shape[0]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_cls:
        raise ValueError(f"labels must lie in [0, {n_cls})")
    e = T.l2_normalize(T.as_tensor(emb))
    w = T.l2_normalize(p.weight)
    cos = T.matmul(e, w.T)  # (B, N)
    B = cos.shape[0]
    onehot = np.zeros((B, n_cls))
    onehot[np.arange(B), labels] = 1.0
    m = p.margin
    c_y = T.sum(cos * onehot, axis=1)
    sin_y = T.sqrt(T.clamp(1.0 - T.square(c_y), lo=1e-12))
    phi = T.scale(c_y, c=math.cos(m)) - T.scale(sin_y, c=math.sin(m))
    # past theta_y + m > pi fall back to a linear penalty (keeps phi monotone in theta)
    cond = c_y.data > math.cos(math.pi - m)
    phi = T.where(phi, c_y - m * math.sin(math.pi - m), cond=cond)
    delta = T.expand((phi - c_y).reshape(B, 1), shape=(B, n_cls)) * onehot
    return T.scale(cos + delta, c=p.scale)


def arcface_loss(emb, labels, p: ArcFace) -> Tensor:
    logits = arcface_logits(emb, labels, p)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(logits.shape[0]), labels] = 1.0
    return -T.mean(T.sum(T.log_softmax(logits, axis=-1) * onehot, axis=1))


def distill_loss(teacher: LayerStack, student: LayerStack, l1: str = "mean", eps: float = 1e-8) -> Tensor:
    """Sum over layers and frames of (L1 - cosine), averaged over the batch.

    ``l1="mean"`` divides the per-frame absolute difference by D; ``"sum"``
    keeps the raw L1 norm.
    """
    if len(teacher) != len(student):
        raise StructureError(f"teacher has {len(teacher)} layers, student {len(student)}")
    total = None
    for h, hs in zip(teacher.features, student.features):
        if h.shape != hs.shape:
            raise StructureError(f"layer shape mismatch {h.shape} vs {hs.shape}")
        h = T.as_tensor(h)
        if h.ndim == 2:
            h, hs = h.reshape(1, *h.shape), hs.reshape(1, *hs.shape)
        term = T.l1_distance(h, hs, reduce=l1) - T.cosine_similarity(h, hs, eps=eps)
        s = T.sum(term)
        total = s if total is None else total + s
    batch = teacher.features[0].shape[0] if teacher.features[0].ndim == 3 else 1
    return T.scale(total, c=1.0 / batch)


def distill_floor(stack: LayerStack) -> float:
    """Loss value for identical stacks: -(L+1) * T."""
    return -float(len(stack) * stack.num_frames)
