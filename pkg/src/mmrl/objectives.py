"""Training objective: two cross-entropy terms plus alignment to frozen features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import cosine_logits
from .errors import ConfigError, ContractError, NormalizationError
from .tensor import Tensor

REG_KINDS = ("cosine", "l1", "mse")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")


@dataclass
class FrozenReference:
    """Token-free targets: class text features w_0 and, per image, f_0."""

    w_0: Tensor
    f_0: Tensor | None = None


def ce_loss(features: Tensor, labels, classifiers: Tensor, temperature: float) -> Tensor:
    """Mean over the batch of -log softmax(cos/tau)[label]."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = classifiers.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range for {C} classes: {labels}")
    logits = cosine_logits(features, classifiers, temperature)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    picked = T.log_softmax(logits, axis=-1)[np.arange(labels.size), labels]
    return picked.sum() * (-1.0 / labels.size)


def _cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    # a.b / sqrt(|a|^2 |b|^2) is exactly 1 when a == b, since sqrt(fl(s*s)) == s
    aa, bb = (a * a).sum(axis=-1), (b * b).sum(axis=-1)
    if np.any(aa.data == 0) or np.any(bb.data == 0):
        raise NormalizationError("cosine of a zero-norm vector")
    return (a * b).sum(axis=-1) / T.sqrt(aa * bb)


def _one_minus_mean(cos: Tensor) -> Tensor:
    # divide rather than scale by 1/n so that n ones average to exactly 1
    return 1.0 - T.div(T.tsum(cos), float(cos.data.size))


def cos_reg_image(f_c: Tensor, f_0: Tensor) -> Tensor:
    """1 - cos(f_c, f_0), averaged over the batch."""
    return _one_minus_mean(_cosine_rows(f_c, f_0))


def cos_reg_text(W: Tensor, W_0: Tensor) -> Tensor:
    """1 - mean over classes of cos(w^c, w_0^c)."""
    if W.shape != W_0.shape:
        raise ContractError(f"classifier shapes differ: {W.shape} vs {W_0.shape}")
    return _one_minus_mean(_cosine_rows(W, W_0))


def regularizer(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Alignment penalty between adapted and frozen features."""
    if kind == "cosine":
        return _one_minus_mean(_cosine_rows(a, b))
    diff = a - b
    if kind == "l1":
        return T.mean(T.absolute(diff))
    if kind == "mse":
        return T.mean(diff * diff)
    raise ConfigError(f"unknown regularizer {kind!r}; choose from {REG_KINDS}")


def mmrl_loss(ce_c, ce_r, cos_v, cos_t, weights: LossWeights):
    """alpha * ce_c + (1 - alpha) * ce_r + lambda * (cos_v + cos_t)."""
    a = weights.alpha
    return ce_c * a + ce_r * (1.0 - a) + (cos_v + cos_t) * weights.lam
