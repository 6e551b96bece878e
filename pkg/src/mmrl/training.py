"""Few-shot adaptation loop over the trainable adapter state."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .core import (
    AdapterState,
    VariantConfig,
    cached_text_prefix,
    class_probabilities,
    encode_images,
    encode_texts,
    mixture_probabilities,
    vision_from_prefix,
    vision_prefix,
)
from .encoder import DEFAULT_TEMPLATE, DualEncoder, encode_classifiers
from .errors import ConfigError, ContractError, DataError, DivergenceError, ProtocolError
from .objectives import LossWeights, ce_loss, mmrl_loss, regularizer
from .optim import OptimizerState, adamw_step
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "L_total", "L_ce_c", "L_ce_r", "L_cos_v", "L_cos_t")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    weights: LossWeights = LossWeights()
    variant: VariantConfig = VariantConfig()
    J: int = 4
    K: int = 5
    d_r: int = 32
    reg_kind: str = "cosine"
    template: str = DEFAULT_TEMPLATE
    # stop once every training item is classified correctly, but not before this epoch
    early_stop_after: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")


@dataclass
class StepRecord:
    step: int
    epoch: int
    total: float
    ce_c: float
    ce_r: float
    cos_v: float
    cos_t: float

    def row(self) -> tuple:
        return (self.step, self.epoch, self.total, self.ce_c, self.ce_r, self.cos_v, self.cos_t)


@dataclass
class TrainResult:
    state: AdapterState
    trace: list[StepRecord] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)
    epoch_reg: list[float] = field(default_factory=list)


def trainable_parameters(state: AdapterState) -> list[Tensor]:
    return state.parameters()


def decay_mask(state: AdapterState) -> list[bool]:
    """Weight decay applies to maps and P_v^r, never to token embeddings."""
    return [not (name == "R" or "bank" in name) for name, _ in state.named_parameters()]


@dataclass
class LossTerms:
    total: Tensor
    ce_c: Tensor
    ce_r: Tensor
    cos_v: Tensor
    cos_t: Tensor
    f_c: Tensor
    f_r: Tensor | None
    W: Tensor


class MMRLObjective:
    """Per-run constants (class prompts, their frozen prefix, W_0) and the batch loss."""

    def __init__(
        self,
        backbone: DualEncoder,
        state: AdapterState,
        class_token_ids: Sequence[int],
        weights: LossWeights = LossWeights(),
        template: str = DEFAULT_TEMPLATE,
        reg_kind: str = "cosine",
    ):
        self.backbone = backbone
        self.state = state
        self.class_token_ids = list(class_token_ids)
        self.weights = weights
        self.template = template
        self.reg_kind = reg_kind
        self.text_prefix = cached_text_prefix(self.class_token_ids, template, backbone, state.J,
                                              state.K if state.variant.text_tokens else 0)
        with no_grad():
            self.W_0 = encode_classifiers(self.class_token_ids, template, backbone)

    def image_inputs(self, images) -> tuple[Tensor, Tensor]:
        """Frozen prefix entering layer J, and the token-free feature f_0."""
        with no_grad():
            prefix = vision_prefix(images, self.backbone, self.state.J)
            f_0 = self.backbone.vision.proj(vision_from_prefix(prefix, self.backbone, self.state.J))
        return prefix, f_0

    def classifiers(self) -> Tensor:
        if not self.state.variant.text_tokens:
            return self.W_0
        return encode_texts(None, self.template, self.backbone, self.state, prefix=self.text_prefix)

    def need_repr(self) -> bool:
        return self.state.K > 0 or not self.state.variant.vision_tokens

    def image_features(self, prefix: Tensor) -> tuple[Tensor, Tensor | None]:
        return encode_images(None, self.backbone, self.state, prefix=prefix, need_repr=self.need_repr())

    def combine(self, f_c: Tensor, f_r: Tensor | None, W: Tensor, labels, f_0: Tensor) -> LossTerms:
        tau = self.backbone.temperature
        ce_c = ce_loss(f_c, labels, W, tau)
        ce_r = ce_loss(f_r, labels, W, tau) if f_r is not None else Tensor(0.0)
        cos_v = regularizer(self.reg_kind, f_c, f_0)
        cos_t = regularizer(self.reg_kind, W, self.W_0)
        total = mmrl_loss(ce_c, ce_r, cos_v, cos_t, self.weights)
        return LossTerms(total, ce_c, ce_r, cos_v, cos_t, f_c, f_r, W)

    def terms(self, prefix: Tensor, labels, f_0: Tensor) -> LossTerms:
        f_c, f_r = self.image_features(prefix)
        return self.combine(f_c, f_r, self.classifiers(), labels, f_0)

    def loss(self, images, labels) -> Tensor:
        prefix, f_0 = self.image_inputs(images)
        return self.terms(prefix, labels, f_0).total


def base_readout(f_c: Tensor, f_r: Tensor | None, W: Tensor, tau: float, alpha: float, mixture: bool) -> np.ndarray:
    p_c = class_probabilities(f_c, W, tau)
    if not mixture or f_r is None:
        return p_c
    return mixture_probabilities(p_c, class_probabilities(f_r, W, tau), alpha)


def train_accuracy(obj: MMRLObjective, images: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    state = obj.state
    with no_grad():
        W = obj.classifiers()
        correct = 0
        for start in range(0, len(images), chunk):
            prefix = vision_prefix(images[start : start + chunk], obj.backbone, state.J)
            f_c, f_r = obj.image_features(prefix)
            p = base_readout(f_c, f_r, W, obj.backbone.temperature, obj.weights.alpha, state.variant.base_uses_mixture)
            correct += int((p.argmax(-1) == labels[start : start + chunk]).sum())
    return correct / len(images)


def train(
    images: np.ndarray,
    labels: np.ndarray,
    class_token_ids: Sequence[int],
    backbone: DualEncoder,
    state: AdapterState,
    cfg: TrainConfig,
    class_indices: Sequence[int] | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Adapt ``state`` in place on a labelled few-shot set.

    ``labels`` index into ``class_token_ids``. ``class_indices`` (corpus class
    ids of those tokens) is recorded on the state for leakage checks.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise DataError("few-shot training split is empty")
    if images.shape[0] != labels.shape[0]:
        raise ContractError("images and labels differ in length")
    if not backbone.frozen:
        raise ContractError("backbone must be frozen before adaptation")
    if state.K == 0 and state.variant.vision_tokens:
        raise ConfigError("training needs K >= 1 representation tokens")

    before = backbone.fingerprint()
    obj = MMRLObjective(backbone, state, class_token_ids, cfg.weights, cfg.template, cfg.reg_kind)
    params = trainable_parameters(state)
    mask = decay_mask(state)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(state)
    n, step = images.shape[0], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        totals, regs = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            prefix, f_0 = obj.image_inputs(images[idx])
            for p in params:
                p.grad = None
            terms = obj.terms(prefix, labels[idx], f_0)
            value = float(terms.total.data)
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            T.backward(terms.total)
            adamw_step(params, [p.grad for p in params], opt, mask)
            rec = StepRecord(step, epoch, value, float(terms.ce_c.data), float(terms.ce_r.data),
                             float(terms.cos_v.data), float(terms.cos_t.data))
            result.trace.append(rec)
            totals.append(value)
            regs.append(rec.cos_v + rec.cos_t)
            step += 1
        result.epoch_loss.append(float(np.mean(totals)))
        result.epoch_reg.append(float(np.mean(regs)))
        result.epoch_acc.append(train_accuracy(obj, images, labels))
        logger.info("epoch %d loss %.4f train acc %.3f", epoch, result.epoch_loss[-1], result.epoch_acc[-1])
        if on_epoch is not None:
            on_epoch(epoch, result.epoch_loss[-1], result.epoch_acc[-1])
        if cfg.early_stop_after is not None and epoch + 1 >= cfg.early_stop_after and result.epoch_acc[-1] == 1.0:
            break
    for p in params:
        p.grad = None
    if backbone.fingerprint() != before:
        raise ProtocolError("frozen backbone changed during adaptation")
    if class_indices is not None:
        state.trained_classes = tuple(sorted(set(int(c) for c in class_indices)))
    return result


def loss_csv(trace: Sequence[StepRecord], config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for rec in trace:
        # + 0.0 turns a saturated -0.0 cross-entropy into 0.0
        w.writerow([rec.step, rec.epoch] + [repr(v + 0.0) for v in rec.row()[2:]])
    return buf.getvalue()


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    num_scalars: int
    eps: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def text(self, config_hash: str | None = None) -> str:
        lines = [f"# config_hash={config_hash}"] if config_hash else []
        lines.append(f"eps={self.eps!r} scalars={self.num_scalars}")
        lines += [f"{name} {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max_rel_err={self.max_error:.3e}")
        return "\n".join(lines) + "\n"


def gradient_check(
    images: np.ndarray,
    labels: np.ndarray,
    class_token_ids: Sequence[int],
    backbone: DualEncoder,
    state: AdapterState,
    weights: LossWeights = LossWeights(),
    template: str = DEFAULT_TEMPLATE,
    reg_kind: str = "cosine",
    eps: float = 1e-5,
) -> GradcheckReport:
    """Central differences of the full objective against backward, per trainable tensor.

    The loss only sees the parameters through (f_c, f_r, W). Vision-side
    tensors leave W untouched and text-side tensors leave the image features
    untouched, so each difference re-runs only the affected branch with the
    other held at its exact current value. Analytic gradients come from one
    backward pass through the full objective.
    """
    from .core import extract_image_features, vision_forward_mmrl

    obj = MMRLObjective(backbone, state, class_token_ids, weights, template, reg_kind)
    prefix, f_0 = obj.image_inputs(np.asarray(images, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    named = list(state.named_parameters())
    params = [p for _, p in named]

    for p in params:
        p.grad = None
    T.backward(obj.terms(prefix, labels, f_0).total)
    analytic = {n: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for n, p in named}
    for p in params:
        p.grad = None

    with no_grad():
        f_c, f_r = obj.image_features(prefix)
        W = obj.classifiers()
        c_L, R_L = vision_forward_mmrl(None, backbone, state, prefix=prefix)
    need = obj.need_repr()
    closures = {
        "projection": lambda: obj.combine(*extract_image_features(c_L, R_L, backbone, state, need), W, labels, f_0).total,
        "vision": lambda: obj.combine(*obj.image_features(prefix), W, labels, f_0).total,
        "text": lambda: obj.combine(f_c, f_r, obj.classifiers(), labels, f_0).total,
        "shared": lambda: obj.terms(prefix, labels, f_0).total,
    }
    errors = {}
    for name, p in named:
        if name.startswith("P_v_r"):
            group = "projection"
        elif name.startswith(("F_v.", "vision_bank.")):
            group = "vision"
        elif name.startswith(("F_t.", "text_bank.")):
            group = "text"
        else:
            group = "shared"
        errors[name] = T.finite_difference_errors(closures[group], [p], eps, [analytic[name]])[0]
    return GradcheckReport(errors, sum(p.data.size for p in params), eps)
