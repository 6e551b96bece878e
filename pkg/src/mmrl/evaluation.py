"""Decoupled inference and the base-to-novel, few-shot, cross-dataset and
ablation protocols."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .core import (
    AdapterState,
    VARIANTS,
    VariantConfig,
    class_probabilities,
    encode_images,
    encode_texts,
    init_representation_state,
    mixture_probabilities,
    variant_from_name,
    vision_prefix,
)
from .data import TaskCorpus, class_token_ids, few_shot_sample, shifted_corpus
from .encoder import DEFAULT_TEMPLATE, DualEncoder
from .errors import ConfigError, ContractError, ProtocolError
from .objectives import LossWeights
from .tensor import no_grad
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    base: tuple[int, ...]
    novel: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if set(self.base) & set(self.novel):
            raise ProtocolError("base and novel classes overlap")


def base_novel_split(num_classes: int, seed: int = 0) -> SplitSpec:
    """Seeded partition with ceil(C/2) base classes."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    perm = np.random.default_rng(seed).permutation(num_classes)
    n_base = math.ceil(num_classes / 2)
    return SplitSpec(tuple(sorted(int(c) for c in perm[:n_base])),
                     tuple(sorted(int(c) for c in perm[n_base:])), seed)


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    if base_acc < 0 or novel_acc < 0:
        raise ContractError(f"accuracies must be non-negative, got {base_acc}, {novel_acc}")
    if base_acc + novel_acc == 0:
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


@dataclass
class EvalRecord:
    variant: str
    base_acc: float
    novel_acc: float
    hm: float
    seed: int
    config_hash: str

    def to_dict(self) -> dict:
        return asdict(self)


def records_json(records: Sequence[EvalRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True) + "\n"


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "base_acc", "novel_acc", "hm", "seed", "config_hash"])
    for r in records:
        w.writerow([r.variant, repr(r.base_acc), repr(r.novel_acc), repr(r.hm), r.seed, r.config_hash])
    return buf.getvalue()


def load_records(text: str) -> list[EvalRecord]:
    return [EvalRecord(**d) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# decoupled inference
# ---------------------------------------------------------------------------


def _features(images, backbone, state, need_repr):
    prefix = vision_prefix(images, backbone, state.J)
    need_repr = need_repr and (state.K > 0 or not state.variant.vision_tokens)
    return encode_images(None, backbone, state, prefix=prefix, need_repr=need_repr)


def predict_base(images, backbone: DualEncoder, state: AdapterState, classifiers, alpha: float, tau: float | None = None) -> np.ndarray:
    """alpha * p(y|f_c) + (1 - alpha) * p(y|f_r)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    tau = backbone.temperature if tau is None else tau
    with no_grad():
        f_c, f_r = _features(images, backbone, state, need_repr=True)
        if f_r is None:
            raise ContractError("base-class readout needs representation features (K >= 1)")
        return mixture_probabilities(
            class_probabilities(f_c, classifiers, tau), class_probabilities(f_r, classifiers, tau), alpha
        )


def predict_novel(images, backbone: DualEncoder, state: AdapterState, classifiers, tau: float | None = None) -> np.ndarray:
    """p(y|f_c) only; tokens are still inserted, f_r is never computed."""
    tau = backbone.temperature if tau is None else tau
    with no_grad():
        f_c, _ = _features(images, backbone, state, need_repr=False)
        return class_probabilities(f_c, classifiers, tau)


def text_classifiers(corpus: TaskCorpus, classes: Sequence[int], backbone, state, template=DEFAULT_TEMPLATE):
    with no_grad():
        return encode_texts(class_token_ids(corpus, classes), template, backbone, state)


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float((probs.argmax(-1) == labels).mean())


def _batched(fn, images, chunk=128):
    return np.concatenate([fn(images[i : i + chunk]) for i in range(0, len(images), chunk)])


def readout_accuracy(
    corpus: TaskCorpus,
    indices: np.ndarray,
    classes: Sequence[int],
    backbone: DualEncoder,
    state: AdapterState,
    alpha: float,
    mixture: bool,
    template: str = DEFAULT_TEMPLATE,
) -> float:
    """Accuracy (percent) over ``indices`` among ``classes`` with either readout."""
    W = text_classifiers(corpus, classes, backbone, state, template)
    lookup = {c: i for i, c in enumerate(classes)}
    labels = np.array([lookup[int(c)] for c in corpus.labels[indices]])
    if mixture:
        probs = _batched(lambda x: predict_base(x, backbone, state, W, alpha), corpus.images[indices])
    else:
        probs = _batched(lambda x: predict_novel(x, backbone, state, W), corpus.images[indices])
    return _accuracy(probs, labels)


def check_protocol(corpus: TaskCorpus, split: SplitSpec, state: AdapterState, train_indices=None) -> None:
    """Raise ProtocolError on any base/novel or train/test leakage."""
    if set(split.base) & set(split.novel):
        raise ProtocolError("base and novel classes overlap")
    if set(split.base) | set(split.novel) != set(range(corpus.num_classes)):
        raise ProtocolError("split does not cover every class")
    leaked = set(state.trained_classes) & set(split.novel)
    if leaked:
        raise ProtocolError(f"novel classes {sorted(leaked)} appear in the few-shot training split")
    if train_indices is not None:
        train_indices = np.asarray(train_indices)
        leaked = set(int(c) for c in corpus.labels[train_indices]) & set(split.novel)
        if leaked:
            raise ProtocolError(f"novel classes {sorted(leaked)} appear in the few-shot training split")
        if np.isin(train_indices, corpus.split_indices("test")).any():
            raise ProtocolError("few-shot training items overlap the test split")


def evaluate_base_to_novel(
    corpus: TaskCorpus,
    backbone: DualEncoder,
    state: AdapterState,
    split: SplitSpec,
    alpha: float = 0.7,
    variant_label: str | None = None,
    seed: int = 0,
    config_hash: str = "",
    train_indices=None,
    template: str = DEFAULT_TEMPLATE,
) -> EvalRecord:
    check_protocol(corpus, split, state, train_indices)
    v = state.variant
    base_idx = corpus.split_indices("test", split.base)
    novel_idx = corpus.split_indices("test", split.novel)
    base = readout_accuracy(corpus, base_idx, split.base, backbone, state, alpha, v.base_uses_mixture, template)
    novel = readout_accuracy(corpus, novel_idx, split.novel, backbone, state, alpha, not v.novel_uses_class_only, template)
    return EvalRecord(variant_label or "MMRL", base, novel, harmonic_mean(base, novel), seed, config_hash)


def evaluate_few_shot(corpus, backbone, state, alpha=0.7, template=DEFAULT_TEMPLATE) -> float:
    """All-class accuracy (percent) on the test split with the base-class readout."""
    classes = list(range(corpus.num_classes))
    return readout_accuracy(corpus, corpus.split_indices("test"), classes, backbone, state, alpha,
                            state.variant.base_uses_mixture, template)


def evaluate_cross_dataset(corpus, backbone, state, seed: int, template=DEFAULT_TEMPLATE) -> float:
    """Class-feature-only accuracy on a noisier re-draw of the same classes."""
    shifted = shifted_corpus(corpus, seed)
    classes = list(range(shifted.num_classes))
    return readout_accuracy(shifted, shifted.split_indices("test"), classes, backbone, state, 1.0, False, template)


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


def adapt(
    corpus: TaskCorpus,
    backbone: DualEncoder,
    split: SplitSpec,
    cfg: TrainConfig,
    shots: int = 16,
    classes: Sequence[int] | None = None,
) -> tuple[AdapterState, TrainResult, np.ndarray]:
    """Sample a few-shot split, initialise a state and train it."""
    classes = tuple(split.base if classes is None else classes)
    idx = few_shot_sample(corpus, shots, classes, cfg.seed)
    lookup = {c: i for i, c in enumerate(classes)}
    labels = np.array([lookup[int(c)] for c in corpus.labels[idx]])
    state = init_representation_state(cfg.K, cfg.d_r, cfg.J, backbone, cfg.seed, cfg.variant)
    result = train(corpus.images[idx], labels, class_token_ids(corpus, classes), backbone, state, cfg,
                   class_indices=classes)
    return state, result, idx


# Training only depends on the mode; the two decoupling flags are inference-time switches.
def _training_key(cfg: TrainConfig) -> tuple:
    return replace(cfg, variant=VariantConfig(cfg.variant.mode))


def run_ablation(
    corpus: TaskCorpus,
    backbone: DualEncoder,
    cells: Sequence[tuple[str, TrainConfig]],
    split: SplitSpec,
    shots: int = 16,
    config_hash: str = "",
) -> list[EvalRecord]:
    """Train and evaluate every (label, config) cell; returns records sorted by HM.

    Cells that differ only in inference flags share one trained state.
    """
    if not cells:
        raise ContractError("ablation grid is empty")
    cache: dict = {}
    records = []
    for label, cfg in cells:
        key = _training_key(cfg)
        if key not in cache:
            cache[key] = adapt(corpus, backbone, split, key, shots)
        state, _, idx = cache[key]
        state.variant = cfg.variant
        rec = evaluate_base_to_novel(corpus, backbone, state, split, cfg.weights.alpha, label, cfg.seed,
                                     config_hash, train_indices=idx, template=cfg.template)
        state.variant = key.variant
        records.append(rec)
        logger.info("%s seed %d: base %.2f novel %.2f hm %.2f", label, cfg.seed, rec.base_acc, rec.novel_acc, rec.hm)
    return sorted(records, key=lambda r: (-r.hm, r.variant, r.seed))


def variant_cells(base: TrainConfig, seeds: Iterable[int], names: Iterable[str] = tuple(VARIANTS)) -> list[tuple[str, TrainConfig]]:
    return [(n, replace(base, variant=variant_from_name(n), seed=s)) for n in names for s in seeds]


SWEEPS = {
    "alpha": (0.0, 0.3, 0.5, 0.7, 1.0),
    "lambda": (0.0, 0.2, 0.5, 2.0, 4.0),
    "K": (1, 3, 5, 7, 9),
    "d_r": (32, 128, 256, 512),
}


def sweep_cells(base: TrainConfig, param: str, values: Iterable, seeds: Iterable[int]) -> list[tuple[str, TrainConfig]]:
    """One cell per (value, seed); ``param`` is alpha, lambda, K, J or d_r."""
    cells = []
    for v in values:
        if param == "alpha":
            cfg = replace(base, weights=LossWeights(float(v), base.weights.lam))
        elif param == "lambda":
            cfg = replace(base, weights=LossWeights(base.weights.alpha, float(v)))
        elif param in ("K", "J", "d_r"):
            cfg = replace(base, **{param: int(v)})
        else:
            raise ConfigError(f"cannot sweep {param!r}")
        cells += [(f"MMRL[{param}={v}]", replace(cfg, seed=s)) for s in seeds]
    return cells


def layer_sweep_values(layers: int) -> list[int]:
    return list(range(1, layers + 1))
