"""Seeded synthetic image/label corpus standing in for the real datasets.

Each class has a Gaussian prototype image in [0, 1] pixel space and a single
class-name token. Items are clamped noisy copies of their prototype, split
per class 50/25/25 into pretraining, few-shot pool and test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import container
from .encoder import CLASS_ID_BASE
from .errors import ContractError, DataError

SPLITS = ("pretrain", "fewshot_pool", "test")
MANIFEST_KIND = "manifest"


@dataclass(eq=False)
class TaskCorpus:
    prototypes: np.ndarray  # (C, s, s, 3)
    token_ids: np.ndarray  # (C,)
    images: np.ndarray  # (n, s, s, 3)
    labels: np.ndarray  # (n,) class index
    splits: np.ndarray  # (n,) index into SPLITS
    noise_scale: float
    seed: int
    items_per_class: int

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.prototypes.shape[1])

    def split_indices(self, name: str, classes: Iterable[int] | None = None) -> np.ndarray:
        idx = np.flatnonzero(self.splits == SPLITS.index(name))
        if classes is not None:
            idx = idx[np.isin(self.labels[idx], np.asarray(list(classes)))]
        return idx

    def same_as(self, other: "TaskCorpus") -> bool:
        return (
            self.noise_scale == other.noise_scale
            and self.seed == other.seed
            and self.items_per_class == other.items_per_class
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.prototypes, other.prototypes),
                    (self.token_ids, other.token_ids),
                    (self.images, other.images),
                    (self.labels, other.labels),
                    (self.splits, other.splits),
                )
            )
        )


def _split_counts(items_per_class: int) -> tuple[int, int, int]:
    n_pre = items_per_class // 2
    n_pool = items_per_class // 4
    return n_pre, n_pool, items_per_class - n_pre - n_pool


def generate_corpus(
    num_classes: int = 8,
    items_per_class: int = 80,
    noise_scale: float = 0.25,
    seed: int = 0,
    image_size: int = 32,
    prototypes: np.ndarray | None = None,
) -> TaskCorpus:
    if num_classes < 2:
        raise ContractError("need at least two classes")
    if items_per_class < 20:
        raise ContractError("need at least 20 items per class")
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = np.clip(0.5 + 0.25 * rng.standard_normal((num_classes, image_size, image_size, 3)), 0.0, 1.0)
    elif prototypes.shape[0] != num_classes:
        raise ContractError("prototype count does not match num_classes")
    n_pre, n_pool, n_test = _split_counts(items_per_class)
    tags = np.repeat(np.arange(3), (n_pre, n_pool, n_test))
    images, labels, splits = [], [], []
    for c in range(num_classes):
        noise = rng.standard_normal((items_per_class,) + prototypes.shape[1:])
        images.append(np.clip(prototypes[c] + noise_scale * noise, 0.0, 1.0))
        labels.append(np.full(items_per_class, c))
        splits.append(tags)
    return TaskCorpus(
        prototypes=prototypes,
        token_ids=CLASS_ID_BASE + np.arange(num_classes),
        images=np.concatenate(images),
        labels=np.concatenate(labels).astype(np.int64),
        splits=np.concatenate(splits).astype(np.int64),
        noise_scale=float(noise_scale),
        seed=int(seed),
        items_per_class=int(items_per_class),
    )


def shifted_corpus(corpus: TaskCorpus, seed: int) -> TaskCorpus:
    """Same classes and prototypes, doubled noise, fresh items."""
    return generate_corpus(
        corpus.num_classes, corpus.items_per_class, 2.0 * corpus.noise_scale, seed,
        corpus.image_size, prototypes=corpus.prototypes,
    )


def few_shot_sample(corpus: TaskCorpus, k: int, classes, seed: int) -> np.ndarray:
    """Indices of exactly ``k`` pool items for each class in ``classes``.

    ``classes`` may be a sequence of class indices or anything with a ``base``
    attribute (a split spec).
    """
    classes = getattr(classes, "base", classes)
    if k < 1:
        raise ContractError("k must be positive")
    rng = np.random.default_rng(seed)
    picked = []
    for c in sorted(int(c) for c in classes):
        pool = corpus.split_indices("fewshot_pool", [c])
        if pool.size < k:
            raise DataError(f"class {c} has {pool.size} pool items, {k} requested")
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)


def nearest_prototype_accuracy(corpus: TaskCorpus, split: str = "test") -> float:
    idx = corpus.split_indices(split)
    x = corpus.images[idx].reshape(idx.size, -1)
    p = corpus.prototypes.reshape(corpus.num_classes, -1)
    d = ((x[:, None, :] - p[None]) ** 2).sum(-1)
    return float((d.argmin(1) == corpus.labels[idx]).mean())


# ---------------------------------------------------------------------------
# manifest persistence
# ---------------------------------------------------------------------------


def to_container(corpus: TaskCorpus) -> container.Container:
    c = container.Container(MANIFEST_KIND)
    c.header.update(
        num_classes=str(corpus.num_classes),
        image_size=str(corpus.image_size),
        items_per_class=str(corpus.items_per_class),
        counts=",".join(str(int((corpus.splits == i).sum())) for i in range(len(SPLITS))),
        seed=str(corpus.seed),
        noise_scale=repr(corpus.noise_scale),
        token_ids=",".join(str(int(t)) for t in corpus.token_ids),
    )
    c.tensors["prototypes"] = corpus.prototypes
    for i in range(corpus.images.shape[0]):
        c.tensors[f"item.{i}"] = corpus.images[i]
    encoded = container.encode(c)  # fills offsets deterministically
    decoded_offsets = container.decode(encoded).offsets
    for i in range(corpus.images.shape[0]):
        c.records.append(
            f"{i} class={int(corpus.labels[i])} split={SPLITS[int(corpus.splits[i])]} offset={decoded_offsets[f'item.{i}']}"
        )
    return c


def save_manifest(corpus: TaskCorpus, path, extra_header: dict[str, str] | None = None) -> None:
    c = to_container(corpus)
    if extra_header:
        c.header.update(extra_header)
    container.save(path, c)


def load_manifest(path) -> TaskCorpus:
    c = container.load(path, expect_kind=MANIFEST_KIND)
    try:
        n = len(c.records)
        labels = np.empty(n, dtype=np.int64)
        splits = np.empty(n, dtype=np.int64)
        images = []
        for rec in c.records:
            idx, *fields = rec.split()
            kv = dict(f.split("=", 1) for f in fields)
            i = int(idx)
            labels[i] = int(kv["class"])
            splits[i] = SPLITS.index(kv["split"])
            if int(kv["offset"]) != c.offsets[f"item.{i}"]:
                raise DataError(f"manifest item {i} offset does not match its tensor block")
            images.append(c.tensors[f"item.{i}"])
        return TaskCorpus(
            prototypes=c.tensors["prototypes"],
            token_ids=np.array([int(t) for t in c.header["token_ids"].split(",")], dtype=np.int64),
            images=np.stack(images) if images else np.zeros((0,) + c.tensors["prototypes"].shape[1:]),
            labels=labels,
            splits=splits,
            noise_scale=float(c.header["noise_scale"]),
            seed=int(c.header["seed"]),
            items_per_class=int(c.header["items_per_class"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest: {exc}") from exc


def class_token_ids(corpus: TaskCorpus, classes: Sequence[int]) -> list[int]:
    return [int(corpus.token_ids[c]) for c in classes]
