"""Flat run configuration: defaults < key=value file < MMRL_SEED < command-line flags.

Config file format: one ``key = value`` per line, ``#`` starts a comment,
blank lines ignored, keys are RunConfig field names (``lambda`` is accepted
for ``lam``). Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .core import VARIANTS, variant_from_name
from .encoder import DEFAULT_TEMPLATE, EncoderDims
from .errors import ConfigError
from .objectives import REG_KINDS, LossWeights
from .training import TrainConfig

SEED_ENV = "MMRL_SEED"
# fields that locate files rather than shape results; left out of the hash
PATH_FIELDS = ("run_dir",)
ALIASES = {"lambda": "lam", "d_r": "dr"}


@dataclass(frozen=True)
class RunConfig:
    # seeds
    seed: int = 0
    data_seed: int = 0
    backbone_seed: int = 0
    split_seed: int = 0
    # corpus
    classes: int = 8
    items_per_class: int = 80
    noise_scale: float = 0.25
    shift_seed: int = 1
    # frozen surrogate
    image_size: int = 32
    patch_size: int = 8
    layers: int = 8
    vision_width: int = 64
    text_width: int = 48
    embed_dim: int = 32
    heads: int = 4
    context_length: int = 16
    vocab_size: int = 64
    temperature: float = 0.01
    pretrain_steps: int = 150
    pretrain_lr: float = 1e-3
    # adapter
    variant: str = "MMRL"
    K: int = 5
    J: int = 4
    dr: int = 32
    alpha: float = 0.7
    lam: float = 0.5
    reg_kind: str = "cosine"
    template: str = DEFAULT_TEMPLATE
    # training
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    shots: int = 16
    # ablation and gradcheck
    seeds: str = "0"
    grid: str = ""
    gradcheck_images: int = 2
    gradcheck_classes: int = 4
    # outputs
    run_dir: str = "runs/default"

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise ConfigError(f"reg_kind must be one of {REG_KINDS}, got {self.reg_kind!r}")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if not 1 <= self.J <= self.layers:
            raise ConfigError(f"J must lie in 1..{self.layers}, got {self.J}")
        if self.K < 0 or self.dr < 1 or self.shots < 1:
            raise ConfigError("K must be >= 0, dr and shots >= 1")
        variant_from_name(self.variant)
        LossWeights(self.alpha, self.lam)
        self.seed_list()

    # derived views

    def dims(self) -> EncoderDims:
        return EncoderDims(
            image_size=self.image_size, patch_size=self.patch_size, layers=self.layers,
            vision_width=self.vision_width, text_width=self.text_width, embed_dim=self.embed_dim,
            heads=self.heads, context_length=self.context_length, vocab_size=self.vocab_size,
            temperature=self.temperature,
        )

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            seed=self.seed, weights=LossWeights(self.alpha, self.lam), variant=variant_from_name(self.variant),
            J=self.J, K=self.K, d_r=self.dr, reg_kind=self.reg_kind, template=self.template,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.seeds!r}") from exc

    # serialisation

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def hash(self) -> str:
        """First 16 hex chars of SHA-256 over every non-path field."""
        body = "".join(f"{k}={v!r}\n" for k, v in self.items() if k not in PATH_FIELDS)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def coerce(key: str, value: str):
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from exc
    return value


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        key = canonical_key(key)
        values[key] = coerce(key, value.strip())
    return values


def resolve(file_text: str | None = None, flags: dict[str, object] | None = None, env=None) -> RunConfig:
    """Layer the sources in precedence order and validate the result."""
    env = os.environ if env is None else env
    values: dict[str, object] = {}
    if file_text:
        values.update(parse_config_text(file_text))
    if env.get(SEED_ENV, "").strip():
        values["seed"] = coerce("seed", env[SEED_ENV].strip())
    for k, v in (flags or {}).items():
        if v is not None:
            values[canonical_key(k)] = v
    return RunConfig(**values)


def variant_names() -> tuple[str, ...]:
    return tuple(VARIANTS)
