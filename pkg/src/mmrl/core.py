"""Shared representation space, per-layer modality maps, and token insertion
into the upper layers of both encoders.

Layer numbering follows the encoders: layers are 1..L, and the tokens fed to
layer ``i`` are produced by the map indexed ``i - 1``. Maps therefore exist
for indices J-1..L-1. At layers J..L-1 whatever the block writes into the
representation slots is thrown away and replaced by freshly mapped tokens;
only layer L's slot outputs are read.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import container
from . import tensor as T
from .encoder import (
    DualEncoder,
    EncoderDims,
    Linear,
    cosine_logits,
    TokenSequence,
    run_blocks,
    text_embed,
    tokenize,
    vision_embed,
)
from .errors import CapacityError, ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor, no_grad

MODES = ("full", "no_text_branch", "no_vision_branch", "no_shared_space", "coupled_text_to_vision")
INIT_STD = 0.02
BUNDLE_KIND = "adapter"

LayerHook = Callable[[int, Tensor], Tensor]


@dataclass(frozen=True)
class VariantConfig:
    mode: str = "full"
    base_uses_mixture: bool = True
    novel_uses_class_only: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown variant mode {self.mode!r}; choose from {MODES}")

    @property
    def vision_tokens(self) -> bool:
        return self.mode != "no_vision_branch"

    @property
    def text_tokens(self) -> bool:
        return self.mode != "no_text_branch"


# Names used in ablation tables, mapped to their configuration.
VARIANTS: dict[str, VariantConfig] = {
    "MMRL": VariantConfig(),
    "w/o L": VariantConfig("no_text_branch"),
    "w/o V": VariantConfig("no_vision_branch"),
    "w/o DS1": VariantConfig(base_uses_mixture=False),
    "w/o DS2": VariantConfig(novel_uses_class_only=False),
    "w/o RS": VariantConfig("no_shared_space"),
    "MMRL-dagger": VariantConfig("coupled_text_to_vision"),
}


def variant_from_name(name: str) -> VariantConfig:
    key = name.strip()
    aliases = {"full": "MMRL", "mmrl": "MMRL", "w/o_L": "w/o L", "w/o_V": "w/o V", "w/o_DS1": "w/o DS1",
               "w/o_DS2": "w/o DS2", "w/o_RS": "w/o RS", "MMRL+": "MMRL-dagger", "dagger": "MMRL-dagger"}
    key = aliases.get(key, key)
    if key in VARIANTS:
        return VARIANTS[key]
    if key in MODES:
        return VariantConfig(key)
    raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")


def variant_name(v: VariantConfig) -> str:
    for name, cfg in VARIANTS.items():
        if cfg == v:
            return name
    return f"{v.mode}[mix={int(v.base_uses_mixture)},cls={int(v.novel_uses_class_only)}]"


@dataclass
class RepresentationSpace:
    R: Tensor  # (K, d_r)

    @property
    def K(self) -> int:
        return self.R.shape[0]

    @property
    def d_r(self) -> int:
        return self.R.shape[1]


@dataclass
class MappingStack:
    """Per-layer maps keyed by layer index J-1..L-1."""

    vision: dict[int, Linear]
    text: dict[int, Linear]


class AdapterState:
    """Everything trainable, plus the hyperparameters that shape it."""

    def __init__(self, K: int, d_r: int, J: int, dims: EncoderDims, variant: VariantConfig, seed: int):
        self.K, self.d_r, self.J, self.L = K, d_r, J, dims.layers
        self.dims = dims
        self.variant = variant
        self.seed = seed
        self.space: RepresentationSpace | None = None
        self.maps = MappingStack({}, {})
        self.vision_banks: dict[int, Tensor] = {}
        self.text_banks: dict[int, Tensor] = {}
        self.text_bank: Tensor | None = None
        self.repr_proj: Linear | None = None
        self.trained_classes: tuple[int, ...] = ()

    @property
    def layer_indices(self) -> range:
        return range(self.J - 1, self.L)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order."""
        if self.space is not None:
            yield "R", self.space.R
        if self.text_bank is not None:
            yield "text_bank", self.text_bank
        for i, t in self.vision_banks.items():
            yield f"vision_bank.{i}", t
        for i, t in self.text_banks.items():
            yield f"text_bank.{i}", t
        for i, m in self.maps.vision.items():
            yield f"F_v.{i}.weight", m.weight
            yield f"F_v.{i}.bias", m.bias
        for i, m in self.maps.text.items():
            yield f"F_t.{i}.weight", m.weight
            yield f"F_t.{i}.bias", m.bias
        yield "P_v_r.weight", self.repr_proj.weight
        yield "P_v_r.bias", self.repr_proj.bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def header(self) -> dict[str, str]:
        v = self.variant
        return {
            "K": str(self.K), "d_r": str(self.d_r), "J": str(self.J), "L": str(self.L),
            "dims": ",".join(f"{k}:{val}" for k, val in self.dims.to_dict().items()),
            "mode": v.mode, "base_uses_mixture": str(int(v.base_uses_mixture)),
            "novel_uses_class_only": str(int(v.novel_uses_class_only)), "seed": str(self.seed),
            "trained_classes": ",".join(str(c) for c in self.trained_classes),
        }


def _dims_from_text(s: str) -> EncoderDims:
    kv = dict(item.split(":", 1) for item in s.split(","))
    fields = EncoderDims.__dataclass_fields__
    return EncoderDims(**{k: (float(v) if fields[k].type in ("float", float) else int(v)) for k, v in kv.items()})


def init_representation_state(
    K: int,
    d_r: int,
    J: int,
    backbone: DualEncoder,
    seed: int = 0,
    variant: VariantConfig = VariantConfig(),
) -> AdapterState:
    """Fresh adapter: tokens and map weights ~ N(0, 0.02^2), biases 0, P_v^r = copy of P_v^c."""
    dims = backbone.dims
    L = dims.layers
    if not 1 <= J <= L:
        raise ConfigError(f"insertion layer J={J} must lie in 1..{L}")
    if K < 0 or d_r < 1:
        raise ConfigError(f"need K >= 0 and d_r >= 1, got K={K}, d_r={d_r}")
    state = AdapterState(K, d_r, J, dims, variant, seed)
    rng = np.random.default_rng(seed)
    dv, dt = dims.vision_width, dims.text_width

    def gauss(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def lin(n_in, n_out):
        return Linear(gauss(n_in, n_out), Tensor(np.zeros(n_out), requires_grad=True))

    layers = state.layer_indices
    mode = variant.mode
    if mode in ("full", "no_text_branch", "no_vision_branch"):
        state.space = RepresentationSpace(gauss(K, d_r))
        if variant.vision_tokens:
            state.maps.vision = {i: lin(d_r, dv) for i in layers}
        if variant.text_tokens:
            state.maps.text = {i: lin(d_r, dt) for i in layers}
    elif mode == "no_shared_space":
        state.vision_banks = {i: gauss(K, dv) for i in layers}
        state.text_banks = {i: gauss(K, dt) for i in layers}
    else:  # coupled_text_to_vision
        state.text_bank = gauss(K, dt)
        state.maps.vision = {i: lin(dt, dv) for i in layers}
    state.repr_proj = backbone.vision.proj.copy(requires_grad=True)
    return state


def map_tokens(state: AdapterState, layer: int, modality: str) -> Tensor | None:
    """Tokens fed into encoder layer ``layer + 1`` for ``modality`` ("vision"/"text").

    Returns None when the variant has no tokens for that modality.
    """
    if layer not in state.layer_indices:
        raise ContractError(f"layer index {layer} outside {state.J - 1}..{state.L - 1}")
    if modality not in ("vision", "text"):
        raise ContractError(f"unknown modality {modality!r}")
    mode = state.variant.mode
    if mode == "no_shared_space":
        return (state.vision_banks if modality == "vision" else state.text_banks)[layer]
    if mode == "coupled_text_to_vision":
        return state.text_bank if modality == "text" else state.maps.vision[layer](state.text_bank)
    maps = state.maps.vision if modality == "vision" else state.maps.text
    if not maps:
        return None
    return maps[layer](state.space.R)


def extended_causal_mask(K: int, n: int) -> np.ndarray:
    """Lower-triangular mask over the order [b, K representation slots, T.., e]."""
    if K < 0:
        raise ContractError("K must be non-negative")
    return T.causal_mask(n + K)


def _splice(x: Tensor, tokens: Tensor, K: int, first: bool) -> Tensor:
    """Write ``tokens`` into slots 1..K, inserting them on the first call."""
    B = x.shape[0]
    tb = T.broadcast_to(tokens.reshape(1, *tokens.shape), (B,) + tokens.shape)
    rest = x[:, 1:] if first else x[:, 1 + K :]
    return T.concat([x[:, :1], tb, rest], axis=1)


# ---------------------------------------------------------------------------
# vision
# ---------------------------------------------------------------------------


def vision_prefix(images, backbone: DualEncoder, J: int, weights_out: list | None = None) -> Tensor:
    """Hidden state entering layer J (layers 1..J-1 run vanilla)."""
    vision = backbone.vision
    return run_blocks(vision_embed(images, vision), vision.blocks[: J - 1], None, weights_out)


def vision_from_prefix(x: Tensor, backbone: DualEncoder, J: int) -> Tensor:
    """Vanilla layers J..L on a prefix, returning c_L."""
    vision = backbone.vision
    return vision.ln_post(run_blocks(x, vision.blocks[J - 1 :]))[:, 0]


def vision_forward_mmrl(
    images,
    backbone: DualEncoder,
    state: AdapterState,
    prefix: Tensor | None = None,
    layer_hook: LayerHook | None = None,
    weights_out: list | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Image encoding with representation tokens; returns (c_L, R_L^v).

    ``layer_hook(i, x)`` sees (and may replace) the output of every layer i
    in J..L-1 before its representation slots are overwritten.
    """
    vision = backbone.vision
    J, L, K = state.J, state.L, state.K
    x = prefix if prefix is not None else vision_prefix(images, backbone, J, weights_out)
    if not state.variant.vision_tokens:
        x = vision.ln_post(run_blocks(x, vision.blocks[J - 1 :], None, weights_out))
        return x[:, 0], None
    for i in range(J, L + 1):
        x = _splice(x, map_tokens(state, i - 1, "vision"), K, first=i == J)
        x = vision.blocks[i - 1](x, None, weights_out)
        if layer_hook is not None and i < L:
            x = layer_hook(i, x)
    x = vision.ln_post(x)
    return x[:, 0], x[:, 1 : 1 + K]


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------


@dataclass
class TextPrefix:
    hidden: Tensor  # (C, n, d_t) entering layer J
    eot_index: int


def text_prefix(tokens, backbone: DualEncoder, J: int, weights_out: list | None = None, K: int = 0) -> TextPrefix:
    """Hidden states entering layer J; raises CapacityError if K inserted tokens would not fit."""
    text = backbone.text
    x, eot = text_embed(tokens, text, extra=K)
    x = run_blocks(x, text.blocks[: J - 1], T.causal_mask(x.shape[1]), weights_out)
    return TextPrefix(x, eot)


def text_forward_mmrl(
    tokens,
    backbone: DualEncoder,
    state: AdapterState,
    prefix: TextPrefix | None = None,
    layer_hook: LayerHook | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Text encoding with representation tokens spliced in after BOT; returns e_L."""
    text = backbone.text
    J, L, K = state.J, state.L, state.K
    if prefix is None:
        prefix = text_prefix(tokens, backbone, J, weights_out, K if state.variant.text_tokens else 0)
    x, eot = prefix.hidden, prefix.eot_index
    n = x.shape[1]
    if not state.variant.text_tokens:
        x = run_blocks(x, text.blocks[J - 1 :], T.causal_mask(n), weights_out)
        return text.ln_final(x[:, eot])
    if n + K > text.dims.context_length:
        raise CapacityError(f"sequence of {n} tokens plus {K} representation tokens exceeds context")
    mask = extended_causal_mask(K, n)
    for i in range(J, L + 1):
        x = _splice(x, map_tokens(state, i - 1, "text"), K, first=i == J)
        x = text.blocks[i - 1](x, mask, weights_out)
        if layer_hook is not None and i < L:
            x = layer_hook(i, x)
    return text.ln_final(x[:, eot + K])


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def extract_image_features(
    c_L: Tensor, R_L: Tensor | None, backbone: DualEncoder, state: AdapterState, need_repr: bool = True
) -> tuple[Tensor, Tensor | None]:
    """f_c = P_v^c(c_L) and f_r = P_v^r(mean over the K slot outputs)."""
    f_c = backbone.vision.proj(c_L)
    if not need_repr:
        return f_c, None
    if not state.variant.vision_tokens:
        # no vision slots: the trainable projection reads the class slot instead
        return f_c, state.repr_proj(c_L)
    if R_L is None or R_L.shape[-2] == 0:
        raise ContractError("f_r needs at least one representation token (K >= 1)")
    return f_c, state.repr_proj(T.mean(R_L, axis=-2))


def extract_text_features(e_L: Tensor, backbone: DualEncoder) -> Tensor:
    return backbone.text.proj(e_L)


def encode_images(images, backbone, state, prefix=None, need_repr=True, layer_hook=None):
    c_L, R_L = vision_forward_mmrl(images, backbone, state, prefix=prefix, layer_hook=layer_hook)
    return extract_image_features(c_L, R_L, backbone, state, need_repr)


def class_tokens(class_ids: Sequence[int], template: str) -> list[TokenSequence]:
    return [tokenize(template, int(c)) for c in class_ids]


def encode_texts(class_ids, template, backbone, state, prefix: TextPrefix | None = None, layer_hook=None) -> Tensor:
    """Text classifiers W (one row per class) with representation tokens inserted."""
    toks = class_tokens(class_ids, template) if prefix is None else None
    return extract_text_features(text_forward_mmrl(toks, backbone, state, prefix, layer_hook), backbone)


def cached_text_prefix(class_ids, template, backbone, J, K: int = 0) -> TextPrefix:
    with no_grad():
        return text_prefix(class_tokens(class_ids, template), backbone, J, K=K)


# ---------------------------------------------------------------------------
# adapter bundle persistence
# ---------------------------------------------------------------------------


def state_to_container(state: AdapterState, extra_header: dict[str, str] | None = None) -> container.Container:
    c = container.Container(BUNDLE_KIND)
    c.header.update(state.header())
    if extra_header:
        c.header.update(extra_header)
    for name, t in state.named_parameters():
        c.tensors[name] = t.data
    return c


def save_adapter(state: AdapterState, path, extra_header: dict[str, str] | None = None) -> None:
    container.save(path, state_to_container(state, extra_header))


def load_adapter(path, backbone: DualEncoder) -> tuple[AdapterState, dict[str, str]]:
    c = container.load(path, expect_kind=BUNDLE_KIND)
    h = c.header
    try:
        dims = _dims_from_text(h["dims"])
        variant = VariantConfig(h["mode"], h["base_uses_mixture"] == "1", h["novel_uses_class_only"] == "1")
        K, d_r, J, seed = int(h["K"]), int(h["d_r"]), int(h["J"]), int(h["seed"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed adapter header: {exc}") from exc
    if dims != backbone.dims:
        raise ShapeError(f"adapter was built for {dims}, backbone has {backbone.dims}")
    state = init_representation_state(K, d_r, J, backbone, seed, variant)
    own = dict(state.named_parameters())
    if set(own) != set(c.tensors):
        raise DataError("adapter bundle tensors do not match its declared variant")
    for name, t in own.items():
        if c.tensors[name].shape != t.shape:
            raise ShapeError(f"{name}: bundle shape {c.tensors[name].shape} != {t.shape}")
        t.data = np.array(c.tensors[name])
    tc = h.get("trained_classes", "")
    state.trained_classes = tuple(int(x) for x in tc.split(",")) if tc else ()
    return state, h


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------


def class_probabilities(f: Tensor, W: Tensor, temperature: float) -> np.ndarray:
    with no_grad():
        return T.softmax(cosine_logits(f, W, temperature), axis=-1).data


def mixture_probabilities(p_class: np.ndarray, p_repr: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * p(y|f_c) + (1 - alpha) * p(y|f_r)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * p_class + (1.0 - alpha) * p_repr
