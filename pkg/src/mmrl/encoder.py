"""Desk-scale CLIP surrogate: a patch ViT, a causal text transformer, frozen
projections into a shared latent space, and temperature-scaled zero-shot
classification.

Both encoders use pre-norm residual blocks. Activations are batched as
``(batch, sequence, width)`` throughout.
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, asdict
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, DataError, NormalizationError, ShapeError
from .optim import OptimizerState, adamw_step
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PAD_ID, BOT_ID, EOT_ID = 0, 1, 2
# ids 3..15 hold template words, class-name tokens live at 16 and above
WORD_ID_BASE, WORD_ID_SLOTS = 3, 13
CLASS_ID_BASE = WORD_ID_BASE + WORD_ID_SLOTS
DEFAULT_TEMPLATE = "a photo of a [CLASS]"
# preprocessing statistics of the synthetic pixel distribution (clamped N(0.5, 0.25^2))
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25
CLASS_SLOT = "[CLASS]"


@dataclass(frozen=True)
class EncoderDims:
    image_size: int = 32
    patch_size: int = 8
    layers: int = 8
    vision_width: int = 64
    text_width: int = 48
    embed_dim: int = 32
    heads: int = 4
    context_length: int = 16
    vocab_size: int = 64
    mlp_ratio: int = 4
    temperature: float = 0.01

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.vision_width % self.heads or self.text_width % self.heads:
            raise ShapeError("encoder widths must be divisible by the head count")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.vocab_size <= CLASS_ID_BASE:
            raise ContractError(f"vocab_size must exceed {CLASS_ID_BASE}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float, requires_grad=False) -> "Linear":
        return cls(
            Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=requires_grad),
            Tensor(np.zeros(n_out), requires_grad=requires_grad),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def copy(self, requires_grad: bool = False) -> "Linear":
        return Linear(
            Tensor(self.weight.data.copy(), requires_grad=requires_grad),
            Tensor(self.bias.data.copy(), requires_grad=requires_grad),
        )

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class LayerNorm:
    def __init__(self, width: int):
        self.gamma = Tensor(np.ones(width))
        self.beta = Tensor(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=1e-5)

    def tensors(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class Block:
    """Pre-norm transformer layer: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, mlp_ratio: int, depth: int):
        self.width = width
        self.heads = heads
        resid_std = width**-0.5 / np.sqrt(2 * depth)
        self.ln_1 = LayerNorm(width)
        self.qkv = Linear.init(rng, width, 3 * width, width**-0.5)
        self.out = Linear.init(rng, width, width, resid_std)
        self.ln_2 = LayerNorm(width)
        self.fc = Linear.init(rng, width, mlp_ratio * width, width**-0.5)
        self.proj = Linear.init(rng, mlp_ratio * width, width, resid_std)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, weights_out: list | None = None) -> Tensor:
        d = self.width
        qkv = self.qkv(self.ln_1(x))
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        x = x + self.out(T.masked_attention(q, k, v, mask, self.heads, weights_out))
        return x + self.proj(T.gelu(self.fc(self.ln_2(x))))

    def tensors(self):
        for prefix, sub in (("ln_1", self.ln_1), ("qkv", self.qkv), ("out", self.out),
                            ("ln_2", self.ln_2), ("fc", self.fc), ("proj", self.proj)):
            for name, t in sub.tensors():
                yield f"{prefix}.{name}", t


class VisionBackbone:
    def __init__(self, dims: EncoderDims, rng: np.random.Generator):
        self.dims = dims
        w = dims.vision_width
        patch_dim = dims.patch_size**2 * 3
        self.patch_proj = Linear.init(rng, patch_dim, w, patch_dim**-0.5)
        self.class_token = Tensor(rng.normal(0.0, w**-0.5, size=w))
        self.positional = Tensor(rng.normal(0.0, 0.02, size=(dims.num_patches + 1, w)))
        self.ln_pre = LayerNorm(w)
        self.blocks = [Block(rng, w, dims.heads, dims.mlp_ratio, dims.layers) for _ in range(dims.layers)]
        self.ln_post = LayerNorm(w)
        self.proj = Linear.init(rng, w, dims.embed_dim, w**-0.5)  # P_v^c

    def tensors(self):
        yield from (("patch_proj." + n, t) for n, t in self.patch_proj.tensors())
        yield "class_token", self.class_token
        yield "positional", self.positional
        yield from (("ln_pre." + n, t) for n, t in self.ln_pre.tensors())
        for i, blk in enumerate(self.blocks):
            yield from ((f"blocks.{i}.{n}", t) for n, t in blk.tensors())
        yield from (("ln_post." + n, t) for n, t in self.ln_post.tensors())
        yield from (("proj." + n, t) for n, t in self.proj.tensors())


class TextBackbone:
    def __init__(self, dims: EncoderDims, rng: np.random.Generator):
        self.dims = dims
        w = dims.text_width
        self.token_embedding = Tensor(rng.normal(0.0, 0.02, size=(dims.vocab_size, w)))
        self.positional = Tensor(rng.normal(0.0, 0.01, size=(dims.context_length, w)))
        self.blocks = [Block(rng, w, dims.heads, dims.mlp_ratio, dims.layers) for _ in range(dims.layers)]
        self.ln_final = LayerNorm(w)
        self.proj = Linear.init(rng, w, dims.embed_dim, w**-0.5)  # P_t

    def tensors(self):
        yield "token_embedding", self.token_embedding
        yield "positional", self.positional
        for i, blk in enumerate(self.blocks):
            yield from ((f"blocks.{i}.{n}", t) for n, t in blk.tensors())
        yield from (("ln_final." + n, t) for n, t in self.ln_final.tensors())
        yield from (("proj." + n, t) for n, t in self.proj.tensors())


class DualEncoder:
    """Vision and text backbones plus the fixed temperature.

    After :meth:`freeze` every tensor is read-only at the numpy level, so an
    accidental in-place update raises instead of silently corrupting the
    pretrained weights.
    """

    def __init__(self, dims: EncoderDims = EncoderDims(), seed: int = 0):
        self.dims = dims
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.vision = VisionBackbone(dims, rng)
        self.text = TextBackbone(dims, rng)
        self.frozen = False
        self.pretrain_steps = 0

    @property
    def temperature(self) -> float:
        return self.dims.temperature

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from (("vision." + n, t) for n, t in self.vision.tensors())
        yield from (("text." + n, t) for n, t in self.text.tensors())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def set_trainable(self, flag: bool) -> None:
        if flag and self.frozen:
            raise ContractError("backbone is frozen")
        for t in self.parameters():
            t.requires_grad = flag

    def freeze(self) -> "DualEncoder":
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None
            t.data = np.ascontiguousarray(t.data)
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def fingerprint(self) -> str:
        """SHA-256 over every backbone tensor, including both projections."""
        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(arrays)
        if missing:
            raise DataError(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
        for name, t in own.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)


# ---------------------------------------------------------------------------
# vision path
# ---------------------------------------------------------------------------


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def patch_embed(images, vision: VisionBackbone) -> Tensor:
    """Raster-order patches projected to the vision width: (B, M, d_v)."""
    arr, single = _as_batch(images)
    dims = vision.dims
    s, p = dims.image_size, dims.patch_size
    if arr.ndim != 4 or arr.shape[1:] != (s, s, 3):
        raise ShapeError(f"expected images of shape (B, {s}, {s}, 3), got {arr.shape}")
    g = s // p
    patches = arr.reshape(arr.shape[0], g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(arr.shape[0], g * g, p * p * 3)
    out = vision.patch_proj(Tensor(patches))
    return out[0] if single else out


def vision_embed(images, vision: VisionBackbone) -> Tensor:
    """Normalised pixels -> class token + patches + positional embeddings -> ln_pre."""
    arr, _ = _as_batch(images)
    E0 = patch_embed((arr - PIXEL_MEAN) / PIXEL_STD, vision)
    if E0.ndim == 2:
        E0 = E0.reshape(1, *E0.shape)
    B = E0.shape[0]
    c0 = T.broadcast_to(vision.class_token.reshape(1, 1, -1), (B, 1, vision.dims.vision_width))
    x = T.concat([c0, E0], axis=1) + vision.positional
    return vision.ln_pre(x)


def run_blocks(x: Tensor, blocks: Sequence[Block], mask=None, weights_out: list | None = None) -> Tensor:
    for blk in blocks:
        x = blk(x, mask, weights_out)
    return x


def vision_forward(images, backbone: DualEncoder) -> tuple[Tensor, Tensor]:
    """Vanilla image encoding; returns (c_L, E_L) after the final layer norm."""
    vision = backbone.vision
    x = run_blocks(vision_embed(images, vision), vision.blocks)
    x = vision.ln_post(x)
    return x[:, 0], x[:, 1:]


def image_features(images, backbone: DualEncoder) -> Tensor:
    """f = P_v^c(c_L), token-free."""
    c_L, _ = vision_forward(images, backbone)
    return backbone.vision.proj(c_L)


# ---------------------------------------------------------------------------
# text path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    eot_index: int

    def __len__(self) -> int:
        return len(self.ids)

    def extended(self, extra: Sequence[int]) -> "TokenSequence":
        return TokenSequence(self.ids + tuple(extra), self.eot_index)


def word_id(word: str) -> int:
    """Stable id for a template word, in the reserved word block."""
    return WORD_ID_BASE + zlib.crc32(word.lower().encode()) % WORD_ID_SLOTS


def tokenize(template: str, class_name_id: int) -> TokenSequence:
    """``[BOT, words with [CLASS] -> class id, EOT]``; one token per class name."""
    if class_name_id < CLASS_ID_BASE:
        raise ContractError(f"class token id {class_name_id} collides with reserved ids (< {CLASS_ID_BASE})")
    words = template.split()
    if words.count(CLASS_SLOT) != 1:
        raise ContractError(f"template must contain exactly one {CLASS_SLOT} slot: {template!r}")
    ids = [BOT_ID] + [class_name_id if w == CLASS_SLOT else word_id(w) for w in words] + [EOT_ID]
    return TokenSequence(tuple(ids), len(ids) - 1)


def _token_batch(tokens: TokenSequence | Sequence[TokenSequence]) -> tuple[np.ndarray, int]:
    seqs = [tokens] if isinstance(tokens, TokenSequence) else list(tokens)
    if not seqs:
        raise ContractError("no token sequences")
    lengths = {len(s) for s in seqs}
    eots = {s.eot_index for s in seqs}
    if len(lengths) != 1 or len(eots) != 1:
        raise ShapeError("token sequences in one batch must share length and EOT index")
    return np.array([s.ids for s in seqs], dtype=np.int64), eots.pop()


def text_embed(tokens, text: TextBackbone, extra: int = 0) -> tuple[Tensor, int]:
    """Embedded tokens up to and including EOT.

    Capacity is checked on the full sequence plus ``extra`` inserted tokens.
    Positions after EOT are dropped: under the causal mask they cannot reach
    e_L, and BLAS picks length-dependent summation orders, so computing them
    would perturb e_L in the last bits.
    """
    ids, eot = _token_batch(tokens)
    if ids.min() < 0 or ids.max() >= text.dims.vocab_size:
        raise ContractError(f"token id outside vocabulary of size {text.dims.vocab_size}")
    n = ids.shape[1]
    if n + extra > text.dims.context_length:
        raise CapacityError(f"sequence length {n} (+{extra} inserted) exceeds context length {text.dims.context_length}")
    ids = ids[:, : eot + 1]
    x = text.token_embedding[ids] + text.positional[: eot + 1]
    return x, eot


def text_forward(tokens, backbone: DualEncoder) -> Tensor:
    """Causal text encoding; returns e_L (after ln_final), one row per sequence."""
    text = backbone.text
    x, eot = text_embed(tokens, text)
    x = run_blocks(x, text.blocks, T.causal_mask(x.shape[1]))
    return text.ln_final(x[:, eot])


def encode_classifiers(class_ids: Sequence[int], template: str, backbone: DualEncoder) -> Tensor:
    """W_0: token-free text features, one row per class."""
    if len(class_ids) < 2:
        raise ContractError("need at least two classes to build classifiers")
    tokens = [tokenize(template, c) for c in class_ids]
    return backbone.text.proj(text_forward(tokens, backbone))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def cosine_logits(features: Tensor, classifiers: Tensor, temperature: float) -> Tensor:
    """cos(f, w_c) / tau for each row of ``features`` against each class."""
    f = T.l2_normalize(features, axis=-1)
    w = T.l2_normalize(classifiers, axis=-1)
    if f.ndim == 1:
        f = f.reshape(1, -1)
        return (T.matmul(f, T.transpose(w)) * (1.0 / temperature))[0]
    return T.matmul(f, T.transpose(w)) * (1.0 / temperature)


def zero_shot_classify(features, classifiers, temperature: float) -> np.ndarray:
    """Class probabilities softmax_c(cos(f, w_c)/tau)."""
    with no_grad():
        logits = cosine_logits(T.as_tensor(features), T.as_tensor(classifiers), temperature)
        return T.softmax(logits, axis=-1).data


# ---------------------------------------------------------------------------
# surrogate pretraining
# ---------------------------------------------------------------------------


def info_nce(image_feats: Tensor, text_feats: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over matched rows of the two feature matrices."""
    logits = cosine_logits(image_feats, text_feats, temperature)
    n = logits.shape[0]
    diag = (np.arange(n), np.arange(n))
    i2t = T.log_softmax(logits, axis=1)[diag]
    t2i = T.log_softmax(logits, axis=0)[diag]
    return (i2t.sum() + t2i.sum()) * (-0.5 / n)


def pretrain_surrogate(
    corpus,
    steps: int = 300,
    lr: float = 1e-3,
    seed: int = 0,
    dims: EncoderDims = EncoderDims(),
    template: str = DEFAULT_TEMPLATE,
    batch_classes: int = 8,
    temperature: float = 0.07,
    loss_trace: list | None = None,
) -> DualEncoder:
    """Contrastively train a fresh backbone on the corpus' pretraining split, then freeze it.

    Each step draws ``batch_classes`` distinct classes and one image per class,
    so every image has exactly one positive caption in the batch.
    """
    idx = corpus.split_indices("pretrain")
    if idx.size == 0:
        raise DataError("corpus has no pretraining items")
    model = DualEncoder(dims, seed=seed)
    model.set_trainable(True)
    params = model.parameters()
    opt = OptimizerState(lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed + 1)
    labels = corpus.labels[idx]
    by_class = [idx[labels == c] for c in range(corpus.num_classes)]
    tokens = [tokenize(template, int(t)) for t in corpus.token_ids]
    n_cls = min(batch_classes, corpus.num_classes)
    for step in range(steps):
        classes = np.sort(rng.choice(corpus.num_classes, size=n_cls, replace=False))
        picks = np.array([rng.choice(by_class[c]) for c in classes])
        for p in params:
            p.grad = None
        img = image_features(corpus.images[picks], model)
        txt = model.text.proj(text_forward([tokens[c] for c in classes], model))
        loss = info_nce(img, txt, temperature)
        T.backward(loss)
        adamw_step(params, [p.grad for p in params], opt)
        if loss_trace is not None:
            loss_trace.append(float(loss.data))
        if step % 50 == 0:
            logger.debug("pretrain step %d loss %.4f", step, float(loss.data))
    for p in params:
        p.grad = None
    model.pretrain_steps = steps
    return model.freeze()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KIND = "checkpoint"


def save_backbone(backbone: DualEncoder, path, extra_header: dict[str, str] | None = None) -> None:
    from . import container

    c = container.Container(CHECKPOINT_KIND)
    c.header.update({k: str(v) for k, v in backbone.dims.to_dict().items()})
    c.header.update(seed=str(backbone.seed), pretrain_steps=str(backbone.pretrain_steps),
                    content_sha256=backbone.fingerprint())
    if extra_header:
        c.header.update(extra_header)
    for name, t in backbone.named_tensors():
        c.tensors[name] = t.data
    container.save(path, c)


def load_backbone(path) -> tuple[DualEncoder, dict[str, str]]:
    """Load and freeze a checkpoint, verifying its content hash."""
    from . import container
    from .errors import IntegrityError

    c = container.load(path, expect_kind=CHECKPOINT_KIND)
    fields = EncoderDims.__dataclass_fields__
    try:
        dims = EncoderDims(**{k: (float(c.header[k]) if fields[k].type == "float" else int(c.header[k]))
                              for k in fields})
        model = DualEncoder(dims, seed=int(c.header["seed"]))
        model.pretrain_steps = int(c.header["pretrain_steps"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed checkpoint header: {exc}") from exc
    model.load_arrays(c.tensors)
    model.freeze()
    if model.fingerprint() != c.header.get("content_sha256"):
        raise IntegrityError("checkpoint content hash does not match its tensors")
    return model, c.header
