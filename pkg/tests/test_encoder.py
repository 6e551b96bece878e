import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmrl import tensor as T
from mmrl.encoder import (
    BOT_ID,
    CLASS_ID_BASE,
    DEFAULT_TEMPLATE,
    EOT_ID,
    DualEncoder,
    EncoderDims,
    encode_classifiers,
    image_features,
    info_nce,
    load_backbone,
    patch_embed,
    pretrain_surrogate,
    save_backbone,
    text_embed,
    text_forward,
    tokenize,
    vision_embed,
    vision_forward,
    zero_shot_classify,
)
from mmrl.errors import CapacityError, ContractError, DataError, IntegrityError, NormalizationError, ShapeError
from mmrl.tensor import Tensor, no_grad


def test_dims_validation():
    assert EncoderDims().num_patches == 16
    with pytest.raises(ShapeError):
        EncoderDims(image_size=30)
    with pytest.raises(ShapeError):
        EncoderDims(heads=5)
    with pytest.raises(ContractError):
        EncoderDims(temperature=0.0)


# patches


def test_patch_embed_shapes_and_zero_image(random_backbone):
    img = np.zeros((32, 32, 3))
    out = patch_embed(img, random_backbone.vision)
    assert out.shape == (16, 64)
    np.testing.assert_array_equal(out.data, 0.0)  # biases start at zero


def test_patch_embed_is_local(random_backbone, rng):
    a = rng.uniform(size=(32, 32, 3))
    b = a.copy()
    # patch 7 in raster order: grid row 1, column 3
    b[8:16, 24:32] += 0.5
    diff = np.abs(patch_embed(a, random_backbone.vision).data - patch_embed(b, random_backbone.vision).data).max(axis=1)
    assert np.flatnonzero(diff).tolist() == [7]


def test_patch_embed_wrong_size(random_backbone):
    with pytest.raises(ShapeError):
        patch_embed(np.zeros((30, 30, 3)), random_backbone.vision)


# vision


def test_vision_forward_shapes_and_determinism(rng):
    img = rng.uniform(size=(2, 32, 32, 3))
    c1, E1 = vision_forward(img, DualEncoder(seed=3))
    c2, E2 = vision_forward(img, DualEncoder(seed=3))
    assert c1.shape == (2, 64) and E1.shape == (2, 16, 64)
    assert c1.data.tobytes() == c2.data.tobytes() and E1.data.tobytes() == E2.data.tobytes()


def test_vision_attention_is_bidirectional(random_backbone, rng):
    """Permuting patch rows with their positional embeddings permutes E_L and fixes c_L."""
    vision = random_backbone.vision
    img = rng.uniform(size=(1, 32, 32, 3))
    perm = rng.permutation(16)
    with no_grad():
        x = vision_embed(img, vision)
        xp = Tensor(np.concatenate([x.data[:, :1], x.data[:, 1:][:, perm]], axis=1))
        out = vision.ln_post(_run(x, vision)).data
        outp = vision.ln_post(_run(xp, vision)).data
    np.testing.assert_allclose(outp[:, 0], out[:, 0], atol=1e-12)
    np.testing.assert_allclose(outp[:, 1:], out[:, 1:][:, perm], atol=1e-12)


def _run(x, vision):
    for blk in vision.blocks:
        x = blk(x)
    return x


# tokens and text


def test_tokenize_layout():
    seq = tokenize("a photo of a [CLASS]", CLASS_ID_BASE)
    assert len(seq) == 7 and seq.eot_index == 6
    assert seq.ids[0] == BOT_ID and seq.ids[-1] == EOT_ID
    other = tokenize("a photo of a [CLASS]", CLASS_ID_BASE + 1)
    assert sum(a != b for a, b in zip(seq.ids, other.ids)) == 1


@pytest.mark.parametrize("bad", [0, 1, 2, 3, CLASS_ID_BASE - 1])
def test_tokenize_rejects_reserved_ids(bad):
    with pytest.raises(ContractError):
        tokenize(DEFAULT_TEMPLATE, bad)


def test_tokenize_needs_one_slot():
    with pytest.raises(ContractError):
        tokenize("a photo", CLASS_ID_BASE)
    with pytest.raises(ContractError):
        tokenize("[CLASS] and [CLASS]", CLASS_ID_BASE)


def test_text_forward_class_sensitivity(random_backbone):
    a = text_forward(tokenize(DEFAULT_TEMPLATE, 20), random_backbone).data
    b = text_forward(tokenize(DEFAULT_TEMPLATE, 21), random_backbone).data
    assert a.shape == (1, 48) and np.abs(a - b).max() > 1e-6


@given(st.lists(st.integers(0, 63), min_size=1, max_size=9))
@settings(max_examples=30, deadline=None)
def test_appending_after_eot_leaves_e_L_bitwise(random_backbone, extra):
    seq = tokenize(DEFAULT_TEMPLATE, 30)
    with no_grad():
        base = text_forward(seq, random_backbone).data
        ext = text_forward(seq.extended(extra), random_backbone).data
    assert base.tobytes() == ext.tobytes()


@given(st.integers(0, 2**31 - 1), st.integers(0, 14))
@settings(max_examples=20, deadline=None)
def test_text_layers_are_causal(random_backbone, seed, p):
    """Perturbing positions > p leaves every layer output at positions <= p bitwise unchanged."""
    rng = np.random.default_rng(seed)
    text = random_backbone.text
    ids = rng.integers(3, 64, size=16)
    ids2 = ids.copy()
    ids2[p + 1 :] = rng.integers(3, 64, size=15 - p)
    mask = T.causal_mask(16)
    with no_grad():
        x = text.token_embedding[ids[None]] + text.positional
        y = text.token_embedding[ids2[None]] + text.positional
        for blk in text.blocks:
            x, y = blk(x, mask), blk(y, mask)
            assert x.data[:, : p + 1].tobytes() == y.data[:, : p + 1].tobytes()


def test_text_capacity(random_backbone):
    seq = tokenize(DEFAULT_TEMPLATE, 20).extended([5] * 10)
    with pytest.raises(CapacityError):
        text_embed(seq, random_backbone.text)


def test_text_vocab_range(random_backbone):
    with pytest.raises(ContractError):
        text_forward(tokenize(DEFAULT_TEMPLATE, 64), random_backbone)


def test_encode_classifiers(random_backbone):
    W = encode_classifiers([16, 17, 18], DEFAULT_TEMPLATE, random_backbone).data
    W2 = encode_classifiers([16, 17, 18], DEFAULT_TEMPLATE, DualEncoder(seed=0)).data
    assert W.shape == (3, 32) and W.tobytes() == W2.tobytes()
    assert min(np.abs(W[i] - W[j]).max() for i in range(3) for j in range(i)) > 1e-6
    with pytest.raises(ContractError):
        encode_classifiers([16], DEFAULT_TEMPLATE, random_backbone)


# zero-shot readout


def test_zero_shot_examples():
    f = np.array([1.0, 0.0])
    np.testing.assert_allclose(zero_shot_classify(f, np.ones((4, 2)), 0.01), 0.25, atol=1e-15)
    p = zero_shot_classify(f, np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0)
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], rtol=1e-14)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 10.0))
def test_zero_shot_argmax_matches_cosine(seed, tau):
    rng = np.random.default_rng(seed)
    f, W = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    p = zero_shot_classify(f, W, tau)
    cos = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (W / np.linalg.norm(W, axis=1, keepdims=True)).T
    assert np.array_equal(p.argmax(1), cos.argmax(1))
    assert np.abs(p.sum(1) - 1).max() < 1e-12


def test_zero_shot_rejects_zero_vectors():
    with pytest.raises(NormalizationError):
        zero_shot_classify(np.zeros(4), np.ones((2, 4)), 0.01)


# freezing and checkpoints


def test_frozen_backbone_is_read_only(random_backbone):
    with pytest.raises(ValueError):
        random_backbone.vision.proj.weight.data[0, 0] = 1.0
    with pytest.raises(ContractError):
        random_backbone.set_trainable(True)


def test_checkpoint_roundtrip(tmp_path, random_backbone):
    path = tmp_path / "b.mmrl"
    save_backbone(random_backbone, path, {"note": "x"})
    model, header = load_backbone(path)
    assert model.fingerprint() == random_backbone.fingerprint() == header["content_sha256"]
    assert model.frozen and model.dims == random_backbone.dims


def test_checkpoint_detects_tampering(tmp_path, random_backbone):
    path = tmp_path / "b.mmrl"
    save_backbone(random_backbone, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_backbone(path)


# surrogate pretraining


def test_info_nce_matches_direct_formula(rng):
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    z = an @ bn.T / 0.07
    ls_r = z - np.log(np.exp(z).sum(1, keepdims=True))
    ls_c = z - np.log(np.exp(z).sum(0, keepdims=True))
    expected = -0.5 * (np.trace(ls_r) + np.trace(ls_c)) / 4
    assert abs(float(info_nce(Tensor(a), Tensor(b), 0.07).data) - expected) < 1e-12


def test_pretraining_loss_decreases(corpus):
    """Per-step values are minibatch noisy; means over successive 10-step windows fall."""
    trace = []
    pretrain_surrogate(corpus, steps=50, seed=0, loss_trace=trace)
    windows = np.array(trace).reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows
    assert all(np.isfinite(trace))


def _zero_shot_accuracy(corpus, model):
    test = corpus.split_indices("test")
    W = encode_classifiers([int(t) for t in corpus.token_ids], DEFAULT_TEMPLATE, model)
    with no_grad():
        p = zero_shot_classify(image_features(corpus.images[test], model), W, model.temperature)
    return float((p.argmax(1) == corpus.labels[test]).mean()), test.size


def test_pretraining_beats_chance(corpus, backbone, split):
    acc, _ = _zero_shot_accuracy(corpus, backbone)
    assert acc > 1 / corpus.num_classes + 0.5
    assert backbone.frozen and backbone.pretrain_steps > 0


def test_unpretrained_backbone_is_near_chance(corpus, random_backbone):
    acc, n = _zero_shot_accuracy(corpus, random_backbone)
    chance = 1 / corpus.num_classes
    assert abs(acc - chance) <= 3 * math.sqrt(chance * (1 - chance) / n)


def test_pretraining_needs_data(corpus):
    no_pretrain = dataclasses.replace(corpus, splits=np.full_like(corpus.splits, 2))
    with pytest.raises(DataError):
        pretrain_surrogate(no_pretrain, steps=1)
