import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmrl.core import encode_images, init_representation_state
from mmrl.data import class_token_ids
from mmrl.errors import ConfigError, ContractError, NormalizationError
from mmrl.objectives import LossWeights, ce_loss, cos_reg_image, cos_reg_text, mmrl_loss, regularizer
from mmrl.tensor import Tensor
from mmrl.training import MMRLObjective

vec = st.lists(st.floats(-5, 5), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3)


def val(t):
    return float(t.data)


def test_ce_examples():
    W = Tensor(np.eye(3))
    assert abs(val(ce_loss(Tensor(np.ones(3)), [1], W, 0.5)) - math.log(3)) < 1e-12
    W2 = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(val(ce_loss(Tensor([1.0, 0.0]), [0], W2, 1.0)) - (-math.log(math.e / (math.e + 1)))) < 1e-12
    assert abs(val(ce_loss(Tensor([1.0, 0.0]), [0], W2, 1.0)) - 0.3133) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_ce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert val(ce_loss(Tensor(rng.normal(size=(3, 5))), rng.integers(0, 4, 3), Tensor(rng.normal(size=(4, 5))), 0.05)) >= 0


def test_ce_label_range():
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.ones(2)), [2], Tensor(np.eye(2)), 1.0)


def test_cos_reg_image_examples():
    f = Tensor([[1.0, 2.0, 0.0]])
    assert val(cos_reg_image(f, f)) == pytest.approx(0.0, abs=1e-15)
    assert val(cos_reg_image(Tensor([[1.0, 0.0]]), Tensor([[0.0, 3.0]]))) == pytest.approx(1.0, abs=1e-15)
    assert val(cos_reg_image(f, Tensor(-f.data))) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(NormalizationError):
        cos_reg_image(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_cos_reg_text_examples():
    W0 = Tensor(np.eye(4))
    assert val(cos_reg_text(W0, W0)) == 0.0
    half = np.eye(4)
    half[2:] = np.roll(np.eye(4)[2:], 1, axis=1)
    assert val(cos_reg_text(Tensor(half), W0)) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ContractError):
        cos_reg_text(Tensor(np.eye(3)), W0)


@given(vec, vec, st.floats(0.01, 100))
def test_cosine_scale_invariance(a, b, c):
    A, B = Tensor([a, b]), Tensor([b, a])
    scaled = Tensor(np.array([a, np.array(b) * c]))
    assert abs(val(cos_reg_text(A, B)) - val(cos_reg_text(scaled, B))) < 1e-12


def test_scaling_f_c_keeps_reg_and_argmax(rng):
    f, f0, W = rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    assert abs(val(cos_reg_image(Tensor(2 * f), Tensor(f0))) - val(cos_reg_image(Tensor(f), Tensor(f0)))) < 1e-14
    assert np.array_equal((f @ W.T).argmax(1), ((2 * f) @ W.T).argmax(1))


def test_alternative_regularizers():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[0.0, 4.0]])
    assert val(regularizer("l1", a, b)) == 1.5
    assert val(regularizer("mse", a, b)) == 2.5
    assert val(regularizer("cosine", a, a)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ConfigError):
        regularizer("huber", a, b)


def test_mmrl_loss_arithmetic():
    assert mmrl_loss(1.0, 2.0, 0.1, 0.2, LossWeights(0.7, 0.5)) == pytest.approx(1.45, abs=1e-15)
    assert mmrl_loss(1.0, 2.0, 0.1, 0.2, LossWeights(0.7, 0.0)) == pytest.approx(0.7 + 0.6, abs=1e-15)
    assert mmrl_loss(1.0, 2.0, 0.0, 0.0, LossWeights(1.0, 0.5)) == 1.0


@pytest.mark.parametrize("alpha,lam", [(-0.1, 0.5), (1.1, 0.5), (0.5, -1.0)])
def test_weight_validation(alpha, lam):
    with pytest.raises(ConfigError):
        LossWeights(alpha, lam)


def test_regularizers_small_positive_at_init(corpus, backbone, split):
    state = init_representation_state(5, 32, 4, backbone, seed=0)
    obj = MMRLObjective(backbone, state, class_token_ids(corpus, split.base))
    idx = corpus.split_indices("fewshot_pool", split.base)[:16]
    prefix, f_0 = obj.image_inputs(corpus.images[idx])
    terms = obj.terms(prefix, np.zeros(16, dtype=int), f_0)
    for reg in (val(terms.cos_v), val(terms.cos_t)):
        assert 0 < reg < 0.1


def test_regularizers_vanish_without_tokens(corpus, backbone, split):
    state = init_representation_state(0, 32, 4, backbone, seed=0)
    obj = MMRLObjective(backbone, state, class_token_ids(corpus, split.base))
    prefix, f_0 = obj.image_inputs(corpus.images[:8])
    f_c, _ = encode_images(None, backbone, state, prefix=prefix, need_repr=False)
    assert val(regularizer("cosine", f_c, f_0)) == 0.0
    assert val(regularizer("cosine", obj.classifiers(), obj.W_0)) == 0.0


@given(st.integers(0, 2**31 - 1), st.integers(1, 130), st.floats(1e-3, 1e3))
def test_identical_rows_give_exact_zero(seed, n, scale):
    x = Tensor(np.random.default_rng(seed).normal(size=(n, 32)) * scale)
    assert val(cos_reg_image(x, x)) == 0.0
    assert val(cos_reg_text(x, x)) == 0.0
