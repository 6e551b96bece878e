import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmrl.errors import ContractError
from mmrl.optim import OptimizerState, adamw_step
from mmrl.tensor import Tensor


def test_decay_only_path():
    p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    adamw_step([p], [np.zeros(2)], OptimizerState(lr=1e-3, weight_decay=0.1))
    np.testing.assert_array_equal(p.data, np.array([2.0, -3.0]) * (1 - 1e-3 * 0.1))


def test_first_step_moves_by_lr():
    p = Tensor(np.array(1.0), requires_grad=True)
    opt = OptimizerState(lr=1e-3, weight_decay=0.0)
    adamw_step([p], [np.array(1.0)], opt)
    # m_hat = v_hat = g, so the step is lr * g / (|g| + eps)
    assert abs((1.0 - float(p.data)) - 1e-3 / (1 + 1e-8)) < 1e-15
    assert opt.step == 1


def test_decay_mask_and_none_grad():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    adamw_step([a, b], [None, None], OptimizerState(weight_decay=0.5), decay_mask=[True, False])
    assert np.all(a.data < 1) and np.all(b.data == 1)


def test_alignment_errors():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        adamw_step([p], [], OptimizerState())
    with pytest.raises(ContractError):
        adamw_step([p], [np.ones(3)], OptimizerState())


@given(st.integers(0, 2**31 - 1))
def test_identical_runs_identical_trajectories(seed):
    def run():
        rng = np.random.default_rng(seed)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        opt = OptimizerState()
        for _ in range(5):
            adamw_step([p], [rng.normal(size=4)], opt)
        return p.data.tobytes()

    assert run() == run()


def test_matches_reference_adamw():
    """Independent closed-form recurrence over a few steps."""
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(4, 3))
    p = Tensor(rng.normal(size=3), requires_grad=True)
    theta = p.data.copy()
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.01
    m = v = np.zeros(3)
    opt = OptimizerState(lr=lr, weight_decay=wd)
    for t, g in enumerate(grads, 1):
        adamw_step([p], [g], opt)
        theta = theta * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.data, theta, rtol=0, atol=1e-15)
