"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_moments(self, params: Sequence[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    opt: OptimizerState,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """One AdamW update, in place on ``params``.

    Weight decay ``p <- p * (1 - lr * wd)`` is applied before the adaptive
    step, and only where ``decay_mask`` is true (all parameters by default).
    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not opt.m:
        opt.init_moments(params)
    if len(opt.m) != len(params):
        raise ContractError("optimizer moments are not aligned with the parameter list")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    b1, b2 = opt.betas
    opt.step += 1
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for p, g, m, v, decay in zip(params, grads, opt.m, opt.v, decay_mask):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if decay and opt.weight_decay:
            p.data *= 1.0 - opt.lr * opt.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
