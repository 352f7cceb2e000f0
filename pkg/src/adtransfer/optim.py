from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam with bias correction. Parameters without a gradient are skipped."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.values) for p in self.params],
                               v=[np.zeros_like(p.values) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.values -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
