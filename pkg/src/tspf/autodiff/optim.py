"""Adam with per-bundle freezing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tspf.autodiff.nn import MlpParams
from tspf.errors import ContractError


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    second_moment: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


class Adam:
    """Adaptive moment estimation over a fixed list of parameter bundles.

    Frozen bundles are skipped entirely. Gradients are consumed (reset to
    ``None``) by every step, so a stale gradient can never be applied twice.
    """

    def __init__(self, bundles: list[MlpParams], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.bundles = list(bundles)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for bundle in self.bundles:
            bundle.zero_grad()

    def step(self) -> None:
        optimizer_step(self.bundles, self.state)


def optimizer_step(bundles: list[MlpParams], state: OptimState) -> None:
    """Apply one Adam update in place to every unfrozen tensor of ``bundles``."""
    live = [(bi, ti, t) for bi, b in enumerate(bundles) if not b.frozen for ti, t in enumerate(b.tensors())]
    for bi, ti, t in live:
        if t.grad is None:
            raise ContractError(f"no gradient for tensor {ti} of bundle {bundles[bi].name or bi}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for bi, ti, t in live:
        key = (bi, ti)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        g = t.grad
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[key] = m
        state.second_moment[key] = v
        t.data = t.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.grad = None
