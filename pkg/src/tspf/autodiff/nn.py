"""Feed-forward layers stored as plain weight/bias tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tspf.autodiff import tensor as td
from tspf.autodiff.tensor import Tensor
from tspf.errors import ContractError, ShapeError

ACTIVATIONS = {
    "relu": td.relu,
    "tanh": td.tanh,
    "sigmoid": td.sigmoid,
    "identity": lambda a: a,
}


@dataclass
class MlpParams:
    """Weights are stored ``out_dim x in_dim`` so a layer computes ``x @ W.T + b``.

    The activation is applied after every layer except the last, which stays affine.
    """

    layers: list[tuple[Tensor, Tensor]]
    activation: str = "relu"
    frozen: bool = False
    name: str = ""
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ContractError("an MLP needs at least one layer")
        for idx, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(
                    f"{self.name or 'mlp'} layer {idx}: weight {w.shape} and bias {b.shape} disagree"
                )
            if idx and w.shape[1] != self.layers[idx - 1][0].shape[0]:
                raise ShapeError(
                    f"{self.name or 'mlp'} layer {idx}: input dim {w.shape[1]} != "
                    f"previous output dim {self.layers[idx - 1][0].shape[0]}"
                )
        self.set_frozen(self.frozen)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        """Output width of every layer, in order."""
        return [w.shape[0] for w, _ in self.layers]

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def set_frozen(self, frozen: bool = True) -> None:
        # Frozen tensors never enter a graph, so no gradient edge reaches them.
        self.frozen = frozen
        for t in self.tensors():
            t.requires_grad = not frozen
            if frozen:
                t.grad = None

    def copy(self, frozen: bool | None = None) -> MlpParams:
        return MlpParams(
            [(Tensor(w.data.copy()), Tensor(b.data.copy())) for w, b in self.layers],
            activation=self.activation,
            frozen=self.frozen if frozen is None else frozen,
            name=self.name,
        )

    def constant(self) -> MlpParams:
        """View sharing the same arrays but excluded from any graph."""
        return MlpParams(
            [(Tensor(w.data), Tensor(b.data)) for w, b in self.layers],
            activation=self.activation,
            frozen=True,
            name=self.name,
        )

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        for t, arr in zip(self.tensors(), arrays, strict=True):
            if t.shape != np.shape(arr):
                raise ShapeError(f"cannot load array of shape {np.shape(arr)} into {t.shape}")
            t.data = np.array(arr, dtype=np.float64)


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return Tensor(w), Tensor(np.zeros(fan_out))


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    name: str = "",
) -> MlpParams:
    """Build an MLP with layer sizes ``[in, hidden..., out]``."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ContractError(f"{name or 'mlp'}: invalid layer sizes {list(sizes)}")
    layers = [glorot_layer(rng, sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]
    return MlpParams(layers, activation=activation, name=name)


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = td.as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"{params.name or 'mlp'} expects a (batch, features) matrix, got {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ShapeError(
            f"{params.name or 'mlp'}: input has {x.shape[1]} columns but first layer expects {params.in_dim}"
        )
    act = ACTIVATIONS[params.activation]
    last = len(params.layers) - 1
    h = x
    for idx, (w, b) in enumerate(params.layers):
        h = td.matmul(h, td.transpose(w)) + b
        if idx < last:
            h = act(h)
    return h
