"""Parameter containers and forward passes for the MLP and GRU blocks."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import ShapeError, Tensor, matmul, relu, sigmoid, tanh


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class _ParamGroup:
    def named_tensors(self, prefix: str = "") -> dict:
        return {f"{prefix}{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class MlpParams(_ParamGroup):
    """Two ReLU hidden layers and a linear output layer; weights are (in, out)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, d_out: int) -> "MlpParams":
        return cls(
            uniform_init(rng, d_in, (d_in, d_hidden)),
            uniform_init(rng, d_in, (d_hidden,)),
            uniform_init(rng, d_hidden, (d_hidden, d_hidden)),
            uniform_init(rng, d_hidden, (d_hidden,)),
            uniform_init(rng, d_hidden, (d_hidden, d_out)),
            uniform_init(rng, d_hidden, (d_out,)),
        )

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, d_out: int) -> "MlpParams":
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(z(d_in, d_hidden), z(d_hidden), z(d_hidden, d_hidden), z(d_hidden),
                   z(d_hidden, d_out), z(d_out))

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w3.shape[1]


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"mlp: input {x.shape} does not match first layer {params.w1.shape}")
    h = relu(matmul(x, params.w1) + params.b1)
    h = relu(matmul(h, params.w2) + params.b2)
    return matmul(h, params.w3) + params.b3


@dataclass
class GruParams(_ParamGroup):
    """w_* act on the message input, u_* on the previous state."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, rng, d_in: int, hidden: int) -> "GruParams":
        parts = []
        for _ in range(3):
            parts += [
                uniform_init(rng, hidden, (d_in, hidden)),
                uniform_init(rng, hidden, (hidden, hidden)),
                uniform_init(rng, hidden, (hidden,)),
            ]
        return cls(*parts)

    @property
    def hidden(self) -> int:
        return self.u_z.shape[0]


def gru_cell(params: GruParams, h: Tensor, m: Tensor) -> Tensor:
    """h' = z*h + (1-z)*candidate, candidate = tanh(W_h m + U_h (r*h) + b_h)."""
    H = params.hidden
    if h.ndim != 2 or h.shape[1] != H or m.ndim != 2 or m.shape[0] != h.shape[0] \
            or m.shape[1] != params.w_z.shape[0]:
        raise ShapeError(f"gru: state {h.shape} / input {m.shape} incompatible with hidden size {H}")
    z = sigmoid(matmul(m, params.w_z) + matmul(h, params.u_z) + params.b_z)
    r = sigmoid(matmul(m, params.w_r) + matmul(h, params.u_r) + params.b_r)
    cand = tanh(matmul(m, params.w_h) + matmul(r * h, params.u_h) + params.b_h)
    return z * h + (1.0 - z) * cand
