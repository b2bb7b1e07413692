from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.  Returns new arrays; ``state`` is advanced in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: moment shape {m.shape} does not match parameter {name} {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


def apply_adam(tensors: Mapping[str, Tensor], state: AdamState) -> None:
    """Adam update of every tensor from its ``.grad`` (missing grads count as zero)."""
    params = {k: t.data for k, t in tensors.items()}
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in tensors.items()}
    new, _ = adam_step(params, grads, state)
    for k, t in tensors.items():
        t.data = new[k]


def clip_grad_norm(tensors: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all ``.grad`` arrays so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors.values()
                              if t.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for t in tensors.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


def finite_diff_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn(x))
        flat[i] = orig - eps
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return out
