"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update. Parameter arrays are replaced, moments updated in place.

    A missing gradient is treated as zero.
    """
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != param shape {p.shape} (param {i})")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} (param {i})")
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * g * g
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.data = (p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))).astype(p.dtype, copy=False)
    return state


@dataclass
class Adam:
    """Stateful wrapper pairing a parameter list with its moments."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self) -> None:
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)
