"""SGD with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class SgdMomentumState:
    learning_rate: float = 0.03
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: dict[str, Tensor], state: SgdMomentumState, grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place update ``v <- momentum*v - lr*grad; p <- p + v``.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are left alone.  All gradients are validated before any
    parameter moves, so a divergent step leaves the model untouched.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"sgd_step: non-finite gradient for {name}")
    lr = state.learning_rate
    mom = state.momentum
    for name, g in grads.items():
        p = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mom * v - lr * g
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = p.data + state.velocity[name]


class SGD:
    """Optimizer object over a fixed, named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.03, momentum: float = 0.9):
        self.params = dict(params)
        self.state = SgdMomentumState(lr, momentum)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.state)
