"""Adam with bias correction over plain numpy buffers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from crossembed.errors import ConfigError, ContractError
from crossembed.autodiff.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Apply one in-place Adam update to ``params`` and advance ``state``.

    Moment buffers are created lazily on the first call.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter set")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _update(p, g, m, v, state.step, state.lr, state.beta1, state.beta2, state.epsilon)


def _update(p, g, m, v, t, lr, b1, b2, eps) -> None:
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    step = lr * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + eps)
    p -= step.astype(p.dtype)


class Adam:
    """Optimizer over a named parameter dict.

    Parameters whose name is in ``frozen`` are skipped entirely; their moments
    are not touched either.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.names = sorted(params)
        self.params = params
        self.state = AdamState(lr=lr or 1.0, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.lr = lr

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        if not value >= 0:
            raise ConfigError(f"lr must be >= 0, got {value}")
        self.state.lr = value

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, frozen: frozenset = frozenset()) -> None:
        """Update every non-frozen parameter that has a gradient.

        A learning rate of exactly 0 leaves parameters and moments untouched.
        """
        if self.state.lr == 0:
            return
        if not self.state.m:
            self.state.m = [np.zeros_like(self.params[n].data) for n in self.names]
            self.state.v = [np.zeros_like(self.params[n].data) for n in self.names]
        self.state.step += 1
        s = self.state
        for name, m, v in zip(self.names, s.m, s.v):
            t = self.params[name]
            if name in frozen or t.grad is None:
                continue
            _update(t.data, t.grad, m, v, s.step, s.lr, s.beta1, s.beta2, s.epsilon)
