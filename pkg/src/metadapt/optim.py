"""AdamW with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .tensor import Tensor, active_tape


@dataclass(frozen=True)
class OptimizerSettings:
    """Hyperparameters only; the mutable moment state lives in AdamW.

    betas/epsilon are the common defaults (0.9, 0.999, 1e-8); they are a
    config choice here, not a literature value. clip_norm is off by default.
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None


@dataclass
class OptimizerState:
    """First/second moment buffers plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a named parameter dict.

    step() consumes populated grads, zeroes them, and clears the active tape,
    returning the engine to an empty-tape state between steps.
    """

    def __init__(self, params: dict[str, Tensor], settings: OptimizerSettings):
        self.params = params
        self.settings = settings
        self.state = OptimizerState()
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        s = self.settings
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                raise StateError(f"optimizer_step: parameter '{name}' has no gradient")
        if s.clip_norm is not None:
            total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()))
            if total > s.clip_norm:
                factor = s.clip_norm / (total + 1e-12)
                for p in self.params.values():
                    p.grad *= factor
        self.state.step_count += 1
        t = self.state.step_count
        b1, b2 = s.betas
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if s.weight_decay != 0.0:
                p.data *= 1.0 - s.lr * s.weight_decay
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)
            p.grad.fill(0.0)
        active_tape().clear()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
