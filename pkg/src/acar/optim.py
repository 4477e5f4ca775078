"""SGD with linear warm-up, step decay, Nesterov momentum and weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    base_lr: float = 0.1
    warmup_steps: int = 0
    decay_steps: list[int] = field(default_factory=list)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-7
    nesterov: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError("decay_steps must be strictly increasing")


class Parameter:
    """A named trainable tensor with its momentum buffer."""

    __slots__ = ("tensor", "momentum_buffer", "name")

    def __init__(self, data, name: str):
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.momentum_buffer = np.zeros_like(self.tensor.data)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape})"


def learning_rate(cfg: OptimizerConfig, step: int) -> float:
    """lr = base * min(step/warmup, 1) * decay_factor^(decay steps passed)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = 1.0 if cfg.warmup_steps <= 0 else min(step / cfg.warmup_steps, 1.0)
    passed = sum(1 for d in cfg.decay_steps if step >= d)
    return cfg.base_lr * warm * cfg.decay_factor ** passed


def sgd_step(params: list[Parameter], grads: list[np.ndarray],
             cfg: OptimizerConfig, step: int) -> None:
    """One in-place update; `grads` aligned element-wise with `params`."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    lr = learning_rate(cfg, step)
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {p.name}")
        g = g + cfg.weight_decay * p.data
        buf = p.momentum_buffer
        buf *= cfg.momentum
        buf += g
        update = g + cfg.momentum * buf if cfg.nesterov else buf
        p.tensor.data -= lr * update
