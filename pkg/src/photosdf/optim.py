"""Adam over a flat parameter vector with per-coordinate learning rates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def cosine_lr(base: float, it: int, total: int, min_ratio: float = 0.05) -> float:
    if total <= 0:
        return base
    frac = min(max(it / total, 0.0), 1.0)
    return base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class Adam:
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = torch.zeros(self.size, dtype=torch.float64)
        self.v = torch.zeros(self.size, dtype=torch.float64)
        self.t = 0

    def step(self, params: torch.Tensor, grad: torch.Tensor, lr: torch.Tensor | float) -> torch.Tensor:
        """Return updated params; ``lr`` is a scalar or a per-coordinate vector."""
        self.t += 1
        self.m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
        self.v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - lr * m_hat / (torch.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.clone(), "v": self.v.clone(), "t": self.t}
