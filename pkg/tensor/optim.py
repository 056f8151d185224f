import logging
from typing import List, Optional

import numpy as np

from exceptions import ConfigurationError
from tensor.core import Tensor

logger = logging.getLogger(__name__)


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(
        self,
        params: List[Tensor],
        lr: float,
        momentum: float = 0.9,
        clip_norm: Optional[float] = None,
    ):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None)
        return float(np.sqrt(total))

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += scale * p.grad
            p.values = (p.values - self.lr * v).astype(p.values.dtype)
        return norm
