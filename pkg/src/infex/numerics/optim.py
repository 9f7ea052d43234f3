from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError


class Adam:
    """Bias-corrected Adam over a list of named :class:`Param` objects.

    ``grad_scale`` multiplies every gradient before the moment update.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, grad_scale=1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_scale = grad_scale
        self.t = 0
        self.m = [np.zeros_like(p.value) for _, p in self.params]
        self.v = [np.zeros_like(p.value) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise NonFiniteError(
                    f"non-finite gradient in '{name}' ({bad} of {p.grad.size} entries) at step {self.t + 1}"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad * self.grad_scale if self.grad_scale != 1.0 else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class OptimConfig:
    """Mini-batch Adam settings shared by the training loops."""

    lr: float = 1e-3
    batch_size: int = 100
    grad_scale: float = 1e-2
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def make(self, params):
        return Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    grad_scale=self.grad_scale)
