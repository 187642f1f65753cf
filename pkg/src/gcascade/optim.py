"""AdamW with decoupled weight decay and optional global gradient clipping."""

from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.5  # 0 disables clipping

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("weight_decay and clip_norm must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


def clip_grad_norm(params, max_norm):
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Decoupled weight decay: p -= lr*wd*p before the Adam step, so decay
    never passes through the moment estimates."""

    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = (config or OptimConfig()).validate()
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        cfg = self.config
        if cfg.clip_norm > 0:
            clip_grad_norm(self.params, cfg.clip_norm)
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            new = p.data * (1.0 - cfg.lr * cfg.weight_decay)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = new - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
