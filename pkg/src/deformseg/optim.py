"""AdamW with decoupled weight decay, plus the cosine epoch schedule."""

from __future__ import annotations

import numpy as np

from .errors import NumericalError


def cosine_lr(epoch, total_epochs, base_lr):
    """0.5 * base * (1 + cos(pi * epoch / total)); no warm-up, floor at 0."""
    if total_epochs == 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs))


class AdamW:
    """Decoupled weight decay first (p -= lr*wd*p), then the bias-corrected
    Adam update.  Per-group learning rate = schedule lr x group multiplier."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        # groups: iterable of (params, lr_multiplier)
        self.groups = [(list(params), float(mult)) for params, mult in groups]
        seen = set()
        for params, _ in self.groups:
            for p in params:
                if id(p) in seen:
                    raise ValueError("parameter appears in more than one group")
                seen.add(id(p))
                if not p.requires_grad:
                    raise ValueError("frozen parameter passed to the optimizer")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {id(p): (np.zeros_like(p.data), np.zeros_like(p.data))
                      for params, _ in self.groups for p in params}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for params, mult in self.groups:
            glr = lr * mult
            for p in params:
                g = p.grad
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite gradient encountered in AdamW step")
                m, v = self.state[id(p)]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                if self.weight_decay:
                    p.data *= 1.0 - glr * self.weight_decay
                p.data -= glr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.grad = None
