"""Tiny parameter-container base class.

Parameters and submodules are discovered from instance attributes in
insertion order, which fixes a deterministic, documented naming scheme
for checkpoints ("fusion.2.attn.w1", ...).  Frozen tensors (requires_grad
False) are still part of the named archive; they are simply excluded from
the trainable set.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self):
        return [t for _, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def conv_weight(rng, cout, cin, k, trainable=True):
    """He-normal fan-in initialization for a (cout, cin, k, k) kernel."""
    fan_in = cin * k * k
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    return Tensor(data, requires_grad=trainable)


def linear_weight(rng, fan_in, fan_out, trainable=True):
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return Tensor(data, requires_grad=trainable)


def zeros(*shape, trainable=True):
    return Tensor(np.zeros(shape), requires_grad=trainable)


def ones(*shape, trainable=True):
    return Tensor(np.ones(shape), requires_grad=trainable)
