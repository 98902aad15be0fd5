"""AdamW with decoupled weight decay and per-name learning rates."""
from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import ConfigError

__all__ = ["AdamW"]


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters.

    The decay step multiplies each parameter by (1 - lr * wd) before the
    bias-corrected Adam update, so decay strength follows the learning rate
    but never flows through the moments.  If any gradient in the store is
    non-finite the whole step is skipped and counted.
    """

    def __init__(self, store: ParamStore, lr_for, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.store = store
        if callable(lr_for):
            self.base_lr = {name: float(lr_for(name)) for name in store.names()}
        else:
            self.base_lr = {name: float(lr_for) for name in store.names()}
        for name, lr in self.base_lr.items():
            if lr < 0:
                raise ConfigError(f"negative learning rate for {name!r}")
        self.weight_decay = float(weight_decay)
        self.beta1 = float(b1)
        self.beta2 = float(b2)
        self.eps = float(eps)
        self.lr_scale = 1.0
        self.t = 0
        self.skipped_steps = 0
        self._m = {}
        self._v = {}

    def step(self) -> bool:
        """Apply one update; returns False (and counts) on non-finite grads."""
        grads = {}
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                self.skipped_steps += 1
                return False
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = grads[name]
            lr = self.base_lr[name] * self.lr_scale
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * update
        return True
