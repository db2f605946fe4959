"""Adam with decoupled weight decay and a cosine learning-rate schedule."""
import math

import numpy as np

from .exceptions import ConfigError, NumericError


def cosine_lr(step, total_steps, lr0, eta_min=0.0):
    """eta_min + (lr0 - eta_min) * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Bias-corrected Adam over a name -> array parameter mapping.

    Weight decay is decoupled: ``theta <- theta - lr * wd * theta`` is applied
    before the Adam update.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            delta = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p -= (lr * self.weight_decay * p).astype(p.dtype)
            p -= delta.astype(p.dtype)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}
