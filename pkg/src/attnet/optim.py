"""Adam optimizer operating on :class:`~attnet.tensor.Parameter` objects."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ContractError


class Adam:
    """Bias-corrected Adam.

    Moment buffers and the step counter live on each parameter, so an
    optimizer can be rebuilt over the same parameters without losing state.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient; run backward() first")
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(param, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one in-place Adam update to ``param`` using ``param.grad``."""
    g = param.grad
    if g is None:
        raise ContractError(f"parameter {param.name!r} has no gradient; run backward() first")
    param.step_count += 1
    t = param.step_count
    param.adam_m = beta1 * param.adam_m + (1 - beta1) * g
    param.adam_v = beta2 * param.adam_v + (1 - beta2) * (g * g)
    m_hat = param.adam_m / (1 - beta1**t)
    v_hat = param.adam_v / (1 - beta2**t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param.data = (param.data - update).astype(param.data.dtype, copy=False)
