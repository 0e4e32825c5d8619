"""Adam optimizer over named parameter tensors."""

import numpy as np

from .errors import NumericsError


class Adam:
    """Bias-corrected Adam. Parameters with requires_grad=False are
    never touched: no update, no moment accumulation, bit-identical
    across steps. A non-finite gradient aborts the whole step before
    any parameter moves.
    """

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {}
        self._v = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        live = [p for p in self.params if p.requires_grad and p.grad is not None]
        for p in live:
            if not np.isfinite(p.grad).all():
                name = p.name or "<unnamed>"
                raise NumericsError(f"non-finite gradient in parameter {name}")

        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in live:
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(p.grad)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
