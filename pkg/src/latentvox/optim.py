"""Adam optimizer over NetworkModel parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteGradientError
from .net import TRAINABLE_KEYS


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on param/m/v. t is the 1-based step index."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


class Adam:
    """Adam over the unfrozen trainable tensors of one or more models.

    Moment buffers are keyed by (model_tag, layer_index, param_name); frozen
    layers are never registered so their parameters cannot drift. A non-finite
    gradient aborts the step before any tensor is touched.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._slots = {}  # key -> (param, m, v)

    def register_model(self, model, tag="model"):
        for i, spec in enumerate(model.layers):
            if model.frozen[i] or spec.kind not in TRAINABLE_KEYS:
                continue
            for name in TRAINABLE_KEYS[spec.kind]:
                if name in model.params[i]:
                    self.register((tag, i, name), model.params[i][name])

    def register(self, key, param):
        self._slots[key] = (param, np.zeros_like(param), np.zeros_like(param))

    def model_grads(self, model, grads, tag="model"):
        """Flatten a backward() grads list into this optimizer's key space."""
        out = {}
        for i, g in enumerate(grads):
            if g is None:
                continue
            for name, arr in g.items():
                out[(tag, i, name)] = arr
        return out

    def step(self, grads: dict):
        """Apply one update from {key: grad}. Keys must be registered."""
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(str(key))
        self.t += 1
        for key, g in grads.items():
            param, m, v = self._slots[key]
            adam_step(param, g, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)
