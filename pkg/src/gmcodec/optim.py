"""Adam optimizer operating on a ParamStore."""

import numpy as np

from .errors import UsageError


class AdamState:
    """Per-parameter first/second moment estimates plus step count.

    Moments are keyed by parameter name and created lazily as zeros the
    first time a parameter is seen.
    """

    def __init__(self, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, state, grads=None):
    """One Adam update with bias correction over every parameter in `params`.

    `grads` maps name -> array; when None, each tensor's accumulated .grad
    is used. Gradients are cleared after the update.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name] if grads is not None else tensor.grad
        if g is None:
            raise UsageError(f"adam_step: no gradient for parameter '{name}'")
        g = np.asarray(g, dtype=tensor.data.dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        tensor.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        tensor.grad = None
