"""Named parameters, gradients, optimizer state."""

import numpy as np

from .tensor import Tensor


class ParamStore:
    """All trainable tensors of a model plus non-trainable buffers
    (batch-norm running statistics) and Adam moment accumulators.

    Parameter names are unique; gradients live on the parameter tensors
    and always match their shape.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.buffers = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def parameter(self, name, array):
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def buffer(self, name, array):
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.ascontiguousarray(array, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def zero_grad(self):
        for t in self.params.values():
            t.grad[...] = 0

    def n_parameters(self):
        return sum(t.data.size for t in self.params.values())

    def names(self):
        return sorted(self.params)


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place, over every parameter."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
