"""Adam optimizer with optional per-row lazy updates for embedding tables.

Dense parameters get the standard bias-corrected update. Embedding tables are
updated row-wise: only the rows actually looked up in the batch move, and
their moment slots are the only state touched, so untouched rows stay
bit-identical across steps. The step counter is global (incremented once per
``step`` call) and is used for bias correction in both paths.
"""

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


class AdamState:
    """First/second moment accumulators for one parameter, zero-initialized."""

    __slots__ = ("m", "v")

    def __init__(self, param_data):
        self.m = np.zeros_like(param_data)
        self.v = np.zeros_like(param_data)


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._state = {p: AdamState(p.data) for p in self.params}

    def state_for(self, param):
        return self._state[param]

    def step(self, grads, rows=None, skip=()):
        """Apply one update.

        ``grads`` maps parameters to gradient arrays (a ``Gradients`` object or
        a dict-like with ``get``). ``rows`` maps embedding-table parameters to
        the sorted unique row indices touched this batch; those parameters are
        updated only on the listed rows. Parameters in ``skip`` are left
        untouched entirely, moments included.
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        skip = set(skip) if skip else ()
        for p in self.params:
            if skip and p in skip:
                continue
            if rows is not None and p in rows:
                r = rows[p]
                if len(r) == 0:
                    continue
                g = grads.get(p)
                self._check(p, g)
                st = self._state[p]
                gr = g[r]
                st.m[r] = self.beta1 * st.m[r] + (1.0 - self.beta1) * gr
                st.v[r] = self.beta2 * st.v[r] + (1.0 - self.beta2) * gr * gr
                m_hat = st.m[r] / bc1
                v_hat = st.v[r] / bc2
                p.data[r] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                g = grads.get(p)
                self._check(p, g)
                st = self._state[p]
                st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
                st.v = self.beta2 * st.v + (1.0 - self.beta2) * g * g
                m_hat = st.m / bc1
                v_hat = st.v / bc2
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    @staticmethod
    def _check(p, g):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")


def adam_step(params, grads, optimizer):
    """Functional wrapper: one dense update of ``params`` through ``optimizer``."""
    optimizer.step(grads)
    return [p.data for p in params]


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    """Xavier/Glorot uniform initialization for a weight matrix."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


def new_param(rng, fan_in, fan_out, shape=None):
    return Tensor(xavier_uniform(rng, fan_in, fan_out, shape), requires_grad=True)
