"""Dense float64 tensors with taped reverse-mode differentiation.

Every value in the package flows through :class:`Tensor`. Operations executed
inside a ``with Tape() as tape:`` block are recorded; ``backward(tape, loss)``
replays the record in reverse and returns per-leaf gradients. Outside a tape
the same operations run as plain numpy, which is what the finite-difference
checker and fast prediction paths rely on.
"""

import numpy as np

from ..errors import ContractError, ShapeError

SIGMOID_CLAMP = 30.0
COSINE_EPS = 1e-12


class Tensor:
    """A float64 array, optionally registered as a leaf on the active tape.

    ``requires_grad`` marks trainable parameters; intermediate results get a
    ``node_id`` when they are produced under an active tape. Data arrays are
    never mutated by operations (the optimizer updates parameters in place
    between steps, when no tape is alive).
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flags})"

    # Arithmetic sugar; all delegate to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_TAPE_STACK = []


class Tape:
    """Ordered record of operations for one forward pass.

    Each entry holds the output node id, the input node ids, and the backward
    rule. Entries are appended in execution order, so a reverse sweep is a
    valid topological traversal that touches every node exactly once.
    """

    def __init__(self):
        self._entries = []  # (out_id, [in_id | None], [grad_fn | None])
        self._leaves = {}  # node_id -> Tensor
        self._next_id = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def watch(self, t):
        """Register a leaf tensor; returns its node id on this tape."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t._tape = self
        self._leaves[nid] = t
        return nid

    def _id_for(self, t):
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            return self.watch(t)
        return None

    def _register_output(self, t):
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t._tape = self
        return nid


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data, inputs, grad_fns):
    """Wrap an op result, recording it on the active tape when any input is tracked."""
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    ids = [tape._id_for(t) for t in inputs]
    if all(i is None for i in ids):
        return Tensor(out_data)
    out = Tensor(out_data)
    out_id = tape._register_output(out)
    tape._entries.append((out_id, ids, grad_fns))
    return out


class Gradients:
    """Per-leaf gradients produced by :func:`backward`.

    ``get`` returns an exact-zero array for any parameter that was not reached
    from the loss (including parameters never used in the forward pass).
    """

    def __init__(self, mapping):
        self._by_tensor = mapping

    def get(self, param):
        g = self._by_tensor.get(param)
        if g is None:
            return np.zeros_like(param.data)
        return g

    def __contains__(self, param):
        return param in self._by_tensor

    def items(self):
        return self._by_tensor.items()


def backward(tape, loss):
    """Reverse-accumulate d(loss)/d(leaf) for every leaf watched on the tape."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.data.shape if isinstance(loss, Tensor) else type(loss)
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if loss._tape is not None and loss._tape is not tape:
        raise ContractError("loss tensor was not produced on this tape")
    if loss.node_id is None:
        # Fully detached loss (e.g. everything behind stop_gradient): constant
        # with respect to every leaf, so all gradients are zero.
        return Gradients({leaf: np.zeros_like(leaf.data)
                          for leaf in tape._leaves.values()})
    grads = {loss.node_id: np.ones_like(loss.data)}
    for out_id, in_ids, fns in reversed(tape._entries):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, fn in zip(in_ids, fns):
            if nid is None:
                continue
            contrib = fn(g)
            acc = grads.get(nid)
            grads[nid] = contrib if acc is None else acc + contrib
    return Gradients({leaf: grads.get(nid, np.zeros_like(leaf.data))
                      for nid, leaf in tape._leaves.items()})


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add operands not broadcastable: {ash} vs {bsh}") from None
    return _finish(out, [a, b], [lambda g: _sum_to(g, ash), lambda g: _sum_to(g, bsh)])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub operands not broadcastable: {ash} vs {bsh}") from None
    return _finish(out, [a, b], [lambda g: _sum_to(g, ash), lambda g: _sum_to(-g, bsh)])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError:
        raise ShapeError(f"mul operands not broadcastable: {ad.shape} vs {bd.shape}") from None
    return _finish(out, [a, b],
                   [lambda g: _sum_to(g * bd, ad.shape), lambda g: _sum_to(g * ad, bd.shape)])


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad / bd
    except ValueError:
        raise ShapeError(f"div operands not broadcastable: {ad.shape} vs {bd.shape}") from None
    return _finish(out, [a, b],
                   [lambda g: _sum_to(g / bd, ad.shape),
                    lambda g: _sum_to(-g * ad / (bd * bd), bd.shape)])


def neg(a):
    a = as_tensor(a)
    return _finish(-a.data, [a], [lambda g: -g])


def matmul(a, b):
    """Matrix product. Either operand may carry leading stack dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-D (or stacked) operands: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    return _finish(out, [a, b],
                   [lambda g: _sum_to(g @ bd.swapaxes(-1, -2), ad.shape),
                    lambda g: _sum_to(ad.swapaxes(-1, -2) @ g, bd.shape)])


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), [a], [lambda g: g * mask])


def sigmoid(a):
    """Logistic function with the input clamped to +-SIGMOID_CLAMP to avoid overflow."""
    a = as_tensor(a)
    x = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-x))
    return _finish(out, [a], [lambda g: g * out * (1.0 - out)])


def log(a):
    a = as_tensor(a)
    return _finish(np.log(a.data), [a], [lambda g: g / a.data])


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only strictly inside the range."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _finish(np.clip(a.data, lo, hi), [a], [lambda g: g * inside])


def where(cond, a, b):
    """Select per element on a constant boolean mask; gradient routes accordingly."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _finish(out, [a, b],
                   [lambda g: _sum_to(np.where(cond, g, 0.0), ash),
                    lambda g: _sum_to(np.where(cond, 0.0, g), bsh)])


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``; outputs sum to one there."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _finish(out, [a], [grad])


def tsum(a, axis=None, keepdims=False):
    """Sum reduction (named to avoid shadowing the builtin)."""
    a = as_tensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return np.full(ad.shape, g)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(x if x >= 0 else ad.ndim + x for x in axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, ad.shape).copy()

    return _finish(out, [a], [grad])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        lo, hi = offsets[i], offsets[i + 1]

        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return grad

    return _finish(out, ts, [make_grad(i) for i in range(len(ts))])


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    return _finish(a.data.reshape(shape), [a], [lambda g: g.reshape(orig)])


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _finish(a.data.transpose(axes), [a], [lambda g: g.transpose(inv)])


def gather_rows(table, indices):
    """Pick rows ``table[indices]``; the backward rule scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"gather_rows needs integer indices, got {idx.dtype}")
    out = table.data[idx]

    def grad(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return acc

    return _finish(out, [table], [grad])


def stop_gradient(a):
    """Identity forward; contributes exactly zero gradient to its input."""
    a = as_tensor(a)
    return Tensor(a.data)


def cosine(a, b):
    """Cosine similarity between vectors, or row-wise between two (B, D) arrays.

    The denominator carries a small epsilon so zero vectors yield 0; rows where
    either norm vanishes also get a zero gradient (the similarity is flat
    there for our purposes, and the true derivative is undefined).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim not in (1, 2):
        raise ShapeError(f"cosine needs equal 1-D or 2-D shapes: {a.data.shape} vs {b.data.shape}")
    single = a.data.ndim == 1
    A = a.data[None, :] if single else a.data
    B = b.data[None, :] if single else b.data
    s = (A * B).sum(axis=1)
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    denom = na * nb + COSINE_EPS
    c = s / denom
    ok = (na > COSINE_EPS) & (nb > COSINE_EPS)
    inv_d = np.where(ok, 1.0 / denom, 0.0)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)

    def grad_a(g):
        g2 = np.asarray(g).reshape(-1)
        da = g2[:, None] * (B * inv_d[:, None]
                            - (c * safe_nb / safe_na * inv_d)[:, None] * A)
        da = np.where(ok[:, None], da, 0.0)
        return da[0] if single else da

    def grad_b(g):
        g2 = np.asarray(g).reshape(-1)
        db = g2[:, None] * (A * inv_d[:, None]
                            - (c * safe_na / safe_nb * inv_d)[:, None] * B)
        db = np.where(ok[:, None], db, 0.0)
        return db[0] if single else db

    out = c[0] if single else c
    return _finish(np.asarray(out), [a, b], [grad_a, grad_b])
