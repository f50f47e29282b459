"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op whose inputs require
gradients records its parents and a backward closure on the output; the
reverse pass is replayed by :class:`Tape` in exact reverse execution order
(ops carry a global, monotonically increasing sequence number).
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float32
_seq = itertools.count()
_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


def set_precision(bits: int) -> None:
    """Select the float width (32 or 64) used for new tensors and parameters."""
    global _default_dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _DTYPES[bits]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(bits: int):
    old = _default_dtype
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_default_dtype"] = old


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable op recording in the current thread."""
    old = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "seq", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward_fn, op: str, check: bool = True) -> Tensor:
    """Wrap an op result, recording it when any parent requires grad.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    if check and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.seq = next(_seq)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def custom_op(value, parents, backward_fn, name="custom") -> Tensor:
    """Public hook for ops with hand-written gradients (e.g. DP losses)."""
    parents = [as_tensor(p) for p in parents]
    return make(np.asarray(value), parents, backward_fn, name)


class Tape:
    """The recorded ops reachable from ``loss``, in reverse execution order."""

    def __init__(self, loss: Tensor):
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq, reverse=True)
        self.loss = loss
        self.ops = nodes

    def run(self, seed=None) -> dict:
        """Reverse pass. Returns ``{id(tensor): gradient}`` for every node."""
        loss = self.loss
        if seed is None:
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}
        for node in self.ops:
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def grad(loss: Tensor, params) -> list:
    """Gradients of a scalar ``loss`` w.r.t. ``params``; zeros where unreachable.

    Pure: does not touch ``.grad`` so independent tapes may run on
    separate threads.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    table = Tape(loss).run() if loss.requires_grad else {}
    out = []
    for p in params:
        g = table.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else g.reshape(p.shape))
    return out


def backward(loss: Tensor, params=None) -> dict:
    """Run the reverse pass and store ``.grad`` on every visited tensor.

    Returns a map ``{id(leaf): grad}`` for requires-grad leaves; leaves in
    ``params`` that the loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape(loss) if loss.requires_grad else None
    table = tape.run() if tape else {}
    leaves = {}
    if tape:
        for node in tape.ops:
            g = table.get(id(node))
            node.grad = None if g is None else g.reshape(node.shape)
            if not node.parents:
                leaves[id(node)] = node.grad if node.grad is not None else np.zeros_like(node.data)
    for p in params or ():
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
            leaves[id(p)] = p.grad
    return leaves
