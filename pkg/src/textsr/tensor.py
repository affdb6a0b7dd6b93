"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable computation in this package runs through the `Tensor`
class below: forward ops record a node with saved inputs and a backward
closure, and `Tensor.backward()` replays the graph in reverse topological
order. The numeric buffer is a numpy array; the graph, gradients and all
operator derivatives are implemented here.

Precision is chosen per run (`set_precision`): 64-bit for gradient-check
suites, 32-bit for training. Shapes never broadcast implicitly except for
python scalars; mismatched shapes raise `DimensionError`.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that has already been consumed."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


def set_precision(bits):
    """Select the floating-point width (32 or 64) for newly created tensors."""
    global _DTYPE
    if bits not in (32, 64):
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.float32 if bits == 32 else np.float64


def get_precision():
    return 32 if _DTYPE == np.float32 else 64


@contextlib.contextmanager
def precision(bits):
    prev = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, frozen targets)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_finite(enabled=True):
    """Assert that every forward op produces finite values inside the block."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    `data` is a row-major numpy buffer. If `requires_grad` is set on a leaf,
    `backward()` on any scalar descendant populates `grad` with the same
    shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, bwd, op=""):
        """Internal node factory used by forward ops (also from other modules)."""
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op or 'op'}")
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._consumed = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._bwd = bwd
        else:
            t.requires_grad = False
            t._parents = ()
            t._bwd = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same buffer, cut off from the graph."""
        return Tensor._from_op(self.data, (), None, "detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Populate `grad` on every tracked leaf with d(self)/d(leaf).

        `self` must be a scalar produced by tracked ops. The graph is cleared
        afterwards; a second backward through any of its nodes raises
        `GraphConsumedError`.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError("backward called twice on the same graph")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tracked tensor")

        # Iterative post-order topological sort (graphs can be deep).
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._consumed:
                raise GraphConsumedError("graph shares nodes with an already-consumed graph")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg

        for node in order:
            if node._bwd is not None:
                node._bwd = None
                node._parents = ()
                node._consumed = True

    # -- elementwise arithmetic -----------------------------------------------

    def _coerce(self, other, op):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise DimensionError(f"{op}: shape {self.shape} vs {other.shape} "
                                     "(only scalar operands broadcast)")
            return other
        if isinstance(other, (int, float)):
            return other
        raise TypeError(f"{op}: unsupported operand {type(other).__name__}")

    def __add__(self, other):
        other = self._coerce(other, "add")
        if isinstance(other, Tensor):
            return Tensor._from_op(self.data + other.data, (self, other),
                                   lambda g: (g, g), "add")
        return Tensor._from_op(self.data + other, (self,), lambda g: (g,), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other, "sub")
        if isinstance(other, Tensor):
            return Tensor._from_op(self.data - other.data, (self, other),
                                   lambda g: (g, -g), "sub")
        return Tensor._from_op(self.data - other, (self,), lambda g: (g,), "sub")

    def __rsub__(self, other):
        return Tensor._from_op(other - self.data, (self,), lambda g: (-g,), "rsub")

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = self._coerce(other, "mul")
        if isinstance(other, Tensor):
            return Tensor._from_op(self.data * other.data, (self, other),
                                   lambda g, a=self.data, b=other.data: (g * b, g * a), "mul")
        return Tensor._from_op(self.data * other, (self,),
                               lambda g, s=other: (g * s,), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other, "div")
        if isinstance(other, Tensor):
            return Tensor._from_op(
                self.data / other.data, (self, other),
                lambda g, a=self.data, b=other.data: (g / b, -g * a / (b * b)), "div")
        return Tensor._from_op(self.data / other, (self,),
                               lambda g, s=other: (g / s,), "div")

    def __rtruediv__(self, other):
        return Tensor._from_op(
            other / self.data, (self,),
            lambda g, s=other, a=self.data: (-g * s / (a * a),), "rdiv")

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("pow: exponent must be a python scalar")
        out = self.data ** p
        return Tensor._from_op(
            out, (self,),
            lambda g, a=self.data, p=p: (g * p * a ** (p - 1),), "pow")

    # -- shape ops (explicit; no implicit broadcasting) -------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (self,),
                               lambda g, old=old: (g.reshape(old),), "reshape")

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._from_op(np.transpose(self.data, axes), (self,),
                               lambda g, inv=tuple(inv): (np.transpose(g, inv),),
                               "permute")

    def transpose_last2(self):
        return Tensor._from_op(np.swapaxes(self.data, -1, -2), (self,),
                               lambda g: (np.swapaxes(g, -1, -2),), "transpose")

    def flip(self, axis):
        """Reverse along one axis."""
        return Tensor._from_op(np.flip(self.data, axis), (self,),
                               lambda g, a=axis: (np.flip(g, a),), "flip")

    def broadcast_to(self, shape):
        """Explicit broadcast; gradient sums over the expanded axes."""
        shape = tuple(shape)
        try:
            data = np.broadcast_to(self.data, shape).copy()
        except ValueError:
            raise DimensionError(f"broadcast_to: cannot expand {self.shape} to {shape}")
        src = self.shape

        def bwd(g, src=src):
            extra = g.ndim - len(src)
            if extra:
                g = g.sum(axis=tuple(range(extra)))
            axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
            return (g.reshape(src),)

        return Tensor._from_op(data, (self,), bwd, "broadcast_to")

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g, axis=axis, keepdims=keepdims, shape=shape):
            if axis is None:
                return (np.full(shape, g, dtype=g.dtype),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), bwd, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- matmul -------------------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g, o=out: (g * o,), "exp")

    def log(self):
        return Tensor._from_op(np.log(self.data), (self,),
                               lambda g, a=self.data: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g, o=out: (g / (2.0 * o),), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._from_op(out, (self,), lambda g, o=out: (g * (1.0 - o * o),), "tanh")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._from_op(out, (self,), lambda g, o=out: (g * o * (1.0 - o),), "sigmoid")

    def relu(self):
        out = np.maximum(self.data, 0.0)
        return Tensor._from_op(out, (self,),
                               lambda g, a=self.data: (g * (a > 0),), "relu")

    def abs(self):
        return Tensor._from_op(np.abs(self.data), (self,),
                               lambda g, a=self.data: (g * np.sign(a),), "abs")

    def clip(self, lo, hi):
        """Clamp to [lo, hi]; gradient passes through inside the range only."""
        out = np.clip(self.data, lo, hi)
        return Tensor._from_op(
            out, (self,),
            lambda g, a=self.data, lo=lo, hi=hi: (g * ((a >= lo) & (a <= hi)),), "clip")


def _sigmoid(x):
    # exp may overflow to inf for very negative x; 1/(1+inf) = 0 is the
    # correct saturated value, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad)


def matmul(a, b):
    """Matrix product. 2-D operands, or stacked operands with identical
    leading dimensions (no implicit batch broadcasting)."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g, ad=a.data, bd=b.data):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)),
                np.matmul(np.swapaxes(ad, -1, -2), g))

    return Tensor._from_op(out, (a, b), bwd, "matmul")


def softmax_lastdim(x):
    """Softmax over the last axis, computed with max-subtraction so that
    arbitrarily large logits cannot overflow."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: need at least one element, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, o=out):
        return (o * (g - (g * o).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (x,), bwd, "softmax")


def concat0(a, b):
    """Concatenate two tensors along axis 0 (remaining dims must agree)."""
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat0: trailing dims differ, {a.shape} vs {b.shape}")
    n = a.shape[0]
    return Tensor._from_op(np.concatenate([a.data, b.data], axis=0), (a, b),
                           lambda g, n=n: (g[:n], g[n:]), "concat0")


def split0(x, n):
    """Split along axis 0 into (first n rows, rest); inverse of concat0."""
    first = Tensor._from_op(
        x.data[:n].copy(), (x,),
        lambda g, n=n, s=x.shape: (_pad_rows(g, 0, s),), "split0")
    second = Tensor._from_op(
        x.data[n:].copy(), (x,),
        lambda g, n=n, s=x.shape: (_pad_rows(g, n, s),), "split0")
    return first, second


def _pad_rows(g, offset, shape):
    out = np.zeros(shape, dtype=g.dtype)
    out[offset:offset + g.shape[0]] = g
    return out


def sum3_sym(a, b, c):
    """a + b + c, summed in value-sorted order so the result is bitwise
    invariant under any permutation of the operands."""
    for t in (b, c):
        if t.shape != a.shape:
            raise DimensionError(f"sum3_sym: shapes {a.shape}, {b.shape}, {c.shape} differ")
    stacked = np.sort(np.stack([a.data, b.data, c.data], axis=0), axis=0)
    out = (stacked[0] + stacked[1]) + stacked[2]
    return Tensor._from_op(out, (a, b, c), lambda g: (g, g, g), "sum3_sym")


# -- gradient oracle ------------------------------------------------------------


def finite_diff_gradient(f, x, step=1e-5):
    """Central-difference estimate of d f(x) / dx, element by element.

    `f` maps a Tensor to a scalar (Tensor or float) and must be deterministic.
    The estimate uses forward evaluations only, so it is independent of the
    backward pass it is used to check.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    data = x.data
    grad = np.zeros(data.shape, dtype=np.float64)
    with no_grad():
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + step
            fp = _as_scalar(f(x))
            data[idx] = orig - step
            fm = _as_scalar(f(x))
            data[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * step)
    out = Tensor.__new__(Tensor)
    out.data = grad.astype(x.dtype)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._bwd = None
    out._consumed = False
    return out


def _as_scalar(v):
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)


def rel_error(got, want):
    """max |got - want| normalized by the largest reference magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.abs(want).max(initial=0.0), np.abs(got).max(initial=0.0), 1e-12)
    return float(np.abs(got - want).max(initial=0.0) / denom)


def check_gradient(f, x, step=1e-5):
    """Compare autodiff against the finite-difference oracle; returns the
    normalized max error. `x` must be a tracked leaf."""
    x.grad = None
    loss = f(x)
    loss.backward()
    got = x.grad
    want = finite_diff_gradient(f, x, step).data
    return rel_error(got, want)
