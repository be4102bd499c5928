"""Reverse-mode automatic differentiation over dense row-major tensors.

Model state lives in float32. Ops record a per-output computation graph at
forward time; ``Tensor.backward`` replays it once in reverse topological
order and then frees it, so graph memory is bounded by a single forward
pass. float64 enters only through :func:`grad_check`, which promotes its
input and relies on ops propagating the wider dtype.

Only the broadcasting the model ops actually need is supported (bias rows,
scalar scaling, matched batch dims); anything fancier raises.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError

_ALLOWED_DTYPES = (np.float32, np.float64)


class _Autograd:
    enabled = True


class no_grad:
    """Context manager disabling graph recording (inference / FD probes)."""

    def __enter__(self):
        self._prev = _Autograd.enabled
        _Autograd.enabled = False
        return self

    def __exit__(self, *exc):
        _Autograd.enabled = self._prev
        return False


def _require_finite(arr: np.ndarray, what: str) -> None:
    # min/max both propagate NaN and expose infinities; summing them in
    # float64 gives a single scalar finiteness probe without a bool temp
    if arr.size and not np.isfinite(np.float64(arr.min()) + np.float64(arr.max())):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Dense tensor with optional gradient tracking.

    ``data`` is always a C-contiguous float32/float64 ndarray; ``grad``
    is either None or an ndarray of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_spent", "_op")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        if dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
        arr = np.ascontiguousarray(values, dtype=dtype)
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._spent = False
        self._op = "leaf"

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(arr, parents, grad_fn, op: str) -> "Tensor":
        arr = np.ascontiguousarray(arr)
        _require_finite(arr, op)
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.grad = None
        t._spent = False
        t._op = op
        if _Autograd.enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._grad_fn = grad_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._grad_fn = None
        return t

    # -- properties --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Run the backward pass from this tensor.

        The recorded graph is consumed: a second call without a fresh
        forward pass raises RuntimeError. Leaves keep their accumulated
        ``grad``; interior bookkeeping is freed.
        """
        if self._spent:
            raise RuntimeError("backward already ran on this graph; run forward again")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward on a non-scalar requires an explicit seed gradient")
            seed = np.ones_like(self.data)
        else:
            seed = np.ascontiguousarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")
        self._spent = True
        if not self.requires_grad:
            return

        # Iterative post-order: reverse of it is a valid reverse-topological
        # order, so each node's grad is complete before its grad_fn runs.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            parent_grads = node._grad_fn(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            node._parents = ()
            node._grad_fn = None
            node._spent = True

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def parameter(values, rng=None, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Leaf tensor with requires_grad=True.

    ``values`` may be an array, or a shape tuple in which case entries are
    drawn N(0, std) from ``rng`` (std=0 gives zeros: biases, beta).
    """
    if isinstance(values, tuple):
        if std == 0.0:
            arr = np.zeros(values, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("random parameter init needs an rng")
            arr = rng.normal(0.0, std, size=values).astype(dtype)
        return Tensor(arr, requires_grad=True, dtype=dtype)
    return Tensor(values, requires_grad=True, dtype=dtype)


def linear_parameter(rng, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    """Weight matrix with 1/sqrt(fan_in) init.

    At desk-scale widths a flat 0.02 init shrinks every matmul by an order
    of magnitude and the stacked network collapses sample-to-sample
    variation below float32 noise; fan-in scaling keeps activations O(1).
    """
    return parameter((fan_in, fan_out), rng, std=fan_in**-0.5, dtype=dtype)


# -- broadcast helpers ------------------------------------------------------


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ValueError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}") from e


# -- elementwise ops --------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a, b, "add")
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (
            _sum_to_shape(g, a.data.shape) if need_a else None,
            _sum_to_shape(g, b.data.shape) if need_b else None,
        )

    return Tensor._from_op(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a, b, "sub")
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (
            _sum_to_shape(g, a.data.shape) if need_a else None,
            _sum_to_shape(-g, b.data.shape) if need_b else None,
        )

    return Tensor._from_op(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a, b, "mul")
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape) if need_a else None,
            _sum_to_shape(g * a.data, b.data.shape) if need_b else None,
        )

    return Tensor._from_op(a.data * b.data, (a, b), grad_fn, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return Tensor._from_op(np.maximum(x.data, 0), (x,), grad_fn, "relu")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree {a.data.shape} @ {b.data.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        ga = _sum_to_shape(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if need_a else None
        gb = _sum_to_shape(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if need_b else None
        return (ga, gb)

    return Tensor._from_op(a.data @ b.data, (a, b), grad_fn, "matmul")


# -- reductions / shape ops -------------------------------------------------


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis]


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    arr = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.asarray(g).reshape((1,) * x.data.ndim)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return Tensor._from_op(arr, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _reduced_count(x.data.shape, axis)
    arr = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.asarray(g).reshape((1,) * x.data.ndim)
        return (np.broadcast_to(g, x.data.shape) / n,)

    return Tensor._from_op(arr, (x,), grad_fn, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(x.data.transpose(axes), (x,), grad_fn, "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def grad_fn(g):
        return (_sum_to_shape(g, x.data.shape),)

    return Tensor._from_op(np.broadcast_to(x.data, shape), (x,), grad_fn, "broadcast_to")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    arrs = [t.data for t in tensors]
    arr = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return Tensor._from_op(arr, tuple(tensors), grad_fn, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    dim = x.data.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ValueError(f"slice [{start}:{stop}] out of range for axis {axis} of size {dim}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(x.data[index].copy(), (x,), grad_fn, "slice_axis")


# -- neural-net ops ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else x.data.ndim + axis
    if x.data.ndim == 0 or x.data.shape[ax] == 0:
        raise ValueError("softmax over an empty axis")
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(y, (x,), grad_fn, "softmax")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a K x D table selected by integer ids; grads scatter back."""
    if table.data.ndim != 2:
        raise ValueError("embedding table must be 2-D (K x D)")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ValueError(f"embedding id out of range [0, {n_rows})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return Tensor._from_op(table.data[ids], (table,), grad_fn, "embedding_lookup")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def grad_fn(g):
        dg = _sum_to_shape(g * xhat, gamma.data.shape)
        db = _sum_to_shape(g, beta.data.shape)
        gxh = g * gamma.data
        dx = inv * (
            gxh
            - gxh.mean(axis=-1, keepdims=True)
            - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dg, db)

    return Tensor._from_op(y, (x, gamma, beta), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels (fused log-softmax)."""
    raw = logits.data
    flat = raw.reshape(-1, raw.shape[-1]) if raw.ndim > 1 else raw.reshape(1, -1)
    lab = np.asarray(labels).reshape(-1)
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("labels must be integers")
    n, n_classes = flat.shape
    if lab.shape[0] != n:
        raise ValueError(f"got {lab.shape[0]} labels for {n} rows of logits")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), lab].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        p *= np.asarray(g).reshape(()) / n
        return (p.reshape(raw.shape),)

    return Tensor._from_op(np.asarray(loss, dtype=raw.dtype), (logits,), grad_fn, "cross_entropy")


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 < p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    draws = rng.random(x.data.shape, dtype=np.float32)
    mask = (draws >= p).astype(x.data.dtype)
    mask *= 1.0 / (1.0 - p)

    def grad_fn(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), grad_fn, "dropout")


# -- gradient checking ------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor and be deterministic. The
    probe runs in float64 regardless of the input dtype; the analytic
    gradient comes from one backward pass, the reference from two function
    evaluations per coordinate. Error per coordinate is
    |analytic - fd| / max(1, |fd|).
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True, dtype=np.float64)
    out = f(x64)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x64.data) if x64.grad is None else x64.grad

    flat = x64.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x64).data.reshape(-1)[0])
            flat[i] = orig - eps
            f_minus = float(f(x64).data.reshape(-1)[0])
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * eps)
    diff = np.abs(analytic.reshape(-1) - fd)
    denom = np.maximum(1.0, np.abs(fd))
    return float((diff / denom).max()) if flat.size else 0.0
