"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Forward passes build a graph of Tensor nodes; backward(root) runs a
vector-Jacobian sweep and leaves gradients on every reachable node. The
op set is only what the detection stack needs; everything is float64 so
central finite differences validate gradients to < 1e-4 relative error.

psum performs a permutation-invariant (sorted) summation: attention uses
it for its key-axis reductions so that reordering a token bank reproduces
bit-identical outputs.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        val = self.value + other.value
        return Tensor(
            val,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        val = self.value * other.value
        return Tensor(
            val,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.value, self.shape),
                _unbroadcast(g * self.value, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        val = self.value / other.value
        return Tensor(
            val,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.value, self.shape),
                _unbroadcast(-g * self.value / other.value**2, other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        val = self.value**exponent
        return Tensor(
            val, (self,), lambda g: (g * exponent * self.value ** (exponent - 1),)
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        val = self.value @ other.value
        def vjp(g):
            a, b = self.value, other.value
            ga = g @ b.T if b.ndim == 2 else np.outer(g, b)
            gb = a.T @ g
            return ga, gb
        return Tensor(val, (self, other), vjp)

    def __getitem__(self, idx):
        def vjp(g):
            gx = np.zeros_like(self.value)
            np.add.at(gx, idx, g)
            return (gx,)
        return Tensor(self.value[idx], (self,), vjp)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Tensor(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, axes=None):
        val = np.transpose(self.value, axes)
        if axes is None:
            inverse = None
        else:
            inverse = np.argsort(axes)
        return Tensor(val, (self,), lambda g: (np.transpose(g, inverse),))

    @property
    def T(self):
        return self.transpose()

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        val = self.value.sum(axis=axis, keepdims=keepdims)
        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)
        return Tensor(val, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def amax(self, axis=None, keepdims=False):
        """Maximum with subgradient routed to the first argmax."""
        val = self.value.max(axis=axis, keepdims=keepdims)
        if axis is None:
            flat_idx = int(self.value.argmax())
            def vjp(g):
                gx = np.zeros_like(self.value)
                gx.flat[flat_idx] = np.asarray(g).reshape(())
                return (gx,)
        else:
            arg = np.expand_dims(self.value.argmax(axis=axis), axis)
            def vjp(g):
                g = np.asarray(g)
                if not keepdims:
                    g = np.expand_dims(g, axis)
                gx = np.zeros_like(self.value)
                np.put_along_axis(gx, arg, g, axis=axis)
                return (gx,)
        return Tensor(val, (self,), vjp)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the parent's shape."""
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise functions -------------------------------------------------


def exp(x):
    x = as_tensor(x)
    val = np.exp(x.value)
    return Tensor(val, (x,), lambda g: (g * val,))


def log(x):
    x = as_tensor(x)
    return Tensor(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    x = as_tensor(x)
    val = np.sqrt(x.value)
    return Tensor(val, (x,), lambda g: (g / (2.0 * val),))


def sin(x):
    x = as_tensor(x)
    return Tensor(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),))


def cos(x):
    x = as_tensor(x)
    return Tensor(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),))


def absolute(x):
    x = as_tensor(x)
    return Tensor(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def erf(x):
    x = as_tensor(x)
    val = special.erf(x.value)
    coeff = 2.0 / np.sqrt(np.pi)
    return Tensor(val, (x,), lambda g: (g * coeff * np.exp(-x.value**2),))


def sigmoid(x):
    x = as_tensor(x)
    v = x.value
    val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Tensor(val, (x,), lambda g: (g * val * (1.0 - val),))


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def gelu(x):
    """Gaussian-error-linear activation: x * Phi(x)."""
    x = as_tensor(x)
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value >= b.value
    val = np.where(take_a, a.value, b.value)
    return Tensor(
        val,
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    val = np.where(take_a, a.value, b.value)
    return Tensor(
        val,
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        ),
    )


# -- structural ops ----------------------------------------------------------


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    return Tensor(
        val, tuple(tensors), lambda g: tuple(np.split(g, offsets, axis=axis))
    )


def stack(tensors, axis=0):
    return concatenate([as_tensor(t).reshape(*_insert_axis(as_tensor(t).shape, axis)) for t in tensors], axis=axis)


def _insert_axis(shape, axis):
    s = list(shape)
    s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
    return tuple(s)


def pad(x, pad_width):
    x = as_tensor(x)
    val = np.pad(x.value, pad_width)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return Tensor(val, (x,), lambda g: (g[slices],))


def take_rows(x, idx):
    """Gather rows along axis 0 (idx may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)
    return Tensor(x.value[idx], (x,), vjp)


def scatter_rows(x, idx, num_rows):
    """Sum rows of x into an output of num_rows rows at positions idx."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    val = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(val, idx, x.value)
    return Tensor(val, (x,), lambda g: (g[idx],))


def segment_max(x, segment_ids, num_segments):
    """Per-segment elementwise max over rows; every segment must be non-empty.

    Gradient flows to the first maximal row of each segment.
    """
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    n_cols = x.shape[1]
    val = np.empty((num_segments, n_cols))
    winners = np.empty((num_segments, n_cols), dtype=np.int64)
    for s in range(num_segments):
        rows = np.nonzero(segment_ids == s)[0]
        if rows.size == 0:
            raise ValueError(f"segment {s} has no members")
        block = x.value[rows]
        arg = block.argmax(axis=0)
        val[s] = block[arg, np.arange(n_cols)]
        winners[s] = rows[arg]
    def vjp(g):
        gx = np.zeros_like(x.value)
        cols = np.broadcast_to(np.arange(n_cols), winners.shape)
        np.add.at(gx, (winners.ravel(), cols.ravel()), np.asarray(g).ravel())
        return (gx,)
    return Tensor(val, (x,), vjp)


def psum(x, axis=0, keepdims=False):
    """Permutation-invariant sum: sorts along axis before summing so the
    result is bit-identical under any reordering of the summands."""
    x = as_tensor(x)
    val = np.sort(x.value, axis=axis).sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor(val, (x,), vjp)


# -- backward ---------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate .grad over the graph reachable from root (a scalar)."""
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root")
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


def grad_of(leaf: Tensor) -> np.ndarray:
    if leaf.grad is None:
        return np.zeros_like(leaf.value)
    return leaf.grad


# -- composite layers --------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization over the last axis with learned scale/shift."""
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * as_tensor(gamma) + as_tensor(beta)


def softmax_rows(scores):
    """Row softmax with a permutation-invariant denominator (last axis)."""
    scores = as_tensor(scores)
    shifted = scores - scores.amax(axis=-1, keepdims=True)
    e = exp(shifted)
    return e / psum(e, axis=-1, keepdims=True)


# -- finite differences -------------------------------------------------------


def numeric_gradient(f, array: np.ndarray, indices, h: float = 1e-6) -> dict:
    """Central finite differences of scalar-returning f with respect to
    selected flat indices of array (perturbed in place)."""
    grads = {}
    flat = array.reshape(-1)
    for idx in indices:
        old = flat[idx]
        flat[idx] = old + h
        fp = f()
        flat[idx] = old - h
        fm = f()
        flat[idx] = old
        grads[idx] = (fp - fm) / (2.0 * h)
    return grads


def check_gradients(build, params: dict, max_entries: int = 100, h: float = 1e-6,
                    rtol: float = 1e-4, rng=None) -> float:
    """Compare analytic and central-difference gradients on a random slice
    of each parameter array. build(leaves) must return a scalar Tensor for
    leaves = {name: Tensor}. Returns the worst relative error seen.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    leaves = {k: Tensor(v) for k, v in params.items()}
    root = build(leaves)
    backward(root)
    worst = 0.0
    for name, arr in params.items():
        n = arr.size
        indices = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        numeric = numeric_gradient(lambda: float(build({k: Tensor(v) for k, v in params.items()}).value), arr, indices, h=h)
        analytic = grad_of(leaves[name]).reshape(-1)
        for idx, fd in numeric.items():
            a = analytic[idx]
            scale = max(abs(a), abs(fd))
            err = abs(a - fd) if scale < 1e-8 else abs(a - fd) / scale
            if err > worst:
                worst = err
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch for {name}[{idx}]: analytic {a:.6e} vs fd {fd:.6e} (rel {err:.2e})"
                )
    return worst
