"""Reverse-mode automatic differentiation over dense numpy tensors.

Eager tape style: every operation on :class:`Tensor` records its parents and
a vector-Jacobian closure, so the tape is topologically ordered by
construction. ``backward`` replays it in reverse and accumulates gradients
into the leaves.

Dtype follows the operands: float64 graphs yield float64 gradients (the
finite-difference checks depend on this), while the trainer runs the same
ops in float32. Python-float constants deliberately do not upcast float32
data under NumPy's promotion rules.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GraphError, ShapeMismatchError

# arccos inputs are clamped this far inside [-1, 1]; the derivative of
# arccos diverges at the endpoints.
ARCCOS_EPS = 1e-7


def _coerce(data) -> np.ndarray:
    a = np.asarray(data)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


class Tensor:
    """A node of the recorded computation graph.

    ``data`` is a numpy array, ``grad`` is filled by :func:`backward`.
    Leaves are created directly; interior nodes are created by the ops
    below and carry ``(parent, vjp)`` pairs for every differentiable
    parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_vjps")

    def __init__(self, data, requires_grad=False, name=None, _vjps=()):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or bool(_vjps)
        self.name = name
        self._vjps = _vjps

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"

    # operator sugar; all the math lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents_vjps, name=None) -> Tensor:
    vjps = tuple((p, f) for p, f in parents_vjps if p.requires_grad)
    return Tensor(data, _vjps=vjps, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: operands have incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
    ])


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, [(a, lambda g: g * 0.5 / out)])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def leaky_relu(a, slope=0.01) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 0, x, x * slope)
    return _node(out, [(a, lambda g: g * np.where(x > 0, 1.0, slope).astype(x.dtype))])


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever clipping was active."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _node(out, [(a, lambda g: g * inside.astype(a.data.dtype))])


def arccos(a) -> Tensor:
    """arccos with inputs clamped to [-1+eps, 1-eps]; output lies in (0, pi).

    Outside the clamp range the gradient is zero, mirroring :func:`clamp`.
    """
    a = _as_tensor(a)
    c = np.clip(a.data, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
    inside = (c == a.data).astype(a.data.dtype)
    return _node(np.arccos(c), [(a, lambda g: g * inside * (-1.0 / np.sqrt(1.0 - c * c)))])


# ---------------------------------------------------------------------------
# shape / indexing primitives


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _node(a.data.T.copy(), [(a, lambda g: g.T)])


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise GraphError("concat: no operands")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatchError(
                f"concat: shapes {[t.shape for t in ts]} incompatible along axis {axis}"
            )
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return vjp

    return _node(out, [(t, make_vjp(i)) for i, t in enumerate(ts)])


def take(a, indices, axis=0) -> Tensor:
    """Select rows along the leading axis (used for minibatch shuffling)."""
    a = _as_tensor(a)
    if axis != 0:
        raise GraphError("take: only axis 0 is supported")
    idx = np.asarray(indices)

    def vjp(g):
        out = np.zeros_like(a.data)
        if idx.size == np.unique(idx).size:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _node(a.data[idx], [(a, vjp)])


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims))])


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size
    return _node(out, [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims) / count)])


def tensor_max(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    full = a.data.max(axis=axis, keepdims=True)
    mask = (a.data == full).astype(a.data.dtype)
    # ties share the incoming gradient equally; untied points are exact
    count = mask.sum(axis=axis, keepdims=True)

    def vjp(g):
        return _expand_reduced(g, a.shape, axis, keepdims) * mask / count

    return _node(out, [(a, vjp)])


def log_softmax(a, axis=-1) -> Tensor:
    """Numerically stable log-softmax (the softmax/logsumexp composite)."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def vjp(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# linear algebra / convolution


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def _conv_patches_1d(xp, k, stride):
    b, c, l = xp.shape
    n = (l - k) // stride + 1
    sb, sc, sl = xp.strides
    return as_strided(xp, shape=(b, c, n, k), strides=(sb, sc, sl * stride, sl))


def conv1d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Batched 1-D correlation: x (B,C,L) * w (O,C,K) -> (B,O,L_out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    if length + 2 * padding < k:
        raise ShapeMismatchError(f"conv1d: input of length {length} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    n = (xp.shape[2] - k) // stride + 1
    patches = _conv_patches_1d(xp, k, stride)
    cols = patches.transpose(0, 2, 1, 3).reshape(bsz * n, cin * k)
    w2 = w.data.reshape(cout, cin * k)
    out = (cols @ w2.T).reshape(bsz, n, cout).transpose(0, 2, 1)

    parents = [
        (w, lambda g: (g.transpose(1, 0, 2).reshape(cout, bsz * n) @ cols).reshape(w.shape)),
    ]
    if x.requires_grad:
        def vjp_x(g):
            gp = (g.transpose(0, 2, 1).reshape(bsz * n, cout) @ w2).reshape(bsz, n, cin, k)
            gx = np.zeros_like(xp)
            for tap in range(k):
                gx[:, :, tap:tap + stride * n:stride] += gp[:, :, :, tap].transpose(0, 2, 1)
            return gx[:, :, padding:gx.shape[2] - padding] if padding else gx
        parents.append((x, vjp_x))

    result = _node(out, parents)
    if b is not None:
        bt = _as_tensor(b)
        if bt.shape != (cout,):
            raise ShapeMismatchError(f"conv1d: bias shape {bt.shape} != ({cout},)")
        result = add(result, reshape(bt, (1, cout, 1)))
    return result


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Batched 2-D correlation: x (B,C,H,W) * w (O,C,KH,KW) -> (B,O,H_out,W_out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeMismatchError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hn = (xp.shape[2] - kh) // stride + 1
    wn = (xp.shape[3] - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(bsz, cin, hn, wn, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
    )
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * hn * wn, cin * kh * kw)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).reshape(bsz, hn, wn, cout).transpose(0, 3, 1, 2)

    parents = [
        (w, lambda g: (g.transpose(1, 0, 2, 3).reshape(cout, bsz * hn * wn) @ cols).reshape(w.shape)),
    ]
    if x.requires_grad:
        def vjp_x(g):
            gp = (g.transpose(0, 2, 3, 1).reshape(bsz * hn * wn, cout) @ w2)
            gp = gp.reshape(bsz, hn, wn, cin, kh, kw)
            gx = np.zeros_like(xp)
            for ti in range(kh):
                for tj in range(kw):
                    gx[:, :, ti:ti + stride * hn:stride, tj:tj + stride * wn:stride] += \
                        gp[:, :, :, :, ti, tj].transpose(0, 3, 1, 2)
            if padding:
                return gx[:, :, padding:gx.shape[2] - padding, padding:gx.shape[3] - padding]
            return gx
        parents.append((x, vjp_x))

    result = _node(out, parents)
    if b is not None:
        bt = _as_tensor(b)
        if bt.shape != (cout,):
            raise ShapeMismatchError(f"conv2d: bias shape {bt.shape} != ({cout},)")
        result = add(result, reshape(bt, (1, cout, 1, 1)))
    return result


# ---------------------------------------------------------------------------
# reverse accumulation


def _topo_order(out: Tensor):
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into `.grad` of every reachable leaf.

    `out` must be scalar-valued. Gradients add to any existing `.grad`,
    so callers reusing leaves across graphs must clear them first.
    """
    if out.data.size != 1:
        raise GraphError(f"backward: gradient target must be scalar, got shape {out.data.shape}")
    order = _topo_order(out)
    inner = {}
    inner[id(out)] = np.ones_like(out.data)
    for node in reversed(order):
        g = inner.pop(id(node), None)
        if g is None:
            continue
        if not node._vjps:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node._vjps:
            contrib = vjp(g)
            have = inner.get(id(parent))
            inner[id(parent)] = contrib if have is None else have + contrib


def evaluate_with_gradients(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    differentiable: Sequence[str] | None = None,
):
    """Evaluate a graph-building function and return (value, gradients).

    `fn` receives one leaf Tensor per named input (as keyword arguments)
    and must return a scalar Tensor. Gradients are returned for every
    input named in `differentiable` (default: all of them).
    """
    names = set(inputs) if differentiable is None else set(differentiable)
    unknown = names - set(inputs)
    if unknown:
        raise GraphError(f"evaluate_with_gradients: unknown differentiable inputs {sorted(unknown)}")
    leaves = {k: Tensor(v, requires_grad=k in names, name=k) for k, v in inputs.items()}
    out = fn(**leaves)
    if not isinstance(out, Tensor):
        raise GraphError("evaluate_with_gradients: fn must return a Tensor")
    if out.data.size != 1:
        raise GraphError(f"evaluate_with_gradients: output must be scalar, got shape {out.data.shape}")
    backward(out)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
        if k in names
    }
    return float(out.data.reshape(())), grads


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h=1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    This is the verification oracle: it never touches the tape, so it stays
    independent of the reverse-mode path it is used to check.
    """
    if h <= 0:
        raise GraphError("finite_difference_gradient: step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GraphError(f"finite_difference_gradient: non-finite probe at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def directional_derivative(f: Callable[[np.ndarray], float], x, v, h=1e-5) -> float:
    """Central difference of t -> f(x + t*v) at t=0 (cheap probe for big tensors)."""
    if h <= 0:
        raise GraphError("directional_derivative: step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    fp = float(f(x + h * v))
    fm = float(f(x - h * v))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise GraphError("directional_derivative: non-finite probe")
    return (fp - fm) / (2.0 * h)


def relative_error(a, b) -> float:
    """l2 relative disagreement, floored so tiny true gradients stay meaningful."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
