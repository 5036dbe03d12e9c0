"""Dense tensors with reverse-mode automatic differentiation.

Ops are numpy-backed and recorded define-by-run: each result keeps a
closure that pushes adjoints to its parents, and ``backward`` replays
them once in reverse topological order, after which the graph is freed.
Every forward op checks its output for NaN/Inf and raises instead of
propagating silently.

Convolutions use cross-correlation semantics (no kernel flip), the
convention of learned convolutions.
"""

from __future__ import annotations

import dataclasses

import numpy as np


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with the op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward misuse: non-scalar loss or a consumed graph."""


class NondeterministicError(RuntimeError):
    """gradcheck saw two differing forward evaluations."""


_FLOAT_DTYPES = (np.float32, np.float64)

# When true, the matmul adjoint for the first operand is deliberately
# scaled by 1.01 so gradcheck negative controls have something to catch.
_corrupt_matmul_adjoint = False

# Graph recording switch, toggled by no_grad() during evaluation.
_grad_enabled = True


def set_debug_corrupt_adjoint(on: bool) -> None:
    global _corrupt_matmul_adjoint
    _corrupt_matmul_adjoint = bool(on)


class no_grad:
    """Context manager that suspends graph recording (forward-only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense float32/float64 array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()
        self._consumed = False

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        grad = "grad" if self.requires_grad else "no-grad"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, {grad})"

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


# -- graph plumbing --------------------------------------------------------


def _from_op(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _binary(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate adjoints of ``loss`` into every reachable requires_grad tensor.

    The recorded graph is freed afterwards; a second call on the same loss
    raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        loss._consumed = True
        return

    # Iterative DFS topological sort; recursion would overflow on long
    # recurrent chains.
    order = []
    visited = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._backward = None
        node._parents = ()
    loss._consumed = True


# -- elementwise ops --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def back(g):
        _accum(a, g * c)

    return _from_op(data, (a,), back, "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign to avoid exp overflow for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(a, g * out * (1.0 - out))

    return _from_op(out, (a,), back, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out * out))

    return _from_op(out, (a,), back, "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _from_op(out, (a,), back, "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite(out, "exp")

    def back(g):
        _accum(a, g * out)

    return _from_op(out, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")

    def back(g):
        _accum(a, g / a.data)

    return _from_op(out, (a,), back, "log")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if _corrupt_matmul_adjoint:
            da = da * 1.01
        _accum(a, _unbroadcast(da, a.data.shape))
        if b.ndim == 2 and a.ndim > 2:
            k = a.data.shape[-1]
            db = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
        else:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(b, db)

    return _from_op(data, (a, b), back, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction for stability."""
    if x.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _from_op(out, (x,), back, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Population variance; a last-axis extent of 1 normalizes to zeros.
    """
    if eps <= 0:
        raise ShapeError("layernorm eps must be positive")
    gain = _as_tensor(gain, x)
    bias = _as_tensor(bias, x)
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def back(g):
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmean = (-dxhat * inv).sum(axis=-1, keepdims=True)
        dx = dxhat * inv + dvar * (2.0 / d) * xc + dmean / d
        _accum(x, dx)
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))

    return _from_op(out, (x, gain, bias), back, "layernorm")


# -- convolutions -------------------------------------------------------------


def _conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (C,T) or (N,C,T) with kernels ``w`` (O,C,K)."""
    x, w = _binary(x, w)
    single = x.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: signal {x.shape}, kernels {w.shape}")
    n, c, t = xd.shape
    o, cw, k = w.data.shape
    if cw != c:
        raise ShapeError(f"conv1d channel mismatch: signal {c}, kernels {cw}")
    if stride < 1 or k < 1:
        raise ShapeError(f"conv1d: invalid stride {stride} or kernel {k}")
    if k > t + 2 * padding:
        raise ShapeError(f"conv1d kernel {k} exceeds padded length {t + 2 * padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    to = _conv_out_len(t, k, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * to, c * k)
    wm = w.data.reshape(o, c * k)
    out = (cols @ wm.T).reshape(n, to, o).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[:, None]

    def back(g):
        gd = g[None] if single else g
        gm = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(n * to, o)
        if w.requires_grad:
            _accum(w, (gm.T @ cols).reshape(o, c, k))
        if b is not None and b.requires_grad:
            _accum(b, gd.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, to, c, k).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            span = (to - 1) * stride + 1
            for kk in range(k):
                dxp[:, :, kk:kk + span:stride] += dcols[:, :, :, kk]
            dx = dxp[:, :, padding:padding + t] if padding else dxp
            _accum(x, dx[0] if single else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(out[0] if single else out, parents, back, "conv1d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (C,H,W) or (N,C,H,W) with kernels ``w`` (O,C,KH,KW)."""
    x, w = _binary(x, w)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: image {x.shape}, kernels {w.shape}")
    n, c, h, wd_ = xd.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: image {c}, kernels {cw}")
    if stride < 1 or kh < 1 or kw < 1:
        raise ShapeError(f"conv2d: invalid stride {stride} or kernel {kh}x{kw}")
    if kh > h + 2 * padding or kw > wd_ + 2 * padding:
        raise ShapeError("conv2d kernel exceeds padded image")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = _conv_out_len(h, kh, stride, padding)
    wo = _conv_out_len(wd_, kw, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wm = w.data.reshape(o, c * kh * kw)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[:, None, None]

    def back(g):
        gd = g[None] if single else g
        gm = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        if w.requires_grad:
            _accum(w, (gm.T @ cols).reshape(o, c, kh, kw))
        if b is not None and b.requires_grad:
            _accum(b, gd.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            hspan = (ho - 1) * stride + 1
            wspan = (wo - 1) * stride + 1
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + hspan:stride, kj:kj + wspan:stride] += dcols[:, :, :, :, ki, kj]
            dx = dxp[:, :, padding:padding + h, padding:padding + wd_] if padding else dxp
            _accum(x, dx[0] if single else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(out[0] if single else out, parents, back, "conv2d")


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k-by-k average pooling of (N,C,H,W) or (C,H,W)."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: {h}x{w} not divisible by {k}")
    out = xd.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        gd = g[None] if single else g
        gx = np.broadcast_to(gd[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        gx = gx.reshape(n, c, h, w)
        _accum(x, gx[0] if single else gx)

    return _from_op(out[0] if single else out, (x,), back, "avgpool2d")


# -- reductions and shape ops --------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _from_op(np.asarray(out), (x,), back, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else int(np.prod([x.data.shape[a] for a in axis]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / count)

    return _from_op(np.asarray(out), (x,), back, "mean")


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient routes to the first argmax (row-major)."""
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("reduce_max supports a single axis or None")
    out = x.data.max(axis=axis, keepdims=keepdims)

    def back(g):
        mask = np.zeros_like(x.data)
        if axis is None:
            mask.reshape(-1)[np.argmax(x.data)] = 1.0
            _accum(x, mask * g)
        else:
            idx = np.argmax(x.data, axis=axis)
            np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, mask * gg)

    return _from_op(np.asarray(out), (x,), back, "max")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            _accum(t, g[tuple(sl)])
            start += size

    return _from_op(data, tuple(tensors), back, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def back(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op(data, (x,), back, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    data = np.transpose(x.data, axes)

    def back(g):
        _accum(x, np.transpose(g, inv))

    return _from_op(data, (x,), back, "transpose")


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _from_op(data, (x,), back, "take")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``, keeping the axis."""
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _from_op(data, (x,), back, "narrow")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Pick x[i, indices[i]] from a 2-d tensor; used for label lookup."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise ShapeError(f"gather_rows: {x.shape} with {idx.shape}")
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accum(x, gx)

    return _from_op(data, (x,), back, "gather_rows")


# -- gradient checking --------------------------------------------------------


@dataclasses.dataclass
class GradcheckReport:
    per_param: dict
    tol: float
    passed: bool
    max_err: float
    worst_param: str

    def __str__(self):
        lines = [f"gradcheck: {'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_err:.3e}, tol {self.tol:.1e}, worst {self.worst_param})"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {err:.3e}  {name}")
        return "\n".join(lines)


def gradcheck(f, params: dict, eps: float = 1e-6, tol: float = 1e-5, floor: float = 1e-5) -> GradcheckReport:
    """Compare reverse-mode adjoints of ``f()`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` (name -> float64
    Tensor) returning a scalar Tensor. The relative error denominator is
    floored at ``floor`` so near-zero gradients compare absolutely; the
    floor sits well above central-difference roundoff (~|f|*1e-16/eps)
    while leaving genuinely wrong adjoints orders of magnitude outside
    any tolerance.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ShapeError(f"gradcheck requires float64 params, got {p.data.dtype} for {name}")
        p.grad = None

    with no_grad():
        y0 = float(f().data)
        y1 = float(f().data)
    if y0 != y1:
        raise NondeterministicError(f"two forward evaluations differ: {y0!r} vs {y1!r}")

    loss = f()
    backward(loss)

    per_param = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    worst_param = max(per_param, key=per_param.get) if per_param else ""
    return GradcheckReport(per_param, tol, max_err <= tol, max_err, worst_param)
