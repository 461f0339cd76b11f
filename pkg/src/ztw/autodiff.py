"""Dense f64 tensors with reverse-mode differentiation.

A forward pass builds an eager graph: every op returns a new Tensor that
remembers its parents and a closure that routes the output gradient back
to them. `backward()` on a scalar walks the graph once in reverse
topological order, so gradient accumulation order is fixed and two runs
on the same graph produce bit-identical grads. Graphs are per-forward and
garbage-collected with their tensors; nothing persists across batches.

A graph and its tensors belong to one thread. Distinct graphs over
distinct inputs may run concurrently; there is no shared mutable state.
"""

from __future__ import annotations

import numpy as np

from .exceptions import LabelError, NumericError, ShapeError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array, optionally tracked by the gradient graph.

    `data` is row-major; `grad` (same shape) is populated by `backward()`
    for every reachable tensor with `requires_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # operator sugar used throughout the package
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Visits each node exactly once, in reverse topological order;
        accumulates into `.grad` of every requires_grad tensor reachable
        from this node.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {self.shape}")
        order = _topo_order(self)
        for t in order:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _topo_order(root: Tensor) -> list:
    """Iterative DFS post-order; deterministic for a fixed graph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Assemble an op output; constant subgraphs are pruned eagerly."""
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = parents
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad and t.grad is not None:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log requires strictly positive inputs")

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(x) / (1.0 + np.exp(x)))
        _accum(a, g * sig)

    return _make(data, (a,), backward, "softplus")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backward, "concat")


def stop_gradient(t: Tensor) -> Tensor:
    """Value passthrough that contributes zero gradient to its ancestors."""
    out = Tensor(t.data, requires_grad=False)
    out._op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# classification losses


def log_softmax(z: Tensor) -> Tensor:
    """Max-shifted log softmax along the last axis.

    out_i = z_i - max_j z_j - ln(sum_j exp(z_j - max_j z_j)); exp(out)
    sums to 1 along the last axis for any finite input.
    """
    if z.data.shape[-1] < 2:
        raise ShapeError(f"log_softmax needs last axis >= 2, got shape {z.data.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax input contains non-finite values")
    zmax = z.data.max(axis=-1, keepdims=True)
    shifted = z.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(g):
        soft = np.exp(data)
        _accum(z, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(data, (z,), backward, "log_softmax")


def softmax(z: Tensor) -> Tensor:
    return texp(log_softmax(z))


def cross_entropy(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood: -(1/N) * sum_n log_probs[n, labels[n]]."""
    labels = np.asarray(labels)
    if log_probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] log-probs, got {log_probs.shape}")
    n, k = log_probs.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    bad = np.where((labels < 0) | (labels >= k))[0]
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {k})")
    picked = log_probs.data[np.arange(n), labels]
    data = np.array(-picked.mean())

    def backward(g):
        if log_probs.requires_grad and log_probs.grad is not None:
            gi = np.zeros_like(log_probs.data)
            gi[np.arange(n), labels] = -float(g) / n
            log_probs.grad += gi

    return _make(data, (log_probs,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# spatial ops; inputs are [N, C, H, W]


def _conv_out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution with a square kernel.

    padding="same" pads k//2 zeros on every side (output H = ceil(H/stride)
    for odd k); "valid" pads nothing. Both passes lower onto one dense
    matmul over an explicit patch matrix, so the arithmetic order is fixed
    and the work lands in BLAS.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input, got {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ShapeError(f"conv2d expects square [O,C,k,k] kernel, got {kernel.data.shape}")
    n, c, h, w = x.data.shape
    oc, ic, k, _ = kernel.data.shape
    if ic != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}")
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ShapeError(f"unknown padding mode {padding!r}")
    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.data.shape}, k={k}, stride={stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # patch matrix: [N*oh*ow, C*k*k], one row per output position
    cols = np.empty((n, oh, ow, c, k, k))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                        j:j + stride * ow:stride].transpose(0, 2, 3, 1)
    mat = cols.reshape(n * oh * ow, c * k * k)
    k2d = kernel.data.reshape(oc, c * k * k)
    out = (mat @ k2d.T).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad and kernel.grad is not None:
            kernel.grad += (g2d.T @ mat).reshape(oc, c, k, k)
        if x.requires_grad and x.grad is not None:
            dcols = (g2d @ k2d).reshape(n, oh, ow, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.grad += gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp

    return _make(out, parents, backward, "conv2d")


def _pool_segments(size: int, out: int) -> list:
    """Adaptive window boundaries: segment i covers [i*size//out, ceil)."""
    return [(i * size // out, -((i + 1) * size // -out)) for i in range(out)]


def avg_pool2d(x: Tensor, out_hw: tuple) -> Tensor:
    n, c, h, w = _check_pool(x, out_hw)
    oh, ow = out_hw
    if h % oh == 0 and w % ow == 0:
        kh, kw = h // oh, w // ow
        xr = x.data.reshape(n, c, oh, kh, ow, kw)
        data = xr.mean(axis=(3, 5))

        def backward(g):
            gx = np.broadcast_to(g[:, :, :, None, :, None] / (kh * kw),
                                 (n, c, oh, kh, ow, kw))
            _accum(x, gx.reshape(n, c, h, w))

        return _make(data, (x,), backward, "avg_pool2d")

    hseg, wseg = _pool_segments(h, oh), _pool_segments(w, ow)
    data = np.empty((n, c, oh, ow))
    for i, (h0, h1) in enumerate(hseg):
        for j, (w0, w1) in enumerate(wseg):
            data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hseg):
            for j, (w0, w1) in enumerate(wseg):
                gx[:, :, h0:h1, w0:w1] += (g[:, :, i, j] / ((h1 - h0) * (w1 - w0)))[:, :, None, None]
        _accum(x, gx)

    return _make(data, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, out_hw: tuple) -> Tensor:
    n, c, h, w = _check_pool(x, out_hw)
    oh, ow = out_hw
    if h % oh == 0 and w % ow == 0:
        kh, kw = h // oh, w // ow
        xr = x.data.reshape(n, c, oh, kh, ow, kw).transpose(0, 1, 2, 4, 3, 5)
        flat = xr.reshape(n, c, oh, ow, kh * kw)
        idx = flat.argmax(axis=4)
        data = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

        def backward(g):
            buf = np.zeros_like(flat)
            np.put_along_axis(buf, idx[..., None], g[..., None], axis=4)
            gx = buf.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
            _accum(x, gx.reshape(n, c, h, w))

        return _make(data, (x,), backward, "max_pool2d")

    hseg, wseg = _pool_segments(h, oh), _pool_segments(w, ow)
    data = np.empty((n, c, oh, ow))
    argmaxes = {}
    for i, (h0, h1) in enumerate(hseg):
        for j, (w0, w1) in enumerate(wseg):
            region = x.data[:, :, h0:h1, w0:w1].reshape(n, c, -1)
            am = region.argmax(axis=2)
            argmaxes[(i, j)] = am
            data[:, :, i, j] = np.take_along_axis(region, am[..., None], axis=2)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hseg):
            for j, (w0, w1) in enumerate(wseg):
                sub = np.zeros((n, c, (h1 - h0) * (w1 - w0)))
                np.put_along_axis(sub, argmaxes[(i, j)][..., None], g[:, :, i, j][..., None], axis=2)
                gx[:, :, h0:h1, w0:w1] += sub.reshape(n, c, h1 - h0, w1 - w0)
        _accum(x, gx)

    return _make(data, (x,), backward, "max_pool2d")


def _check_pool(x: Tensor, out_hw: tuple):
    if x.data.ndim != 4:
        raise ShapeError(f"pooling expects [N,C,H,W] input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    oh, ow = out_hw
    if h < oh or w < ow:
        raise ShapeError(f"pool target {out_hw} larger than input spatial size {(h, w)}")
    return n, c, h, w
