"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every differentiable quantity is a :class:`Value` wrapping a float64
ndarray.  Operations record parent links and a backward closure on the
output node; creation order doubles as a topological order (a node's id
is always greater than its parents' ids), so ``backward`` walks reachable
nodes once, in descending id order.  The graph is rebuilt on every
forward pass; nothing persists between iterations.

Conventions, fixed on purpose:

* float64 everywhere, no mixed precision;
* ReLU subgradient at 0 is 0;
* no implicit broadcasting between arrays -- operands must have identical
  shapes, except that one side of add/sub/mul/div may be a scalar.
"""

from __future__ import annotations

import numpy as np

_next_id = 0


def _take_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Value:
    """A node in the computation graph: float64 data, optional grad."""

    __slots__ = ("data", "grad", "tracked", "_parents", "_backward", "_id")

    def __init__(self, data, tracked: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.tracked = tracked
        self._parents: tuple[Value, ...] = ()
        self._backward = None
        self._id = _take_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, tracked={self.tracked})"


def _make(data: np.ndarray, parents: tuple[Value, ...], backward) -> Value:
    """Wrap an op result; record the closure only if a parent is tracked."""
    out = Value(data)
    if any(p.tracked for p in parents):
        out.tracked = True
        out._parents = tuple(p for p in parents if p.tracked)
        out._backward = backward
    return out


def _accum(node: Value, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def backward(loss: Value) -> None:
    """Populate gradients of all tracked leaves reachable from ``loss``.

    ``loss`` must be scalar (a single element).  Leaf gradients accumulate
    across repeated calls; call :meth:`Value.zero_grad` between updates.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        return

    # Reachable tracked subgraph, found without recursion.
    nodes: dict[int, Value] = {}
    stack = [loss]
    while stack:
        v = stack.pop()
        if v._id in nodes:
            continue
        nodes[v._id] = v
        stack.extend(v._parents)

    # Internal grads are per-call scratch; leaf grads persist/accumulate.
    for v in nodes.values():
        if not v.is_leaf():
            v.grad = None

    _accum(loss, np.ones_like(loss.data))
    # Descending id = reverse topological order: parents have smaller ids.
    for vid in sorted(nodes, reverse=True):
        v = nodes[vid]
        if v._backward is not None and v.grad is not None:
            v._backward(v.grad)


def _check_same_shape(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_shapes_ok(a: Value, b: Value, op: str) -> None:
    # Identical shapes, or one operand scalar; nothing else.
    if a.data.size == 1 or b.data.size == 1:
        return
    _check_same_shape(a, b, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape in ((), (1,)) else np.sum(g, axis=0)


# -- elementwise suite -------------------------------------------------------

def add(a: Value, b: Value) -> Value:
    _binary_shapes_ok(a, b, "add")

    def bw(g):
        if a.tracked:
            _accum(a, _unbroadcast(g, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Value, b: Value) -> Value:
    _binary_shapes_ok(a, b, "sub")

    def bw(g):
        if a.tracked:
            _accum(a, _unbroadcast(g, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    """Elementwise product; each operand's grad routes through the other."""
    _binary_shapes_ok(a, b, "mul")
    a_data, b_data = a.data, b.data

    def bw(g):
        if a.tracked:
            _accum(a, _unbroadcast(g * b_data, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g * a_data, b.shape))

    return _make(a_data * b_data, (a, b), bw)


def div(a: Value, b: Value) -> Value:
    _binary_shapes_ok(a, b, "div")
    a_data, b_data = a.data, b.data

    def bw(g):
        if a.tracked:
            _accum(a, _unbroadcast(g / b_data, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(-g * a_data / (b_data * b_data), b.shape))

    return _make(a_data / b_data, (a, b), bw)


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def add_const(a: Value, c: float) -> Value:
    c = float(c)

    def bw(g):
        _accum(a, g)

    return _make(a.data + c, (a,), bw)


def relu(a: Value) -> Value:
    mask = a.data > 0  # subgradient at 0 is 0

    def bw(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def exp(a: Value) -> Value:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def pow_scalar(a: Value, p: float) -> Value:
    p = float(p)
    a_data = a.data

    def bw(g):
        _accum(a, g * p * np.power(a_data, p - 1.0))

    return _make(np.power(a_data, p), (a,), bw)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Value, shape) -> Value:
    old = a.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), bw)


def flatten(a: Value) -> Value:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def take(a: Value, axis: int, index: int) -> Value:
    """Slice out one index along an axis; grad scatters back into the slot."""
    sel = [slice(None)] * a.data.ndim
    sel[axis] = index
    sel = tuple(sel)

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sel] += g

    return _make(np.ascontiguousarray(a.data[sel]), (a,), bw)


def transpose2d(a: Value) -> Value:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.shape}")

    def bw(g):
        _accum(a, g.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), bw)


# -- reductions --------------------------------------------------------------

def reduce_sum(a: Value, axis: int | None = None) -> Value:
    if a.data.size == 0:
        raise ValueError("reduce_sum over an empty array")
    if axis is None:
        def bw(g):
            _accum(a, np.broadcast_to(g, a.shape).copy())
        return _make(np.sum(a.data).reshape(()), (a,), bw)

    def bw(g):
        _accum(a, np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis))

    return _make(np.sum(a.data, axis=axis), (a,), bw)


def global_mean(a: Value) -> Value:
    if a.data.size == 0:
        raise ValueError("global_mean of an empty array")
    return scale(reduce_sum(a), 1.0 / a.data.size)


def mean_axis(a: Value, axis: int) -> Value:
    return scale(reduce_sum(a, axis=axis), 1.0 / a.shape[axis])


# -- softmax -----------------------------------------------------------------

def softmax_over_axis(a: Value, axis: int) -> Value:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax input contains NaN or Inf")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        # dL/dx = y * (g - sum(g*y)) along the softmax axis
        _accum(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


# -- matmul / linear ---------------------------------------------------------

def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def bw(g):
        if a.tracked:
            _accum(a, g @ b_data.T)
        if b.tracked:
            _accum(b, a_data.T @ g)

    return _make(a_data @ b_data, (a, b), bw)


def linear(x: Value, weight: Value, bias: Value) -> Value:
    """x[B,In] @ weight[In,Out] + bias[Out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"linear: x{x.shape} incompatible with weight{weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias{bias.shape} vs out dim {weight.shape[1]}")
    x_data, w_data = x.data, weight.data

    def bw(g):
        if x.tracked:
            _accum(x, g @ w_data.T)
        if weight.tracked:
            _accum(weight, x_data.T @ g)
        if bias.tracked:
            _accum(bias, np.sum(g, axis=0))

    return _make(x_data @ w_data + bias.data, (x, weight, bias), bw)


# -- conv / pooling ----------------------------------------------------------

def conv2d(x: Value, kernel: Value, stride: int = 1, padding: int = 0) -> Value:
    """Cross-correlation of x[B,Cin,H,W] with kernel[Cout,Cin,k,k]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d: need 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b_n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise ValueError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # windows[B,Cin,H',W',k,k] viewed without copy, then one big tensordot
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    _, _, ho, wo = out.shape
    k_data = kernel.data

    def bw(g):
        if kernel.tracked:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            _accum(kernel, gk)
        if x.tracked:
            # t[B,H',W',Cin,k,k]: per-window contribution, then k*k slice adds
            t = np.tensordot(g, k_data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            _accum(x, gxp)

    return _make(out, (x, kernel), bw)


def avg_pool2d(x: Value, k: int) -> Value:
    """Non-overlapping k-by-k mean pooling."""
    if x.data.ndim != 4:
        raise ValueError(f"avg_pool2d: need 4-d input, got {x.shape}")
    b_n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"avg_pool2d: window {k} does not tile {h}x{w}")
    blocks = x.data.reshape(b_n, c, h // k, k, w // k, k)
    out = blocks.mean(axis=(3, 5))

    def bw(g):
        ge = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accum(x, ge)

    return _make(out, (x,), bw)


# -- losses ------------------------------------------------------------------

def mse_loss(a: Value, b: Value) -> Value:
    """Mean of squared differences over all elements."""
    _check_same_shape(a, b, "mse_loss")
    d = a.data - b.data
    n = d.size

    def bw(g):
        base = (2.0 / n) * d * g
        if a.tracked:
            _accum(a, base)
        if b.tracked:
            _accum(b, -base)

    return _make(np.array(np.mean(d * d)), (a, b), bw)


def cross_entropy_loss(logits: Value, targets: np.ndarray) -> Value:
    """Mean cross-entropy of logits[B,C] against integer targets[B].

    Applies log-softmax internally.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be [B,C], got {logits.shape}")
    t = np.asarray(targets)
    b_n, c = logits.shape
    if t.shape != (b_n,):
        raise ValueError(f"cross_entropy: targets shape {t.shape} vs batch {b_n}")
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"cross_entropy: target outside [0, {c})")
    z = logits.data
    zmax = np.max(z, axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    losses = lse - z[np.arange(b_n), t]
    probs = np.exp(z - zmax)
    probs /= np.sum(probs, axis=1, keepdims=True)

    def bw(g):
        gb = probs.copy()
        gb[np.arange(b_n), t] -= 1.0
        _accum(logits, (float(np.asarray(g).reshape(())) / b_n) * gb)

    return _make(np.array(np.mean(losses)), (logits,), bw)
