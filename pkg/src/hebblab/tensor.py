"""Reverse-mode automatic differentiation on numpy arrays.

The graph is implicit: every operation returns a new :class:`Tensor` that
holds references to its parent tensors plus a closure mapping the output
gradient to parent-gradient contributions.  ``Tensor.backward`` walks the
graph once in reverse topological order (parent order is fixed at op
construction, so the visit order is deterministic) and accumulates into
``.grad``.

Precision is a run-level switch (`set_default_dtype` / the `default_dtype`
context manager), not a per-tensor property, so a graph stays homogeneous.
Gradient verification always runs at 64 bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_debug_checks = False


def set_default_dtype(name: str) -> None:
    """Set the run-level precision: "float32" (training) or "float64"."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; choose from {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def default_dtype(name: str):
    """Temporarily switch the run-level precision."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every primitive asserts its forward output is finite."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return data


class Tensor:
    """A numpy array plus an optional position in the differentiation graph.

    Leaf tensors are created directly (``Tensor(data, requires_grad=True)``
    for parameters); interior nodes are created by the ops in this module.
    Tensors are treated as immutable once produced; the only in-place
    mutation is gradient accumulation during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder over parent edges; inputs precede consumers."""
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = object.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    # Constant subgraphs are pruned so eval-mode forwards build no graph.
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy on first accumulation: closures may hand the same array object to
    # several parents (e.g. add passes its output gradient through).
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    _require(a.shape == b.shape, f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _node(_checked(a.data + b.data, "add"), (a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _node(_checked(a.data - b.data, "sub"), (a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -g)
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _node(_checked(a.data * b.data, "mul"), (a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * b_data)
            if b.requires_grad:
                _accum(b, g * a_data)
        out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _node(_checked(a.data * s, "scale"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g * s)
        out._backward = bwd
    return out


def shift(a: Tensor, c: float) -> Tensor:
    out = _node(_checked(a.data + float(c), "shift"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g)
        out._backward = bwd
    return out


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """a + c for a non-differentiable constant array of the same shape."""
    _require(a.shape == np.shape(c), f"add_const: shape mismatch {a.shape} vs {np.shape(c)}")
    out = _node(_checked(a.data + c, "add_const"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g)
        out._backward = bwd
    return out


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """a * c elementwise for a non-differentiable constant array."""
    _require(a.shape == np.shape(c), f"mul_const: shape mismatch {a.shape} vs {np.shape(c)}")
    out = _node(_checked(a.data * c, "mul_const"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g * c)
        out._backward = bwd
    return out


def square(a: Tensor) -> Tensor:
    out = _node(_checked(a.data * a.data, "square"), (a,))
    if out.requires_grad:
        a_data = a.data
        def bwd(g):
            _accum(a, 2.0 * a_data * g)
        out._backward = bwd
    return out


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        root = np.sqrt(a.data)
    out = _node(_checked(root, "sqrt"), (a,))
    if out.requires_grad:
        def bwd(g):
            # Subgradient 0 at the origin, mirroring the relu convention.
            denom = 2.0 * root
            ga = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
            _accum(a, ga)
        out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    out = _node(_checked(out_data, "relu"), (a,))
    if out.requires_grad:
        mask = a.data > 0  # subgradient at exactly 0 is 0
        def bwd(g):
            _accum(a, g * mask)
        out._backward = bwd
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = _node(_checked(out_data, "sigmoid"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g * out_data * (1.0 - out_data))
        out._backward = bwd
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g.reshape(a.data.shape))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = _node(_checked(np.sum(a.data), "sum_all"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, np.full(a.data.shape, g, dtype=a.data.dtype))
        out._backward = bwd
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _node(_checked(np.mean(a.data), "mean_all"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, np.full(a.data.shape, g / n, dtype=a.data.dtype))
        out._backward = bwd
    return out


def _unreduce(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _node(_checked(np.sum(a.data, axis=axes), "sum_axes"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unreduce(g, a.data.shape, axes))
        out._backward = bwd
    return out


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = _node(_checked(np.mean(a.data, axis=axes), "mean_axes"), (a,))
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unreduce(g / count, a.data.shape, axes))
        out._backward = bwd
    return out


def spatial_max(a: Tensor) -> Tensor:
    """Max over the two trailing spatial axes of an [N, C, H, W] tensor.

    Gradient routes to the first maximal position per (n, c) map.
    """
    _require(a.data.ndim == 4, f"spatial_max: expected rank-4 input, got {a.shape}")
    n, c, h, w = a.data.shape
    flat = a.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out_data = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    out = _node(_checked(out_data, "spatial_max"), (a,))
    if out.requires_grad:
        def bwd(g):
            gflat = np.zeros((n, c, h * w), dtype=a.data.dtype)
            np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
            _accum(a, gflat.reshape(n, c, h, w))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# affine / convolutional layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _require(x.data.ndim == 2 and w.data.ndim == 2,
             f"dense: expected rank-2 input/weight, got {x.shape} / {w.shape}")
    _require(x.shape[1] == w.shape[0],
             f"dense: inner extents disagree, input {x.shape} vs weight {w.shape}")
    _require(b.shape == (w.shape[1],),
             f"dense: bias shape {b.shape} does not match output extent {w.shape[1]}")
    out = _node(_checked(x.data @ w.data + b.data, "dense"), (x, w, b))
    if out.requires_grad:
        x_data, w_data = x.data, w.data
        def bwd(g):
            if x.requires_grad:
                _accum(x, g @ w_data.T)
            if w.requires_grad:
                _accum(w, x_data.T @ g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))
        out._backward = bwd
    return out


def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [N, C, Ho, Wo, K, K] strided view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, C_in, H, W] with [C_out, C_in, K, K] filters."""
    _require(x.data.ndim == 4, f"conv2d: expected rank-4 input, got {x.shape}")
    _require(w.data.ndim == 4, f"conv2d: expected rank-4 weight, got {w.shape}")
    n, c_in, h, wdt = x.data.shape
    c_out, wc_in, k, k2 = w.data.shape
    _require(k == k2 and k >= 1, f"conv2d: kernel must be square and K >= 1, got {w.shape}")
    _require(stride >= 1 and padding >= 0, "conv2d: stride must be >= 1 and padding >= 0")
    _require(wc_in == c_in,
             f"conv2d: input has {c_in} channels but weight expects {wc_in}")
    _require(b.shape == (c_out,),
             f"conv2d: bias shape {b.shape} does not match {c_out} output channels")
    span_h, span_w = h + 2 * padding - k, wdt + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"conv2d: output size not a positive integer for input {x.shape}, "
            f"kernel {k}, stride {stride}, padding {padding}")
    h_out, w_out = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    windows = _conv_windows(xp, k, stride)
    out_data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]
    out = _node(_checked(out_data, "conv2d"), (x, w, b))

    if out.requires_grad:
        w_data = w.data
        def bwd(g):
            if w.requires_grad:
                gperm = g.transpose(0, 2, 3, 1)
                _accum(w, np.tensordot(gperm, windows, axes=([0, 1, 2], [0, 2, 3])))
            if b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                # [N, Ho, Wo, C_in, K, K] contributions scattered back onto
                # the padded input; the K*K loop keeps the scatter order fixed.
                dwin = np.tensordot(g, w_data, axes=([1], [0]))
                dxp = np.zeros((n, c_in, h + 2 * padding, wdt + 2 * padding),
                               dtype=g.dtype)
                dwin = dwin.transpose(0, 3, 1, 2, 4, 5)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * h_out:stride,
                            j:j + stride * w_out:stride] += dwin[:, :, :, :, i, j]
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                _accum(x, dxp)
        out._backward = bwd
    return out


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    _require(x.data.ndim == 4, f"max_pool2d: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.data.shape
    _require(window >= 1 and stride >= 1, "max_pool2d: window and stride must be >= 1")
    span_h, span_w = h - window, w - window
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"max_pool2d: output size not a positive integer for input {x.shape}, "
            f"window {window}, stride {stride}")
    h_out, w_out = span_h // stride + 1, span_w // stride + 1

    win = _conv_windows(x.data, window, stride)  # [N, C, Ho, Wo, K, K]
    flat = win.reshape(n, c, h_out, w_out, window * window)
    idx = flat.argmax(axis=4)  # first max wins: deterministic tie-break
    out_data = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    out = _node(_checked(out_data, "max_pool2d"), (x,))

    if out.requires_grad:
        def bwd(g):
            di, dj = np.divmod(idx, window)
            oy = np.arange(h_out)[None, None, :, None] * stride
            ox = np.arange(w_out)[None, None, None, :] * stride
            rows = oy + di
            cols = ox + dj
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            ni = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            # add.at: overlapping windows accumulate in a fixed order
            np.add.at(gx, (ni, ci, rows * w + cols), g)
            _accum(x, gx.reshape(n, c, h, w))
        out._backward = bwd
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    _require(x.data.ndim == 4, f"global_avg_pool: expected rank-4 input, got {x.shape}")
    return mean_axes(x, (2, 3))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormStats:
    """Running mean/variance of one batch-norm layer (not graph parameters)."""

    __slots__ = ("running_mean", "running_var", "momentum")

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or get_default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = BN_MOMENTUM

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.running_mean.copy(), self.running_var.copy()

    def restore(self, snap: tuple[np.ndarray, np.ndarray]) -> None:
        self.running_mean = snap[0].copy()
        self.running_var = snap[1].copy()


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                 training: bool) -> Tensor:
    """Per-channel batch norm over (N, H, W); biased variance throughout.

    Training mode updates the running statistics in place with EMA momentum
    ``stats.momentum`` and requires N >= 2.
    """
    _require(x.data.ndim == 4, f"batch_norm2d: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.data.shape
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"batch_norm2d: gamma/beta must have shape ({c},)")
    if training:
        if n < 2:
            raise ValueError("batch_norm2d: training mode requires a batch of N >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.running_mean *= 1.0 - m
        stats.running_mean += m * mean.astype(stats.running_mean.dtype)
        stats.running_var *= 1.0 - m
        stats.running_var += m * var.astype(stats.running_var.dtype)
    else:
        mean = stats.running_mean.astype(x.data.dtype)
        var = stats.running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _node(_checked(out_data, "batch_norm2d"), (x, gamma, beta))

    if out.requires_grad:
        gamma_data = gamma.data
        count = n * h * w
        def bwd(g):
            gsum = g.sum(axis=(0, 2, 3))
            gx_sum = (g * xhat).sum(axis=(0, 2, 3))
            if gamma.requires_grad:
                _accum(gamma, gx_sum)
            if beta.requires_grad:
                _accum(beta, gsum)
            if x.requires_grad:
                coeff = (gamma_data * inv_std)[None, :, None, None]
                if training:
                    gx = coeff * (g - gsum[None, :, None, None] / count
                                  - xhat * gx_sum[None, :, None, None] / count)
                else:
                    gx = coeff * g
                _accum(x, gx)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# classification head helpers
# ---------------------------------------------------------------------------


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of [N, K] logits, stabilized by max subtraction."""
    _require(logits.data.ndim == 2, f"log_softmax: expected rank-2 input, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    out_data = z - lse
    out = _node(_checked(out_data, "log_softmax"), (logits,))
    if out.requires_grad:
        softmax = np.exp(out_data)
        def bwd(g):
            _accum(logits, g - softmax * g.sum(axis=1, keepdims=True))
        out._backward = bwd
    return out


def pick(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select a[i, indices[i]] for each row i of an [N, K] tensor."""
    _require(a.data.ndim == 2, f"pick: expected rank-2 input, got {a.shape}")
    n, k = a.data.shape
    idx = np.asarray(indices)
    _require(idx.shape == (n,), f"pick: expected {n} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"pick: index out of range [0, {k})")
    rows = np.arange(n)
    out = _node(a.data[rows, idx], (a,))
    if out.requires_grad:
        def bwd(g):
            ga = np.zeros_like(a.data)
            ga[rows, idx] = g
            _accum(a, ga)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor],
                    eps: float | Sequence[float] = 1e-5,
                    max_elements_per_param: int | None = None,
                    seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild the forward graph on every call and return a scalar;
    its output is perturbed through the ``params`` leaf tensors in place.
    Returns the maximum relative error max |a - n| / max(|a|, |n|, 1e-8).

    ``eps`` may be a sequence of step sizes: each element then only needs to
    match at one of them (central differences have a per-magnitude validity
    window; a large step can straddle a relu kink while a small one drowns
    tiny gradients in rounding noise).  A genuinely wrong gradient mismatches
    at every step.  When ``max_elements_per_param`` is set, a deterministic
    subsample of elements is probed per parameter tensor.
    """
    eps_values = (eps,) if isinstance(eps, float) else tuple(eps)
    params = list(params)
    out = f()
    if out.data.size != 1:
        raise ValueError("check_gradients: f() must return a scalar output")
    for p in params:
        p.grad = None
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            probe = np.sort(rng.choice(n, size=max_elements_per_param, replace=False))
        else:
            probe = np.arange(n)
        for i in probe:
            orig = flat[i]
            err = None
            for step in eps_values:
                flat[i] = orig + step
                f_plus = float(f().data)
                flat[i] = orig - step
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                this = abs(float(gflat[i]) - numeric) / max(abs(float(gflat[i])),
                                                            abs(numeric), 1e-8)
                err = this if err is None else min(err, this)
                if err < 1e-7:
                    break
            flat[i] = orig
            max_err = max(max_err, err)
    return max_err
