"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the segmentation networks need are implemented.  Image
tensors are NCHW, 32-bit floats in production; building a graph in float64
is supported for finite-difference verification.
"""

import numpy as np

from .. import _kernels as K

# incremented once per op; inference tests assert truncated forward passes
# build strictly smaller graphs
_op_count = 0


def op_count():
    return _op_count


def reset_op_count():
    global _op_count
    _op_count = 0


class Tensor:
    """A value in the computation graph.

    `data` is always a numpy array.  Gradients accumulate into `grad`
    during backward(); parameters keep their grad buffer across steps
    (zeroed by the optimizer loop), intermediate nodes get one on demand.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _make(data, parents, backward_fn):
    global _op_count
    _op_count += 1
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss):
    """Populate gradients of everything `loss` depends on.

    `loss` must be scalar.  Parameters not on the path are left untouched
    (their grad buffers stay zero).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # iterative post-order topological sort
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        if node is not loss:
            node.grad = None  # free intermediate grads as we go


# ---------------------------------------------------------------------------
# layer ops


def conv2d(x, w, stride=1, padding=None):
    """2-D convolution, NCHW x OIHW.  Same-size semantics: padding = k//2,
    output spatial dims = ceil(in/stride)."""
    k = w.data.shape[2]
    if k not in (1, 3, 7):
        raise ValueError(f"unsupported kernel size {k}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if padding is None:
        padding = k // 2
    elif padding != k // 2:
        raise ValueError(f"padding must be {k // 2} for kernel {k}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"channel mismatch: input {x.data.shape[1]} vs weights {w.data.shape[1]}")
    out = K.conv2d_forward(x.data, w.data, stride, padding)

    def bwd(g):
        gx, gw = K.conv2d_backward(np.ascontiguousarray(g), x.data, w.data,
                                   stride, padding,
                                   x.requires_grad, w.requires_grad)
        return gx, gw

    return _make(out, (x, w), bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Channel-wise batch normalization.

    Train mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, reference momentum rule
    running = (1-m)*running + m*batch).  Eval mode uses the buffers.
    """
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("gamma/beta must match channel count")
    axes = (0, 2, 3)
    m = n * h * w
    if m == 0:
        raise ValueError("batch_norm on an empty batch")
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * istd[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        istd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * istd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        if not x.requires_grad:
            return None, dgamma, dbeta
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            mu1 = dxhat.mean(axis=axes)
            mu2 = (dxhat * xhat).mean(axis=axes)
            dx = istd[None, :, None, None] * (
                dxhat - mu1[None, :, None, None] - xhat * mu2[None, :, None, None])
        else:
            dx = dxhat * istd[None, :, None, None]
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def bwd(g):
        return (np.where(mask, g, 0),)

    return _make(out, (x,), bwd)


def max_pool3x3(x):
    """3x3 max pooling, stride 2, padding 1 (the ResNet stem pool).

    Gradient goes to the argmax; ties break toward the lowest linear index
    of the input.
    """
    n, c, h, w = x.data.shape
    oh = (h + 2 - 3) // 2 + 1
    ow = (w + 2 - 3) // 2 + 1
    neg = np.finfo(x.dtype).min
    xp = np.full((n, c, h + 2, w + 2), neg, dtype=x.dtype)
    xp[:, :, 1:h + 1, 1:w + 1] = x.data
    windows = np.stack([
        xp[:, :, ky:ky + 2 * oh - 1:2, kx:kx + 2 * ow - 1:2]
        for ky in range(3) for kx in range(3)
    ])
    # first occurrence along the stacked (ky,kx) axis is the lowest linear
    # index within the window
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bwd(g):
        gp = np.zeros_like(xp)
        for j in range(9):
            ky, kx = divmod(j, 3)
            view = gp[:, :, ky:ky + 2 * oh - 1:2, kx:kx + 2 * ow - 1:2]
            view += np.where(arg == j, g, 0)
        return (gp[:, :, 1:h + 1, 1:w + 1],)

    return _make(np.ascontiguousarray(out), (x,), bwd)


def concat_channels(a, b):
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat spatial/batch mismatch: {a.data.shape} vs {b.data.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def bwd(g):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return _make(out, (a, b), bwd)


_resize_cache = {}


def _resize_matrix(n_in, n_out, dtype):
    """Row-stochastic 1-D bilinear interpolation matrix (n_out x n_in),
    half-pixel-center alignment with edge clamping."""
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _resize_cache.get(key)
    if mat is None:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = src - i0
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), 1.0 - f)
        np.add.at(mat, (rows, i1), f)
        mat = mat.astype(dtype)
        _resize_cache[key] = mat
    return mat


def bilinear_upsample(x, out_hw):
    """Bilinear resize to `out_hw` (each dim >= input).  Separable: applied
    as interpolation matrices over H then W, which makes the backward pass
    two transposed matmuls."""
    n, c, h, w = x.data.shape
    oh, ow = out_hw
    if oh < h or ow < w:
        raise ValueError(f"upsample target {out_hw} smaller than input {(h, w)}")
    rh = _resize_matrix(h, oh, x.dtype)
    rw = _resize_matrix(w, ow, x.dtype)
    x3 = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(rh, x3), rw.T).reshape(n, c, oh, ow)

    def bwd(g):
        g3 = g.reshape(n * c, oh, ow)
        gx = np.matmul(np.matmul(rh.T, g3), rw).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), bwd)


def softmax_channels(x):
    """Softmax over the channel axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), bwd)


# ---------------------------------------------------------------------------
# elementwise / reduction ops (loss plumbing)


def _coerce(other, dtype):
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    b = _coerce(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bwd)


def mul(a, b):
    b = _coerce(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def log(a):
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd)


def clamp(a, lo, hi):
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (np.where(inside, g, 0),)

    return _make(out, (a,), bwd)


def pow_const(a, exponent):
    out = a.data ** exponent

    def bwd(g):
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), bwd)


def sum_channels(a):
    """Sum over the channel axis (axis 1), dropping it."""
    out = a.data.sum(axis=1)

    def bwd(g):
        return (np.broadcast_to(g[:, None], a.data.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), bwd)


def mean_all(a):
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    size = a.data.size

    def bwd(g):
        return (np.full(a.data.shape, g / size, dtype=a.dtype),)

    return _make(out, (a,), bwd)


def index_scalar(vec, i):
    """Pick element i of a 1-D tensor as a scalar tensor."""
    out = np.asarray(vec.data[i], dtype=vec.dtype)

    def bwd(g):
        gv = np.zeros_like(vec.data)
        gv[i] = g
        return (gv,)

    return _make(out, (vec,), bwd)
