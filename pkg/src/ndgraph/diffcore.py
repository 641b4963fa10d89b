"""Reverse-mode automatic differentiation on dense numpy arrays.

Every loss in the package is composed from the primitives below. Each
primitive records its inputs and a backward closure on a tape; calling
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates gradients into the participating tensors.

Precision is controlled globally: 64-bit is the default (and mandatory
for gradient tests), 32-bit is available for training speed via
``set_precision(32)`` or the NDG_PRECISION environment variable.
"""

from __future__ import annotations

import os

import numpy as np

_PRECISION_BITS = 64


class ShapeError(ValueError):
    """Raised when a primitive receives arrays of incompatible extents."""

    def __init__(self, primitive, message):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class NonFiniteError(ArithmeticError):
    """Raised when a gradient or parameter update turns non-finite."""

    def __init__(self, name, what="gradient"):
        super().__init__(f"non-finite {what} for parameter '{name}'")
        self.name = name


def set_precision(bits):
    """Select the element type for newly created tensors (64 or 32)."""
    global _PRECISION_BITS
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")
    _PRECISION_BITS = bits


def precision():
    return _PRECISION_BITS


def float_dtype():
    return np.float64 if _PRECISION_BITS == 64 else np.float32


def apply_env_precision():
    """Honor NDG_PRECISION=64|32 if set (used by the CLI entry point)."""
    val = os.environ.get("NDG_PRECISION")
    if val:
        set_precision(int(val))


class Tensor:
    """A dense array plus the tape links needed for reverse mode.

    ``backward()`` overwrites ``grad`` on every tensor reachable from the
    loss, so re-running it on the same graph is deterministic and needs no
    manual reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor data must be an array-like, not a Tensor")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(float_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # Operator sugar; scalars and arrays are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _node(data, parents, backward_fn):
    """Create an interior node; the closure is dropped when no parent needs it."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=parents if needs else (),
        _backward=backward_fn if needs else None,
    )


def _topo_order(root):
    """Iterative post-order DFS; deterministic for a fixed graph."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``grad`` for every reachable tensor.

    The loss must be scalar. Grads of all reachable nodes are reset first,
    so repeated calls on one graph give identical results.
    """
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss, params):
    """Run backward and return the gradient map over the ``params`` mapping.

    Parameters the loss does not depend on map to zeros.
    """
    backward(loss)
    out = {}
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require gradients")
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


class ValueGraph:
    """A recorded loss computation over a named parameter set.

    Thin handle pairing a scalar root with the parameter map it was built
    from; ``backward()`` may be re-run any number of times and always
    yields the same gradients.
    """

    def __init__(self, loss, params):
        if loss.size != 1:
            raise ShapeError("ValueGraph", f"root must be scalar, got shape {loss.shape}")
        self.loss = loss
        self.params = dict(params)

    def value(self):
        return float(self.loss.data)

    def backward(self):
        return gradients(self.loss, self.params)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _binary(name, a, b, fwd, bwd_a, bwd_b):
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(name, f"operands {a.shape} and {b.shape} do not broadcast")

    def back(g):
        _accumulate(a, _unbroadcast(bwd_a(g), a.shape))
        _accumulate(b, _unbroadcast(bwd_b(g), b.shape))

    return _node(out, (a, b), back)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _binary(
        "div", a, b, np.divide,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def _unary(name, a, out, dfn):
    def back(g):
        _accumulate(a, dfn(g))

    return _node(out, (a,), back)


def neg(a):
    return _unary("neg", a, -a.data, lambda g: -g)


def square(a):
    return _unary("square", a, a.data * a.data, lambda g: g * (2.0 * a.data))


def sqrt(a):
    out = np.sqrt(a.data)
    return _unary("sqrt", a, out, lambda g: g * (0.5 / out))


def absval(a):
    # Subgradient 0 at the kink x = 0.
    return _unary("abs", a, np.abs(a.data), lambda g: g * np.sign(a.data))


def relu(a):
    return _unary("relu", a, np.maximum(a.data, 0.0), lambda g: g * (a.data > 0))


max0 = relu


def leaky_relu(a, slope=0.01):
    out = np.where(a.data > 0, a.data, slope * a.data)
    return _unary("leaky_relu", a, out, lambda g: g * np.where(a.data > 0, 1.0, slope))


def exp(a):
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def sin(a):
    return _unary("sin", a, np.sin(a.data), lambda g: g * np.cos(a.data))


def cos(a):
    return _unary("cos", a, np.cos(a.data), lambda g: -g * np.sin(a.data))


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary("sigmoid", a, out, lambda g: g * out * (1.0 - out))


def softplus(a):
    out = np.logaddexp(0.0, a.data)
    sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _unary("softplus", a, out, lambda g: g * sig)


def clamp(a, lo, hi):
    # Pass-through strictly inside (lo, hi); subgradient 0 at and beyond the edges.
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _unary("clamp", a, out, lambda g: g * inside)


# ---------------------------------------------------------------------------
# Reductions, reshaping, linear algebra
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(out, (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _unary("reshape", a, out, lambda g: g.reshape(a.shape))


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` elements along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", f"[{start}:{start + length}) out of range for axis "
                                   f"{axis} with extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _node(out, (a,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(out, tuple(tensors), back)


def matmul(a, b):
    """Matrix product; 2-D operands or stacked batches with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out, (a, b), back)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with x (..., in), weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", f"input extent {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.reshape(-1, g.shape[-1])
        xm = x.data.reshape(-1, x.shape[-1])
        _accumulate(x, (gm @ weight.data).reshape(x.shape))
        _accumulate(weight, gm.T @ xm)
        if bias is not None:
            _accumulate(bias, gm.sum(axis=0))

    return _node(out, parents, back)


def softmax_rows(a):
    """Row-wise softmax of a 2-D matrix; each output row sums to 1."""
    if a.ndim != 2:
        raise ShapeError("softmax_rows", f"expected a 2-D matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _node(out, (a,), back)


# ---------------------------------------------------------------------------
# 3-D convolution and batch normalization
# ---------------------------------------------------------------------------

def _channel_last(x):
    """Copy (B, C, D, H, W) into contiguous (B, D, H, W, C) layout."""
    return np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))


def _conv3d_cols(xcl, ksize, stride, out_spatial):
    """Gather the k^3 sliding windows of a channel-last padded input into one
    patch matrix with columns ordered (kd, kh, kw, channel).

    Keeping the channel axis innermost makes the gather copy contiguous runs,
    which is what bounds conv3d's speed on large activations.
    """
    b, c = xcl.shape[0], xcl.shape[4]
    od, oh, ow = out_spatial
    win = np.lib.stride_tricks.sliding_window_view(xcl, (ksize,) * 3, axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride][:, :od, :oh, :ow]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)        # (B, od, oh, ow, k, k, k, C)
    return np.ascontiguousarray(cols).reshape(b * od * oh * ow, ksize ** 3 * c)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3-D convolution: x (B, C, D, H, W), weight (O, C, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError("conv3d", f"need 5-D input and kernels, got {x.shape} x {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv3d", f"input channels {x.shape[1]} != kernel channels {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3] or weight.shape[3] != weight.shape[4]:
        raise ShapeError("conv3d", f"kernels must be cubic, got {weight.shape[2:]}")
    b, c, d, h, w = x.shape
    o, _, k, _, _ = weight.shape
    out_spatial = tuple((s + 2 * padding - k) // stride + 1 for s in (d, h, w))
    if any(s < 1 for s in out_spatial):
        raise ShapeError("conv3d", f"spatial extents {(d, h, w)} too small for kernel {k} "
                                   f"stride {stride} padding {padding}")
    od, oh, ow = out_spatial
    xcl = _channel_last(x.data)
    if padding:
        xcl = np.pad(xcl, ((0, 0),) + ((padding, padding),) * 3 + ((0, 0),))
    cols = _conv3d_cols(xcl, k, stride, out_spatial)
    wmat = weight.data.transpose(0, 2, 3, 4, 1).reshape(o, k ** 3 * c)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    # contiguous output: downstream elementwise passes run on packed memory
    out = np.ascontiguousarray(out.reshape(b, od, oh, ow, o).transpose(0, 4, 1, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gcl = _channel_last(g)
        gm = gcl.reshape(-1, o)
        dw = (gm.T @ cols).reshape(o, k, k, k, c)
        _accumulate(weight, dw.transpose(0, 4, 1, 2, 3))
        if bias is not None:
            _accumulate(bias, gm.sum(axis=0))
        if x.requires_grad:
            if stride == 1 and k > padding:
                # dx is itself a correlation: pad the output gradient by
                # k-1-padding and apply the spatially flipped kernels.
                # Avoids the overlapping scatter-add of col2im.
                margin = k - 1 - padding
                gp = gcl if margin == 0 else np.pad(
                    gcl, ((0, 0),) + ((margin, margin),) * 3 + ((0, 0),))
                gcols = _conv3d_cols(gp, k, 1, (d, h, w))
                wflip = weight.data[:, :, ::-1, ::-1, ::-1]
                wflip = wflip.transpose(2, 3, 4, 0, 1).reshape(k ** 3 * o, c)
                dx = (gcols @ wflip).reshape(b, d, h, w, c)
                _accumulate(x, np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3)))
            else:
                dcols = (gm @ wmat).reshape(b, od, oh, ow, k ** 3, c)
                dcols = dcols.transpose(0, 5, 4, 1, 2, 3)   # (B, C, k^3, od, oh, ow)
                dxp = np.zeros((b, c) + xcl.shape[1:4], dtype=g.dtype)
                j = 0
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            dxp[:, :,
                                kd:kd + stride * od:stride,
                                kh:kh + stride * oh:stride,
                                kw:kw + stride * ow:stride] += dcols[:, :, j]
                            j += 1
                if padding:
                    dxp = dxp[:, :, padding:padding + d,
                              padding:padding + h, padding:padding + w]
                _accumulate(x, dxp)

    return _node(out, parents, back)


def batchnorm3d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of a (B, C, D, H, W) tensor.

    In training mode the batch statistics normalize and update the running
    buffers in place (torch convention: unbiased variance in the buffer);
    in eval mode the running buffers are used and nothing is mutated.
    """
    if x.ndim != 5:
        raise ShapeError("batchnorm3d", f"expected (B, C, D, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm3d", f"affine terms must have shape ({c},)")
    axes = (0, 2, 3, 4)
    n = x.size // c
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    shape = (1, c, 1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv.reshape(shape) * (dxhat - s1 / n - xhat * s2 / n)
            else:
                dx = dxhat * inv.reshape(shape)
            _accumulate(x, dx)

    return _node(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# Trilinear gather
# ---------------------------------------------------------------------------

def trilinear_gather(values, points, origin, voxel_size):
    """Trilinear interpolation of a 3-D grid at query points.

    values: (Rx, Ry, Rz) tensor with samples at origin + index * voxel_size.
    points: (M, 3) tensor of in-bounds world positions. Differentiable in
    both the grid values and the points; queries must lie inside the grid
    (callers implement their own out-of-grid policy).
    """
    if values.ndim != 3:
        raise ShapeError("trilinear_gather", f"values must be 3-D, got {values.shape}")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError("trilinear_gather", f"points must be (M, 3), got {points.shape}")
    res = np.array(values.shape)
    u = (points.data - np.asarray(origin)) / voxel_size
    if np.any(u < -1e-9) or np.any(u > res - 1 + 1e-9):
        bad = np.argmax(np.any((u < -1e-9) | (u > res - 1 + 1e-9), axis=1))
        raise ShapeError("trilinear_gather",
                         f"point {points.data[bad]} outside grid of extents {tuple(res)}")
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    v = values.data
    c000 = v[ix, iy, iz]
    c100 = v[ix + 1, iy, iz]
    c010 = v[ix, iy + 1, iz]
    c110 = v[ix + 1, iy + 1, iz]
    c001 = v[ix, iy, iz + 1]
    c101 = v[ix + 1, iy, iz + 1]
    c011 = v[ix, iy + 1, iz + 1]
    c111 = v[ix + 1, iy + 1, iz + 1]
    w000 = (1 - fx) * (1 - fy) * (1 - fz)
    w100 = fx * (1 - fy) * (1 - fz)
    w010 = (1 - fx) * fy * (1 - fz)
    w110 = fx * fy * (1 - fz)
    w001 = (1 - fx) * (1 - fy) * fz
    w101 = fx * (1 - fy) * fz
    w011 = (1 - fx) * fy * fz
    w111 = fx * fy * fz
    out = (c000 * w000 + c100 * w100 + c010 * w010 + c110 * w110 +
           c001 * w001 + c101 * w101 + c011 * w011 + c111 * w111)

    corners = ((c000, ix, iy, iz), (c100, ix + 1, iy, iz),
               (c010, ix, iy + 1, iz), (c110, ix + 1, iy + 1, iz),
               (c001, ix, iy, iz + 1), (c101, ix + 1, iy, iz + 1),
               (c011, ix, iy + 1, iz + 1), (c111, ix + 1, iy + 1, iz + 1))
    weights = (w000, w100, w010, w110, w001, w101, w011, w111)

    def back(g):
        if values.requires_grad:
            dv = np.zeros_like(v)
            for (cv, jx, jy, jz), wgt in zip(corners, weights):
                np.add.at(dv, (jx, jy, jz), g * wgt)
            _accumulate(values, dv)
        if points.requires_grad:
            dx = ((c100 - c000) * (1 - fy) * (1 - fz) + (c110 - c010) * fy * (1 - fz) +
                  (c101 - c001) * (1 - fy) * fz + (c111 - c011) * fy * fz)
            dy = ((c010 - c000) * (1 - fx) * (1 - fz) + (c110 - c100) * fx * (1 - fz) +
                  (c011 - c001) * (1 - fx) * fz + (c111 - c101) * fx * fz)
            dz = ((c001 - c000) * (1 - fx) * (1 - fy) + (c101 - c100) * fx * (1 - fy) +
                  (c011 - c010) * (1 - fx) * fy + (c111 - c110) * fx * fy)
            dp = np.stack([g * dx, g * dy, g * dz], axis=1) / voxel_size
            _accumulate(points, dp)

    return _node(out, (values, points), back)


# ---------------------------------------------------------------------------
# Rotation-coefficient primitives (Rodrigues helpers, smooth in theta^2)
# ---------------------------------------------------------------------------

def _rot_series_threshold():
    return 1e-6 if float_dtype() == np.float64 else 1e-2


def rot_coeff_a(s):
    """sin(sqrt(s))/sqrt(s) as an analytic function of s = theta^2."""
    x = s.data
    small = x < _rot_series_threshold()
    xs = np.where(small, 1.0, x)  # placeholder keeps the exact branch finite
    th = np.sqrt(xs)
    exact = np.sin(th) / th
    series = 1.0 - x / 6.0 + x * x / 120.0
    out = np.where(small, series, exact)
    dexact = (np.cos(th) * th - np.sin(th)) / (2.0 * xs * th)
    dseries = -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
    d = np.where(small, dseries, dexact)
    return _unary("rot_coeff_a", s, out, lambda g: g * d)


def rot_coeff_b(s):
    """(1 - cos(sqrt(s)))/s as an analytic function of s = theta^2."""
    x = s.data
    small = x < _rot_series_threshold()
    xs = np.where(small, 1.0, x)
    th = np.sqrt(xs)
    exact = (1.0 - np.cos(th)) / xs
    series = 0.5 - x / 24.0 + x * x / 720.0
    out = np.where(small, series, exact)
    dexact = (np.sin(th) * th / 2.0 - (1.0 - np.cos(th))) / (xs * xs)
    dseries = -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
    d = np.where(small, dseries, dexact)
    return _unary("rot_coeff_b", s, out, lambda g: g * d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def reset_moments(self, params):
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", f"gradient shape {g.shape} != parameter "
                                          f"shape {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - step
    return params, state


def clip_gradient_norm(grads, max_norm):
    """Scale the joint gradient so its global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return grads, norm
