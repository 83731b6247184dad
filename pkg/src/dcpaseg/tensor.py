"""Minimal reverse-mode differentiation over dense float tensors.

Only the operations the segmentation network needs are provided, each with
a fixed signature and no implicit broadcasting. Spatial ops accept a single
``(C, H, W)`` tensor or a batch ``(N, C, H, W)``.
"""

import numpy as np

from . import kernels
from .errors import ShapeError


class Tensor:
    """A value in the computation graph.

    ``grad`` is populated on leaf tensors with ``requires_grad=True`` by
    :func:`backward`. Interior nodes keep a closure mapping the gradient of
    their output to gradients of their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        # np.require keeps 0-d arrays 0-d, unlike ascontiguousarray
        self.data = np.require(arr, requirements="C")
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    return Tensor(data, _parents=parents, _backward=backward, op=op)


def _batched(t, name):
    if t.ndim == 4:
        return t.data, False
    if t.ndim == 3:
        return t.data[None], True
    raise ShapeError(f"{name}: expected (C, H, W) or (N, C, H, W), got shape {t.shape}")


# -- layers -----------------------------------------------------------------

def conv2d(input, kernels_, bias):
    """Valid (unpadded) stride-1 convolution."""
    x_t, w_t, b_t = as_tensor(input), as_tensor(kernels_), as_tensor(bias)
    x, squeeze = _batched(x_t, "conv2d")
    w, b = w_t.data, b_t.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernels must be (Cout, Cin, k, k), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but kernels expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias must have shape ({w.shape[0]},), got {b.shape}")
    k = w.shape[2]
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"conv2d: kernel size {k} exceeds input extent {x.shape[2:]}")
    if not (x.dtype == w.dtype == b.dtype):
        raise TypeError(f"conv2d: dtype mismatch {x.dtype}/{w.dtype}/{b.dtype}")

    y = kernels.conv2d_forward(x, w, b)

    def backward(g):
        dy = np.ascontiguousarray(g[None] if squeeze else g)
        dx, dw, db = kernels.conv2d_backward(x, w, dy, x_t.requires_grad)
        if dx is not None and squeeze:
            dx = dx[0]
        return dx, dw, db

    return _node(y[0] if squeeze else y, (x_t, w_t, b_t), backward, "conv2d")


def maxpool2(input):
    """2x2 max pooling, stride 2. Gradient goes to the first maximum in row-major order."""
    x_t = as_tensor(input)
    x, squeeze = _batched(x_t, "maxpool2")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {x.shape[2:]}")
    y, idx = kernels.maxpool2_forward(x)

    def backward(g):
        dy = np.ascontiguousarray(g[None] if squeeze else g)
        dx = kernels.maxpool2_backward(dy, idx)
        return (dx[0] if squeeze else dx,)

    return _node(y[0] if squeeze else y, (x_t,), backward, "maxpool2")


def upconv2(input, kernels_, bias):
    """Stride-2 transposed convolution with 2x2 kernels shaped (Cin, Cout, 2, 2)."""
    x_t, w_t, b_t = as_tensor(input), as_tensor(kernels_), as_tensor(bias)
    x, squeeze = _batched(x_t, "upconv2")
    w, b = w_t.data, b_t.data
    if w.ndim != 4 or w.shape[2:] != (2, 2) or w.shape[0] != x.shape[1]:
        raise ShapeError(f"upconv2: kernels must be ({x.shape[1]}, Cout, 2, 2), got {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"upconv2: bias must have shape ({w.shape[1]},), got {b.shape}")
    y = kernels.upconv2_forward(x, w, b)

    def backward(g):
        dy = np.ascontiguousarray(g[None] if squeeze else g)
        dx, dw, db = kernels.upconv2_backward(x, w, dy)
        return (dx[0] if squeeze else dx), dw, db

    return _node(y[0] if squeeze else y, (x_t, w_t, b_t), backward, "upconv2")


def relu(input):
    x_t = as_tensor(input)
    y = kernels.relu_forward(x_t.data)
    return _node(y, (x_t,), lambda g: (kernels.relu_backward(y, g),), "relu")


def softmax_channels(input):
    """Per-pixel softmax over a two-class channel axis."""
    x_t = as_tensor(input)
    if x_t.ndim not in (3, 4) or x_t.shape[-3] != 2:
        raise ShapeError(f"softmax_channels: expected 2 class channels, got shape {x_t.shape}")
    x = x_t.data
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-3, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-3, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x_t,), backward, "softmax")


def center_crop(input, target_h, target_w):
    """Centered spatial crop; an odd excess drops the extra row/column at the bottom/right."""
    x_t = as_tensor(input)
    h, w = x_t.shape[-2:]
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ShapeError(f"center_crop: cannot crop {h}x{w} to {target_h}x{target_w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    y = x_t.data[..., top:top + target_h, left:left + target_w]

    def backward(g):
        dx = np.zeros_like(x_t.data)
        dx[..., top:top + target_h, left:left + target_w] = g
        return (dx,)

    return _node(y, (x_t,), backward, "crop")


def concat_channels(a, b):
    a_t, b_t = as_tensor(a), as_tensor(b)
    if a_t.ndim != b_t.ndim or a_t.ndim not in (3, 4):
        raise ShapeError(f"concat_channels: rank mismatch {a_t.shape} vs {b_t.shape}")
    if a_t.shape[:-3] != b_t.shape[:-3] or a_t.shape[-2:] != b_t.shape[-2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a_t.shape} and {b_t.shape}")
    ca = a_t.shape[-3]
    y = np.concatenate([a_t.data, b_t.data], axis=-3)
    return _node(y, (a_t, b_t), lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]), "concat")


# -- elementwise helpers used by tests and losses ---------------------------

def add(a, b):
    a_t, b_t = as_tensor(a), as_tensor(b)
    if a_t.shape != b_t.shape:
        raise ShapeError(f"add: shape mismatch {a_t.shape} vs {b_t.shape}")
    return _node(a_t.data + b_t.data, (a_t, b_t), lambda g: (g, g), "add")


def mul(a, b):
    a_t, b_t = as_tensor(a), as_tensor(b)
    if a_t.shape != b_t.shape:
        raise ShapeError(f"mul: shape mismatch {a_t.shape} vs {b_t.shape}")
    return _node(a_t.data * b_t.data, (a_t, b_t), lambda g: (g * b_t.data, g * a_t.data), "mul")


def sum(x):  # noqa: A001 - mirrors the tensor op name
    x_t = as_tensor(x)
    total = np.asarray(x_t.data.sum(dtype=np.float64), dtype=x_t.dtype)
    return _node(total, (x_t,), lambda g: (np.full_like(x_t.data, g),), "sum")


# -- differentiation ----------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Back-propagate from a scalar node.

    Returns a dict mapping every reachable leaf tensor with
    ``requires_grad=True`` to its gradient (also stored in ``leaf.grad``).
    Uses of a tensor in several places accumulate additively.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def finite_diff_grad(f, params, step=1e-3, coords=None):
    """Central-difference gradient of a scalar function.

    ``params`` maps names to arrays that ``f()`` reads; each coordinate is
    perturbed in place by +/- ``step`` and restored. With ``coords`` (name ->
    flat indices) only those coordinates are evaluated and a dict of 1-D
    arrays is returned; otherwise full gradient arrays are returned.
    """
    out = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        vals = np.zeros(len(idx), dtype=np.float64)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            vals[j] = (fp - fm) / (2.0 * step)
        out[name] = vals.reshape(arr.shape) if coords is None else vals
    return out
