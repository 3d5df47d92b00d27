"""Minimal dense-tensor engine with tape-based reverse-mode autodiff.

Everything is float64. A fresh graph is built on every forward pass (no
persistent tape); ``backward`` walks the implicit DAG of parent links once,
in reverse topological order, and fills gradient slots keyed by node id.

Shape rules are strict: no broadcasting except scalar-with-tensor. Ops that
can produce non-finite values (exp, log, div, l2norm) validate their output
so finite inputs always yield finite tensors.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class GraphError(RuntimeError):
    """Backward invoked on an invalid root or a degenerate graph."""


class Tensor:
    """A dense float64 array plus the tape record that produced it.

    ``grad`` is defined only after a ``backward`` pass from a scalar root
    that reaches this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _vjp=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # Small operator sugar so math-heavy call sites stay readable.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)


def leaf(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _node(data, parents, vjp, op) -> Tensor:
    track = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, op=op,
                  _parents=tuple(parents) if track else (),
                  _vjp=vjp if track else None)


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _require_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{op}: produced non-finite values")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("subtract", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "subtract")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("multiply", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data), "multiply")


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _require_finite("divide", out)
    return _node(out, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)), "divide")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scalar-multiply")


def scalar_add(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data + c, (a,), lambda g: (g,), "scalar-add")


def mask_mul(a: Tensor, mask) -> Tensor:
    """Elementwise multiply by a constant mask (gradient is masked too)."""
    m = np.ascontiguousarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"mask-multiply: mask {m.shape} vs tensor {a.shape}")
    return _node(a.data * m, (a,), lambda g: (g * m,), "mask-multiply")


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _require_finite("exp", out)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ShapeError("log: input has non-positive entries")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient 1 inside the closed interval, 0 outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,),
                 lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matrix-multiply: shapes {a.shape} and {b.shape} do not conform")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matrix-multiply")


def tsum(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        return _node(a.data.sum(), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _node(a.data.sum(axis=axis), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _node(a.data.mean(), (a,),
                     lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")
    n = a.shape[axis]
    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)
    return _node(a.data.mean(axis=axis), (a,), vjp, "mean")


def l2norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over all elements (axis=None) or along one axis."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))
    if np.any(out == 0.0):
        raise ShapeError("l2-norm: zero vector has no gradient")
    if axis is None:
        def vjp(g):
            return (g * a.data / out,)
    else:
        def vjp(g):
            return (np.expand_dims(g / out, axis) * a.data,)
    return _node(out, (a,), vjp, "l2-norm")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _node(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),), "reshape")


def gather(a: Tensor, indices, shape) -> Tensor:
    """Pick elements of the flattened input by a fixed index map.

    The VJP scatter-adds into the source, so repeated indices accumulate.
    """
    idx = np.ascontiguousarray(indices, dtype=np.intp).ravel()
    shape = tuple(int(s) for s in shape)
    if idx.size != int(np.prod(shape)):
        raise ShapeError(f"gather: {idx.size} indices cannot fill shape {shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError("gather: index out of range")
    size = a.size
    def vjp(g):
        return (np.bincount(idx, weights=g.ravel(), minlength=size).reshape(a.shape),)
    return _node(a.data.ravel()[idx].reshape(shape), (a,), vjp, "gather")


# ---------------------------------------------------------------------------
# spatial ops (first two axes are rows/cols; an optional third is channels)


def _check_spatial(op, a):
    if a.data.ndim not in (2, 3):
        raise ShapeError(f"{op}: expected 2D or 3D tensor, got shape {a.shape}")


def slice2d(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    _check_spatial("slice", a)
    h, w = a.shape[0], a.shape[1]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"slice: window [{r0}:{r1},{c0}:{c1}] outside shape {a.shape}")
    def vjp(g):
        full = np.zeros(a.shape)
        full[r0:r1, c0:c1] = g
        return (full,)
    return _node(a.data[r0:r1, c0:c1].copy(), (a,), vjp, "slice")


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial axes."""
    _check_spatial("pad", a)
    if min(top, bottom, left, right) < 0:
        raise ShapeError("pad: negative padding")
    widths = [(top, bottom), (left, right)] + [(0, 0)] * (a.data.ndim - 2)
    def vjp(g):
        h, w = a.shape[0], a.shape[1]
        return (g[top:top + h, left:left + w],)
    return _node(np.pad(a.data, widths), (a,), vjp, "pad")


def _edge_indices(n: int, k: int) -> np.ndarray:
    # index map for clamp-to-edge padding: out[i, t] = clip(i + t - k//2)
    offs = np.arange(k) - k // 2
    return np.clip(np.arange(n)[:, None] + offs[None, :], 0, n - 1)


def conv2d(a: Tensor, kernel) -> Tensor:
    """Depthwise 2D convolution with a fixed (non-trainable) kernel.

    Clamp-to-edge padding keeps the output the same size and preserves
    constant inputs when the kernel sums to 1.
    """
    _check_spatial("conv2d", a)
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k.shape}")
    h, w = a.shape[0], a.shape[1]
    if k.shape[0] > h or k.shape[0] > w:
        raise ShapeError(f"conv2d: kernel {k.shape} larger than input {a.shape}")
    ksz = k.shape[0]
    ri = _edge_indices(h, ksz)                      # (h, ksz)
    ci = _edge_indices(w, ksz)                      # (w, ksz)
    squeeze = a.data.ndim == 2
    x = a.data[:, :, None] if squeeze else a.data
    ch = x.shape[2]
    windows = x[ri[:, None, :, None], ci[None, :, None, :], :]   # (h,w,ksz,ksz,ch)
    out = np.einsum("ijklc,kl->ijc", windows, k)
    # flat spatial scatter map, reused by the VJP
    base = (ri[:, None, :, None] * w + ci[None, :, None, :]) * ch  # (h,w,ksz,ksz)
    flat = (base[..., None] + np.arange(ch)).ravel()
    def vjp(g):
        gx = g[:, :, None] if squeeze else g
        contrib = gx[:, :, None, None, :] * k[None, None, :, :, None]
        acc = np.bincount(flat, weights=contrib.ravel(), minlength=h * w * ch)
        acc = acc.reshape(h, w, ch)
        return (acc[:, :, 0] if squeeze else acc,)
    return _node(out[:, :, 0] if squeeze else out, (a,), vjp, "conv2d")


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel-centre mapping, clamped to the valid range
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def bilinear_resample(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the spatial axes to (out_h, out_w)."""
    _check_spatial("bilinear-resample", a)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear-resample: bad target size {(out_h, out_w)}")
    h, w = a.shape[0], a.shape[1]
    r0, r1, tr = _bilinear_axis(h, out_h)
    c0, c1, tc = _bilinear_axis(w, out_w)
    squeeze = a.data.ndim == 2
    x = a.data[:, :, None] if squeeze else a.data
    ch = x.shape[2]
    wr = np.stack([1.0 - tr, tr])                   # (2, out_h)
    wc = np.stack([1.0 - tc, tc])                   # (2, out_w)
    rows = np.stack([r0, r1])                       # (2, out_h)
    cols = np.stack([c0, c1])                       # (2, out_w)
    out = np.zeros((out_h, out_w, ch))
    corners = []
    for u in range(2):
        for v in range(2):
            wt = wr[u][:, None] * wc[v][None, :]    # (out_h, out_w)
            out += wt[:, :, None] * x[rows[u][:, None], cols[v][None, :], :]
            flat = ((rows[u][:, None] * w + cols[v][None, :]) * ch)[:, :, None] + np.arange(ch)
            corners.append((wt, flat.ravel()))
    def vjp(g):
        gx = g[:, :, None] if squeeze else g
        acc = np.zeros(h * w * ch)
        for wt, flat in corners:
            contrib = (wt[:, :, None] * gx).ravel()
            acc += np.bincount(flat, weights=contrib, minlength=h * w * ch)
        acc = acc.reshape(h, w, ch)
        return (acc[:, :, 0] if squeeze else acc,)
    return _node(out[:, :, 0] if squeeze else out, (a,), vjp, "bilinear-resample")


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, parents before children, each exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Fills ``.grad`` on every reachable tensor that requires grad and returns
    the gradient map keyed by node id.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    order = topo_order(root)
    slots: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = slots.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in slots:
                slots[id(parent)] = slots[id(parent)] + pg
            else:
                slots[id(parent)] = pg
    grads: dict[int, np.ndarray] = {}
    for node in order:
        if node.requires_grad:
            node.grad = slots.get(id(node))
            if node.grad is not None:
                grads[id(node)] = node.grad
    return grads


def finite_diff_gradient(f, x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle.

    ``f`` receives a fresh non-tracked Tensor and must return a Tensor or
    float; the result has the same shape as ``x``.
    """
    if step <= 0:
        raise ValueError("finite_diff_gradient: step must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.ravel()
    work = base.copy()
    wflat = work.ravel()
    def evaluate():
        out = f(Tensor(work))
        return out.item() if isinstance(out, Tensor) else float(out)
    for i in range(base.size):
        orig = wflat[i]
        wflat[i] = orig + step
        hi = evaluate()
        wflat[i] = orig - step
        lo = evaluate()
        wflat[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# string-dispatch surface over the op set

_UNARY = {
    "tanh": tanh, "elementwise-tanh": tanh,
    "exp": exp, "elementwise-exp": exp,
    "log": log, "elementwise-log": log,
}
_BINARY = {
    "add": add,
    "subtract": sub,
    "multiply": mul, "elementwise-multiply": mul,
    "divide": div,
    "matrix-multiply": matmul,
}


def forward_op(kind: str, inputs: list[Tensor], params: dict | None = None) -> Tensor:
    """Apply one op by kind name; records the node for backward."""
    p = params or {}
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{kind}: expects 2 inputs, got {len(inputs)}")
        return _BINARY[kind](inputs[0], inputs[1])
    if len(inputs) != 1:
        raise ShapeError(f"{kind}: expects 1 input, got {len(inputs)}")
    a = inputs[0]
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scalar-multiply":
        return scalar_mul(a, p["scalar"])
    if kind == "scalar-add":
        return scalar_add(a, p["scalar"])
    if kind == "sum":
        return tsum(a, axis=p.get("axis"))
    if kind == "mean":
        return tmean(a, axis=p.get("axis"))
    if kind == "l2-norm":
        return l2norm(a, axis=p.get("axis"))
    if kind == "reshape":
        return reshape(a, p["shape"])
    if kind == "gather":
        return gather(a, p["indices"], p["shape"])
    if kind == "slice":
        return slice2d(a, p["r0"], p["r1"], p["c0"], p["c1"])
    if kind == "pad":
        return pad2d(a, p["top"], p["bottom"], p["left"], p["right"])
    if kind == "conv2d":
        return conv2d(a, p["kernel"])
    if kind == "bilinear-resample":
        return bilinear_resample(a, p["height"], p["width"])
    if kind == "mask-multiply":
        return mask_mul(a, p["mask"])
    if kind == "clamp":
        return clamp(a, p["lo"], p["hi"])
    raise ValueError(f"forward_op: unknown op kind {kind!r}")
