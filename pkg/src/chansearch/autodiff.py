"""Reverse-mode automatic differentiation over dense numpy arrays.

Feature maps are 4-D (batch, channels, height, width) float32 arrays; a few
helper tensors (architecture rows, classifier matrices) use other ranks.
Every primitive records its parents and a backward closure; ``backward`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into ``Tensor.grad``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

DEFAULT_DTYPE = np.float32

# Multiply-add counting, enabled by count_macs().
_mac_counter = None


class _MacCounter:
    def __init__(self):
        self.macs = 0

    def __enter__(self):
        global _mac_counter
        self._saved = _mac_counter
        _mac_counter = self
        return self

    def __exit__(self, *exc):
        global _mac_counter
        _mac_counter = self._saved
        return False


def count_macs():
    """Context manager that tallies multiply-adds of conv/linear forwards."""
    return _MacCounter()


def _tally(n):
    if _mac_counter is not None:
        _mac_counter.macs += int(n)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Tensors are immutable once consumed by an operation: mutating ``data``
    after recording invalidates the stored backward closures.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def topo_order(root):
    """Ancestry of ``root`` in topological order (parents before children)."""
    order, visited = [], set()
    stack = [(root, False)]
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
            stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(tensor) into ``.grad`` over the whole ancestry.

    Returns a map from tensor id to gradient array for every tensor with
    ``requires_grad``. The loss must hold a single element.
    """
    if loss.data.size != 1:
        raise ConfigError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads = {}
    order = topo_order(loss)
    needs = set()
    for node in order:
        if node.requires_grad or any(id(p) in needs for p in node._parents):
            needs.add(id(node))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and id(node) in needs and node.grad is not None:
            node._backward(node.grad)
        if node.requires_grad and node.grad is not None:
            grads[id(node)] = node.grad
    return grads


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _result(data, parents, backward_fn):
    req = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data, requires_grad=False)
    if req:
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_finite_inputs(*tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ConfigError("non-finite values in operation input")


# ---------------------------------------------------------------------------
# elementwise / shape primitives
# ---------------------------------------------------------------------------

def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def add(a, b):
    a = _lift(a)
    b = _lift(b, a)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ConfigError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g if a.data.shape == g.shape else g.sum().reshape(a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(g if b.data.shape == g.shape else g.sum().reshape(b.data.shape))

    return _result(out_data, (a, b), bw)


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ConfigError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad or a._parents:
            ga = g * b.data
            a._accum(ga if a.data.shape == ga.shape else ga.sum().reshape(a.data.shape))
        if b.requires_grad or b._parents:
            gb = g * a.data
            b._accum(gb if b.data.shape == gb.shape else gb.sum().reshape(b.data.shape))

    return _result(out_data, (a, b), bw)


def relu(x):
    out_data = np.maximum(x.data, 0)

    def bw(g):
        x._accum(g * (out_data > 0))

    return _result(out_data, (x,), bw)


def tsum(x):
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        x._accum(np.full_like(x.data, g))

    return _result(out_data, (x,), bw)


def tmean(x):
    n = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.dtype)

    def bw(g):
        x._accum(np.full_like(x.data, g / n))

    return _result(out_data, (x,), bw)


def concat_channels(parts):
    """Concatenate 4-D tensors along the channel axis."""
    if not parts:
        raise ConfigError("concat_channels needs at least one part")
    base = parts[0].data
    for p in parts[1:]:
        if p.data.ndim != 4 or p.data.shape[0] != base.shape[0] or p.data.shape[2:] != base.shape[2:]:
            raise ConfigError(
                f"concat_channels spatial mismatch: {p.data.shape} vs {base.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad or p._parents:
                p._accum(g[:, lo:hi])

    return _result(out_data, tuple(parts), bw)


def slice_channels(x, lo, hi):
    if not (0 <= lo < hi <= x.data.shape[1]):
        raise ConfigError(f"channel slice [{lo}:{hi}] out of range for {x.data.shape}")
    out_data = x.data[:, lo:hi]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        x._accum(gx)

    return _result(out_data, (x,), bw)


def shift_spatial(x, rows, cols):
    """Drop the first ``rows``/``cols`` spatial lines (used by the strided skip path)."""
    out_data = x.data[:, :, rows:, cols:]
    if out_data.shape[2] == 0 or out_data.shape[3] == 0:
        raise ConfigError("spatial shift removed the whole feature map")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, rows:, cols:] = g
        x._accum(gx)

    return _result(out_data, (x,), bw)


def zeros_like_strided(x, stride):
    """The all-zero candidate operation: zeros at the strided output shape."""
    b, c, h, w = x.data.shape
    out = np.zeros((b, c, -(-h // stride), -(-w // stride)), dtype=x.dtype)
    # gradient w.r.t. x is identically zero, so no parent link is needed
    return Tensor(out)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization
# ---------------------------------------------------------------------------

def _windows(xp, kh, kw, stride, dilation):
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x, kernel, stride=1, dilation=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation.

    ``kernel`` has shape (out_channels, in_channels // groups, kh, kw).
    Output spatial size is (H + 2*padding - eff_k) // stride + 1 where
    eff_k = (k - 1) * dilation + 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigError("conv2d expects 4-D input and kernel")
    b, cin, h, w = x.data.shape
    cout, cg, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if cin % groups or cout % groups or cg != cin // groups:
        raise ConfigError(
            f"conv2d group mismatch: in={cin} out={cout} groups={groups} kernel={kernel.data.shape}")
    eff = (kh - 1) * dilation + 1
    ho = (h + 2 * padding - eff) // stride + 1
    wo = (w + 2 * padding - eff) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d output would be empty for input {x.data.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    og = cout // groups
    kd = kernel.data
    _tally(b * cout * ho * wo * cg * kh * kw)

    def _tap(u, v):
        # padded-input view aligned with kernel tap (u, v)
        return xp[:, :,
                  u * dilation: u * dilation + ho * stride: stride,
                  v * dilation: v * dilation + wo * stride: stride]

    if kh == 1 and groups == 1:
        # pointwise: a single matrix multiply per image
        xs = _tap(0, 0).reshape(b, cin, ho * wo)
        out = np.matmul(kd.reshape(cout, cin), xs).reshape(b, cout, ho, wo)

        def bw(g):
            g3 = g.reshape(b, cout, ho * wo)
            if kernel.requires_grad or kernel._parents:
                gk = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0)
                kernel._accum(gk.reshape(cout, cin, 1, 1).astype(kernel.dtype))
            if x.requires_grad or x._parents:
                gs = np.matmul(kd.reshape(cout, cin).T, g3).reshape(b, cin, ho, wo)
                if stride == 1 and not padding:
                    x._accum(gs)
                else:
                    gxp = np.zeros_like(xp)
                    gxp[:, :, ::stride, ::stride] = gs
                    x._accum(gxp[:, :, padding:padding + h, padding:padding + w]
                             if padding else gxp)

    elif groups == cin and og == 1:
        # depthwise: one scaled shift-add per kernel tap
        kflat = kd.reshape(cin, kh, kw)
        out = np.zeros((b, cin, ho, wo), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                out += _tap(u, v) * kflat[:, u, v][None, :, None, None]

        def bw(g):
            need_k = kernel.requires_grad or kernel._parents
            need_x = x.requires_grad or x._parents
            gk = np.zeros_like(kflat) if need_k else None
            gxp = np.zeros_like(xp) if need_x else None
            for u in range(kh):
                for v in range(kw):
                    if need_k:
                        gk[:, u, v] = (_tap(u, v) * g).sum(axis=(0, 2, 3))
                    if need_x:
                        gxp[:, :,
                            u * dilation: u * dilation + ho * stride: stride,
                            v * dilation: v * dilation + wo * stride: stride] += \
                            g * kflat[:, u, v][None, :, None, None]
            if need_k:
                kernel._accum(gk.reshape(kd.shape).astype(kernel.dtype))
            if need_x:
                x._accum(gxp[:, :, padding:padding + h, padding:padding + w]
                         if padding else gxp)

    else:
        win = _windows(xp, kh, kw, stride, dilation)
        wing = win.reshape(b, groups, cg, ho, wo, kh, kw)
        kg = kd.reshape(groups, og, cg, kh, kw)
        out = np.einsum("bgihwuv,goiuv->bgohw", wing, kg,
                        optimize=True).reshape(b, cout, ho, wo)
        out = np.ascontiguousarray(out, dtype=x.dtype)

        def bw(g):
            gr = g.reshape(b, groups, og, ho, wo)
            if kernel.requires_grad or kernel._parents:
                gk = np.einsum("bgihwuv,bgohw->goiuv", wing, gr, optimize=True)
                kernel._accum(gk.reshape(cout, cg, kh, kw).astype(kernel.dtype))
            if x.requires_grad or x._parents:
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        contrib = np.einsum("goi,bgohw->bgihw", kg[:, :, :, u, v],
                                            gr, optimize=True).reshape(b, cin, ho, wo)
                        gxp[:, :,
                            u * dilation: u * dilation + ho * stride: stride,
                            v * dilation: v * dilation + wo * stride: stride] += contrib
                x._accum(gxp[:, :, padding:padding + h, padding:padding + w]
                         if padding else gxp)

    return _result(out, (x, kernel), bw)


def pool2d(x, mode, window, stride=1, padding=0):
    """Sliding-window pooling; average counts only in-bounds elements."""
    if mode not in ("max", "average"):
        raise ConfigError(f"unknown pool mode {mode!r}")
    if x.data.ndim != 4:
        raise ConfigError("pool2d expects a 4-D input")
    if window < 1 or stride < 1 or padding >= window:
        raise ConfigError(f"invalid pool window={window} stride={stride} padding={padding}")
    b, c, h, w = x.data.shape
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"pool2d output would be empty for input {x.data.shape}")

    if mode == "max":
        fill = np.array(-np.inf, dtype=x.dtype)
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=fill)
        win = _windows(xp, window, window, stride, 1)
        flat = win.reshape(b, c, ho, wo, window * window)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            for u in range(window):
                for v in range(window):
                    mask = idx == (u * window + v)
                    gxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += g * mask
            x._accum(gxp[:, :, padding:padding + h, padding:padding + w])
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype),
                      ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        count = _windows(ones, window, window, stride, 1).sum(axis=(4, 5))
        win = _windows(xp, window, window, stride, 1)
        out = win.sum(axis=(4, 5)) / count

        def bw(g):
            gn = g / count
            gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            for u in range(window):
                for v in range(window):
                    gxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += gn
            x._accum(gxp[:, :, padding:padding + h, padding:padding + w])

    return _result(np.ascontiguousarray(out, dtype=x.dtype), (x,), bw)


NORM_EPS = 1e-5


def normalize(x, affine=False, scale=None, shift=None, eps=NORM_EPS):
    """Per-channel batch normalization over (batch, height, width).

    With ``affine``, ``scale`` and ``shift`` are (C,) tensors applied after
    standardization. Variance is guarded by ``eps``; no running statistics.
    """
    if x.data.ndim != 4:
        raise ConfigError("normalize expects a 4-D input")
    b, c, h, w = x.data.shape
    if affine and (scale is None or shift is None):
        raise ConfigError("affine normalize needs scale and shift tensors")
    n = b * h * w
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    if affine:
        out = xhat * scale.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)
        parents = (x, scale, shift)
    else:
        out = xhat
        parents = (x,)

    def bw(g):
        if affine:
            if scale.requires_grad or scale._parents:
                scale._accum((g * xhat).sum(axis=(0, 2, 3)).astype(scale.dtype))
            if shift.requires_grad or shift._parents:
                shift._accum(g.sum(axis=(0, 2, 3)).astype(shift.dtype))
            gxh = g * scale.data.reshape(1, c, 1, 1)
        else:
            gxh = g
        if x.requires_grad or x._parents:
            s1 = gxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x._accum((inv_std / n) * (n * gxh - s1 - xhat * s2))

    return _result(out.astype(x.dtype), parents, bw)


# ---------------------------------------------------------------------------
# classifier head and losses
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ConfigError("global_avg_pool expects a 4-D input")
    h, w = x.data.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        x._accum(np.broadcast_to(g / (h * w), x.data.shape).astype(x.dtype))

    return _result(out, (x,), bw)


def linear(x, weight, bias=None):
    """Affine map on (batch, features, 1, 1) tensors; weight is (out, in)."""
    b = x.data.shape[0]
    feat = x.data.reshape(b, -1)
    if weight.data.ndim != 2 or weight.data.shape[1] != feat.shape[1]:
        raise ConfigError(
            f"linear weight {weight.data.shape} incompatible with input {x.data.shape}")
    out = feat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    _tally(out.size * feat.shape[1])
    out = out.reshape(b, weight.data.shape[0], 1, 1).astype(x.dtype)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(b, -1)
        if weight.requires_grad or weight._parents:
            weight._accum((g2.T @ feat).astype(weight.dtype))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accum(g2.sum(axis=0).astype(bias.dtype))
        if x.requires_grad or x._parents:
            x._accum((g2 @ weight.data).reshape(x.data.shape).astype(x.dtype))

    return _result(out, parents, bw)


def softmax_values(logits):
    """Numerically stable softmax of a 1-D sequence (plain numpy, no tape)."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("softmax of an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("softmax expects finite logits")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_rows(x):
    """Row-wise softmax over the last axis, differentiable."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        x._accum((p * (g - dot)).astype(x.dtype))

    return _result(p.astype(x.dtype), (x,), bw)


def take_row(x, index):
    """Select one row of a 2-D tensor, keeping the gradient link."""
    if x.data.ndim != 2 or not (0 <= index < x.data.shape[0]):
        raise ConfigError(f"row {index} invalid for shape {x.data.shape}")
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        x._accum(gx)

    return _result(out, (x,), bw)


def weighted_sum(parts, weights):
    """Sum of tensors scaled by a 1-D weight tensor: out = sum_k w[k] * parts[k]."""
    if len(parts) != weights.data.shape[0]:
        raise ConfigError(f"{len(parts)} parts vs {weights.data.shape[0]} weights")
    shape = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != shape:
            raise ConfigError(f"weighted_sum shape mismatch: {p.data.shape} vs {shape}")
    out = np.zeros(shape, dtype=parts[0].dtype)
    for wk, p in zip(weights.data, parts):
        out += wk * p.data

    def bw(g):
        if weights.requires_grad or weights._parents:
            gw = np.array([(g * p.data).sum() for p in parts], dtype=weights.dtype)
            weights._accum(gw)
        for wk, p in zip(weights.data, parts):
            if p.requires_grad or p._parents:
                p._accum(g * wk)

    return _result(out, tuple(parts) + (weights,), bw)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy. ``labels`` is an int array of class indices."""
    b = logits.data.shape[0]
    z = logits.data.reshape(b, -1).astype(np.float64)
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ConfigError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ConfigError("label index out of range for logits")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float((lse - z[np.arange(b), labels]).mean())
    p = np.exp(z - lse[:, None])

    def bw(g):
        gz = p.copy()
        gz[np.arange(b), labels] -= 1.0
        logits._accum((g * gz / b).reshape(logits.data.shape).astype(logits.dtype))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named learnable tensors plus per-tensor optimizer state."""

    def __init__(self):
        self._params = {}
        self.state = {}

    def create(self, name, data):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def num_params(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()
