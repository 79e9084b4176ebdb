"""Minimal reverse-mode autodiff over numpy arrays.

Feature maps are channels-last (B, H, W, C) internally so that the
im2col patch gather and the GEMM behind each convolution touch
contiguous memory; `nhwc`/`nchw` convert at the model boundary.  The
graph is a flat tape of Tensor nodes; `backward` walks it once in
reverse topological order.  Under `no_grad` no tape is built at all.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "parents", "bw")

    def __init__(self, data, requires=False, parents=(), bw=None):
        self.data = data
        self.grad = None
        self.parents = parents if requires else ()
        self.bw = bw if requires else None

    @property
    def requires(self):
        return self.bw is not None or self.parents != () or self.grad is not None

    @property
    def shape(self):
        return self.data.shape

    def backward(self, grad=None):
        """Accumulate gradients of self w.r.t. all reachable leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {self.data.shape}")
        order = _toposort(self)
        _accum(self, grad)
        for node in order:
            if node.bw is not None and node.grad is not None:
                node.bw(node.grad)
                # free the tape as we go; a second backward needs a new forward
                node.bw = None
                node.parents = ()
                node.grad = None


def _toposort(root):
    """Nodes in reverse topological order (root first), iterative."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or node.bw is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    order.reverse()
    return order


def _accum(t, g):
    if t.bw is None and t.parents == () and t.grad is None:
        return  # constant leaf
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _node(data, parents, bw):
    """New graph node; collapses to a constant when grads are off."""
    if _grad_enabled and any(p.requires for p in parents):
        return Tensor(data, requires=True, parents=parents, bw=bw)
    return Tensor(data)


def constant(arr, dtype=None):
    a = np.asarray(arr)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return Tensor(a)


def parameter(view: np.ndarray, grad_view: np.ndarray) -> Tensor:
    """Leaf whose data and grad alias slices of a flat parameter store."""
    t = Tensor(view)
    t.grad = grad_view
    return t


# --------------------------------------------------------------------------
# elementwise and shape ops
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    if out.shape != a.data.shape or out.shape != b.data.shape:
        raise ValueError("add requires equal shapes")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    if out.shape != a.data.shape or out.shape != b.data.shape:
        raise ValueError("sub requires equal shapes")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("mul requires equal shapes")
    out = a.data * b.data

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bw(g):
        _accum(a, g * c)

    return _node(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    # tanh form of the sigmoid; stable for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s

    def bw(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _node(out, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    return _node(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out, (a,), bw)


def concat_last(parts) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            _accum(p, g[..., off : off + s])
            off += s

    return _node(out, tuple(parts), bw)


def nhwc(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H, W, C), contiguous."""
    out = np.ascontiguousarray(a.data.transpose(0, 2, 3, 1))

    def bw(g):
        _accum(a, np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

    return _node(out, (a,), bw)


def nchw(a: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C, H, W), contiguous."""
    out = np.ascontiguousarray(a.data.transpose(0, 3, 1, 2))

    def bw(g):
        _accum(a, np.ascontiguousarray(g.transpose(0, 2, 3, 1)))

    return _node(out, (a,), bw)


# --------------------------------------------------------------------------
# dense, convolution, pooling
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(..., F) @ (F, O) + (O,)."""
    out = x.data @ w.data
    if b is not None:
        out += b.data

    def bw(g):
        _accum(x, g @ w.data.T)
        f = x.data.shape[-1]
        o = g.shape[-1]
        _accum(w, x.data.reshape(-1, f).T @ g.reshape(-1, o))
        if b is not None:
            _accum(b, g.reshape(-1, o).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def _im2col(x: np.ndarray, kh: int, kw: int):
    """Periodic patches of (B, H, W, C) as a (B*H*W, kh*kw*C) matrix."""
    B, H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    if ph or pw:
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="wrap")
    else:
        xp = x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, H, W, kh, kw, C), (s[0], s[1], s[2], s[1], s[2], s[3])
    )
    return view.reshape(B * H * W, kh * kw * C)


def _fold_wrap(dcols: np.ndarray, B, H, W, C, kh, kw) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back with periodic wrap."""
    ph, pw = kh // 2, kw // 2
    d6 = dcols.reshape(B, H, W, kh, kw, C)
    dxp = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=dcols.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u : u + H, v : v + W, :] += d6[:, :, :, u, v, :]
    tmp = dxp[:, ph : H + ph, :, :].copy()
    if ph:
        tmp[:, H - ph :, :, :] += dxp[:, :ph, :, :]
        tmp[:, :ph, :, :] += dxp[:, H + ph :, :, :]
    dx = tmp[:, :, pw : W + pw, :].copy()
    if pw:
        dx[:, :, W - pw :, :] += tmp[:, :, :pw, :]
        dx[:, :, :pw, :] += tmp[:, :, W + pw :, :]
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Periodic same-size convolution; x (B,H,W,C), w (kh,kw,C,O)."""
    B, H, W, C = x.data.shape
    kh, kw, cin, cout = w.data.shape
    if cin != C:
        raise ValueError(f"conv input has {C} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sides must be odd")
    cols = _im2col(x.data, kh, kw)
    out = cols @ w.data.reshape(-1, cout)
    if b is not None:
        out += b.data
    out = out.reshape(B, H, W, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        _accum(w, (cols.T @ g2).reshape(kh, kw, cin, cout))
        if b is not None:
            _accum(b, g2.sum(axis=0))
        dcols = g2 @ w.data.reshape(-1, cout).T
        _accum(x, _fold_wrap(dcols, B, H, W, C, kh, kw))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def add_bias_hw(x: Tensor, v: Tensor) -> Tensor:
    """Per-sample per-channel bias: (B,H,W,C) + (B,C)."""
    out = x.data + v.data[:, None, None, :]

    def bw(g):
        _accum(x, g)
        _accum(v, g.sum(axis=(1, 2)))

    return _node(out, (x, v), bw)


def avgpool2(x: Tensor) -> Tensor:
    B, H, W, C = x.data.shape
    if H % 2 or W % 2:
        raise ValueError("avgpool2 needs even spatial sides")
    d = x.data
    out = 0.25 * (d[:, 0::2, 0::2] + d[:, 1::2, 0::2] + d[:, 0::2, 1::2] + d[:, 1::2, 1::2])

    def bw(g):
        _accum(x, 0.25 * np.repeat(np.repeat(g, 2, axis=1), 2, axis=2))

    return _node(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        _accum(x, g[:, 0::2, 0::2] + g[:, 1::2, 0::2] + g[:, 0::2, 1::2] + g[:, 1::2, 1::2])

    return _node(out, (x,), bw)


# --------------------------------------------------------------------------
# attention pieces
# --------------------------------------------------------------------------


def transpose_last2(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def bw(g):
        _accum(a, np.ascontiguousarray(g.swapaxes(-1, -2)))

    return _node(out, (a,), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _node(out, (a, b), bw)


def softmax_last(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), bw)
