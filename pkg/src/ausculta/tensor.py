"""Dense float64 tensors with reverse-mode automatic differentiation.

Design: a ``Tensor`` wraps a row-major float64 ndarray. Ops build a fresh
computation graph per forward pass; ``backward(loss)`` walks it in reverse
topological order. Gradients *add* into ``.grad`` on every call, so
micro-batch accumulation is just repeated ``backward``; call ``zero_grads``
between optimizer steps.

Broadcasting is deliberately narrow: elementwise ops take equal shapes or a
scalar, ``add`` additionally accepts a trailing-dimension bias. Anything more
exotic is composed from explicit reshapes/transposes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation/generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; full semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _needs_graph(*tensors: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _wants(t: Tensor) -> bool:
    """Whether a parent needs its gradient computed."""
    return t.requires_grad or bool(t._parents)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_graph(*parents):
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` for every reachable leaf.

    ``loss`` must be scalar (0-d). Grads add across repeated calls; reset with
    ``zero_grads``.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative topological sort (graphs can exceed the recursion limit)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / affine
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b. Shapes must match, or b is scalar, or b is a trailing-dim bias."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape == b.shape:
        mode = "same"
    elif b.shape == ():
        mode = "scalar"
    elif a.ndim >= 1 and b.ndim == 1 and b.shape[0] == a.shape[-1]:
        mode = "bias"
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    data = a.data + b.data

    def bwd(g):
        ga = g if _wants(a) else None
        if not _wants(b):
            return ga, None
        if mode == "same":
            gb = g
        elif mode == "scalar":
            gb = np.sum(g)
        else:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return ga, gb

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g if _wants(a) else None,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; shapes equal or either side scalar."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if not (a.shape == b.shape or a.shape == () or b.shape == ()):
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def bwd(g):
        ga = gb = None
        if _wants(a):
            ga = g * b.data
            if a.shape == () and ga.shape != ():
                ga = np.sum(ga)
        if _wants(b):
            gb = g * a.data
            if b.shape == () and gb.shape != ():
                gb = np.sum(gb)
        return ga, gb

    return _make(data, (a, b), bwd)


def scale_rows(t: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply each row of a 2-D tensor by a constant per-row factor."""
    if t.ndim != 2 or factors.shape != (t.shape[0],):
        raise ValueError(f"scale_rows: shapes {t.shape} vs {factors.shape}")
    f = np.asarray(factors, dtype=np.float64)[:, None]
    return _make(t.data * f, (t,), lambda g: (g * f if _wants(t) else None,))


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _make(y, (t,), lambda g: (g * (1.0 - y * y) if _wants(t) else None,))


def gelu(t: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = t.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bwd(g):
        if not _wants(t):
            return (None,)
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * dy,)

    return _make(y, (t,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = t.shape
    return _make(
        t.data.reshape(shape),
        (t,),
        lambda g: (g.reshape(old) if _wants(t) else None,),
    )


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(t.data, axes),
        (t,),
        lambda g: (np.transpose(g, inv) if _wants(t) else None,),
    )


def pad_rows(t: Tensor, n_total: int) -> Tensor:
    """Append zero rows to a 2-D tensor until it has n_total rows."""
    n, d = t.shape
    if n_total < n:
        raise ValueError(f"pad_rows: target {n_total} shorter than input {n}")
    data = np.zeros((n_total, d), dtype=np.float64)
    data[:n] = t.data
    return _make(data, (t,), lambda g: (g[:n] if _wants(t) else None,))


def vstack(tensors: list[Tensor]) -> Tensor:
    """Stack 2-D tensors along rows."""
    if not tensors:
        raise ValueError("vstack: empty list")
    widths = {t.shape[1] for t in tensors}
    if len(widths) != 1:
        raise ValueError(f"vstack: mixed widths {sorted(widths)}")
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=0)

    def bwd(g):
        return tuple(
            g[offsets[i] : offsets[i + 1]] if _wants(t) else None
            for i, t in enumerate(tensors)
        )

    return _make(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return _make(
        np.sum(t.data),
        (t,),
        lambda g: (np.broadcast_to(g, shape).copy() if _wants(t) else None,),
    )


def mean_all(t: Tensor) -> Tensor:
    n = t.data.size
    shape = t.shape
    return _make(
        np.mean(t.data),
        (t,),
        lambda g: (np.broadcast_to(g / n, shape).copy() if _wants(t) else None,),
    )


def mean_axis0(t: Tensor) -> Tensor:
    """Mean over the leading axis (used for frequency pooling)."""
    n = t.shape[0]
    return _make(
        np.mean(t.data, axis=0),
        (t,),
        lambda g: (np.broadcast_to(g / n, t.shape).copy() if _wants(t) else None,),
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2Dx2D, 3Dx3D (equal batch) and 3Dx2D."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ValueError(f"matmul: batched dims {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")
    else:
        raise ValueError(f"matmul: unsupported ranks {a.ndim} x {b.ndim}")
    data = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.ndim == 2 and b.ndim == 2:
            if _wants(a):
                ga = g @ b.data.T
            if _wants(b):
                gb = a.data.T @ g
        elif b.ndim == 3:
            if _wants(a):
                ga = g @ np.swapaxes(b.data, -1, -2)
            if _wants(b):
                gb = np.swapaxes(a.data, -1, -2) @ g
        else:  # 3D x 2D
            if _wants(a):
                ga = g @ b.data.T
            if _wants(b):
                gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        return ga, gb

    return _make(data, (a, b), bwd)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis.

    Computed with max subtraction; entries equal to -inf act as a mask
    sentinel and come out exactly 0. A row with every entry masked is an
    error (its normalizer would vanish).
    """
    x = t.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax_lastdim: empty last dimension")
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax_lastdim: fully masked row")
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        if not _wants(t):
            return (None,)
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (t,), bwd)


def mask_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is False with ``value`` (e.g. -inf)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), t.shape)
    data = np.where(mask, t.data, value)

    def bwd(g):
        if not _wants(t):
            return (None,)
        return (np.where(mask, g, 0.0),)

    return _make(data, (t,), bwd)


def layernorm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine scale/shift."""
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layernorm: gain/bias {gain.shape}/{bias.shape} must match last dim {d}"
        )
    x = t.data
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain.data + bias.data

    def bwd(g):
        gt = gg = gb = None
        if _wants(gain):
            gg = np.sum(g * xhat, axis=tuple(range(x.ndim - 1)))
        if _wants(bias):
            gb = np.sum(g, axis=tuple(range(x.ndim - 1)))
        if _wants(t):
            dxhat = g * gain.data
            term = dxhat - np.mean(dxhat, axis=-1, keepdims=True)
            term -= xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            gt = inv * term
        return gt, gg, gb

    return _make(y, (t, gain, bias), bwd)


def conv1d_nonoverlap(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Non-overlapping 1-D convolution: stride equals kernel width.

    ``x`` is a 1-D signal of length L (L % stride == 0); ``kernel`` has shape
    (d_out, stride). Each length-``stride`` patch is projected, giving an
    (L//stride, d_out) output.
    """
    if x.ndim != 1:
        raise ValueError(f"conv1d_nonoverlap: expected 1-D signal, got {x.shape}")
    d_out, width = kernel.shape
    if width != stride:
        raise ValueError(f"conv1d_nonoverlap: kernel width {width} != stride {stride}")
    n = x.shape[0]
    if n % stride != 0:
        raise ValueError(f"conv1d_nonoverlap: length {n} not divisible by {stride}")
    patches = x.data.reshape(n // stride, stride)
    data = patches @ kernel.data.T

    def bwd(g):
        gx = gk = None
        if _wants(x):
            gx = (g @ kernel.data).reshape(n)
        if _wants(kernel):
            gk = g.T @ patches
        return gx, gk

    return _make(data, (x, kernel), bwd)


def extract_patches2d(
    t: Tensor, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int
) -> Tensor:
    """im2col for a (C, H, W) tensor.

    Zero-pads by (ph, pw) on top/left with the remainder on bottom/right so
    the output grid is ceil(H/sh) x ceil(W/sw), then returns patches of shape
    (H_out * W_out, C*kh*kw). Pair with matmul for strided 2-D convolution.
    """
    c, h, w = t.shape
    h_out = -(-h // sh)
    w_out = -(-w // sw)
    pad_h = max((h_out - 1) * sh + kh - h, 0)
    pad_w = max((w_out - 1) * sw + kw - w, 0)
    top, left = ph, pw
    bottom, right = pad_h - ph, pad_w - pw
    if min(top, left, bottom, right) < 0:
        raise ValueError("extract_patches2d: padding exceeds requirement")
    hp, wp = h + pad_h, w + pad_w

    ii = (np.arange(h_out)[:, None] * sh + np.arange(kh)[None, :]).reshape(-1)
    jj = (np.arange(w_out)[:, None] * sw + np.arange(kw)[None, :]).reshape(-1)

    xp = np.zeros((c, hp, wp), dtype=np.float64)
    xp[:, top : top + h, left : left + w] = t.data
    # (C, h_out*kh, w_out*kw) -> (h_out, w_out, C, kh, kw)
    grid = xp[:, ii[:, None], jj[None, :]].reshape(c, h_out, kh, w_out, kw)
    patches = grid.transpose(1, 3, 0, 2, 4).reshape(h_out * w_out, c * kh * kw)

    def bwd(g):
        if not _wants(t):
            return (None,)
        gg = (
            g.reshape(h_out, w_out, c, kh, kw)
            .transpose(2, 0, 3, 1, 4)
            .reshape(c, h_out * kh, w_out * kw)
        )
        gxp = np.zeros((c, hp, wp), dtype=np.float64)
        np.add.at(gxp, (slice(None), ii[:, None], jj[None, :]), gg)
        return (gxp[:, top : top + h, left : left + w],)

    return _make(patches, (t,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an (n, d) table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"embedding: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding: id out of range")
    data = table.data[ids]

    def bwd(g):
        if not _wants(table):
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), bwd)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is True.

    ``logits``: (T, V); ``targets``: (T,) int ids; masked-out positions
    contribute nothing to the value or the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    t_len, _ = logits.shape
    if targets.shape != (t_len,) or mask.shape != (t_len,):
        raise ValueError("cross_entropy_masked: targets/mask must be (T,)")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy_masked: empty mask")
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    logp = x - lse
    picked = logp[np.arange(t_len), targets]
    loss = -np.sum(picked[mask]) / n

    def bwd(g):
        if not _wants(logits):
            return (None,)
        probs = np.exp(logp)
        probs[np.arange(t_len), targets] -= 1.0
        probs *= (mask.astype(np.float64) / n)[:, None]
        return (probs * g,)

    return _make(np.float64(loss), (logits,), bwd)


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Surface NaN/Inf as an error instead of letting it propagate."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t
