"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array together with the
bookkeeping needed for backpropagation: each operation records its operands
and a closure that routes the incoming gradient to them.  Calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order exactly once and returns gradients for the requested
parameters.

Conventions used throughout the package:

* images are channels-last ``(B, H, W, C)``;
* broadcasting is restricted to trailing-dimension expansion (one operand's
  shape must be a suffix of the other's), which covers bias adds and
  per-channel scaling and nothing else;
* training tensors are float32, gradient checking always runs in float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError

DTYPES = {"single": np.float32, "double": np.float64}


def resolve_precision(mode: str) -> np.dtype:
    """Map a precision mode name ('single' or 'double') to a numpy dtype."""
    try:
        return np.dtype(DTYPES[mode])
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}, expected one of {sorted(DTYPES)}")


class Tensor:
    """A numpy-backed array that participates in the autodiff graph.

    Tensors are treated as immutable after construction; operations return
    new tensors.  ``requires_grad`` marks leaf parameters whose gradients
    :func:`backward` should report.  Integer tensors are allowed as
    non-differentiable carriers (token ids).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        elif arr.dtype.kind in "iu" and arr.dtype != np.int64:
            arr = arr.astype(np.int64)
        elif arr.dtype.kind not in "fiu":
            raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("only float tensors can require gradients")
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    t.grad = grad if t.grad is None else t.grad + grad


def _suffix_broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape for trailing-expansion broadcasting, or raise."""
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and (len(sb) == 0 or sa[len(sa) - len(sb):] == sb):
        return sa
    if len(sb) > len(sa) and (len(sa) == 0 or sb[len(sb) - len(sa):] == sa):
        return sb
    raise DimensionError(
        f"shapes {sa} and {sb} are not trailing-broadcast compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum leading axes of grad so it matches the original operand shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _elementwise(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    _suffix_broadcast_shape(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(db(g, a.data, b.data), b.shape))

    return _make(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with trailing broadcast."""
    return _elementwise(a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with trailing broadcast."""
    return _elementwise(a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with trailing broadcast."""
    return _elementwise(a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    data = x.data * x.data.dtype.type(c)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * x.data.dtype.type(c))

    return _make(data, (x,), backward)


_KINK_MONITOR: list[float] | None = None


@contextmanager
def monitor_kink_distances():
    """Record the distance of every relu/relu6 pre-activation to its nearest
    kink; used to pick well-conditioned points for finite-difference checks."""
    global _KINK_MONITOR
    prev, _KINK_MONITOR = _KINK_MONITOR, []
    try:
        yield _KINK_MONITOR
    finally:
        _KINK_MONITOR = prev


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient at the kink is 0."""
    if _KINK_MONITOR is not None:
        _KINK_MONITOR.append(float(np.abs(x.data).min()))
    mask = x.data > 0
    data = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _make(data, (x,), backward)


def relu6(x: Tensor) -> Tensor:
    """min(max(x, 0), 6); subgradient at both kinks is 0."""
    if _KINK_MONITOR is not None:
        _KINK_MONITOR.append(min(float(np.abs(x.data).min()),
                                 float(np.abs(x.data - 6).min())))
    data = np.clip(x.data, 0, 6)
    mask = (x.data > 0) & (x.data < 6)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _make(data, (x,), backward)


def rsqrt(x: Tensor) -> Tensor:
    """1/sqrt(x) for strictly positive input."""
    data = 1.0 / np.sqrt(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (-0.5 * data ** 3))

    return _make(data.astype(x.data.dtype, copy=False), (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2-D x 2-D, stacked x 2-D (``(..., m, k) @ (k, n)``), and
    stacked x stacked with identical leading batch dims.
    """
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {sa} vs {sb}")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {sa} vs {sb}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, n = b.shape
                ga = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                _accumulate(b, ga)
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along one axis (max-subtracted before exponentiation)."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - dot) * data)

    return _make(data, (x,), backward)


def reduce_mean(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Arithmetic mean over the named axes; reduced axes are removed."""
    axes_t = _check_axes(x, axes)
    data = x.data.mean(axis=axes_t)
    count = 1
    for ax in axes_t:
        count *= x.shape[ax]

    def backward(g: np.ndarray) -> None:
        expanded = np.expand_dims(g, axes_t)
        _accumulate(x, np.broadcast_to(expanded / count, x.shape))

    return _make(data, (x,), backward)


def reduce_sum(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Sum over the named axes; reduced axes are removed."""
    axes_t = _check_axes(x, axes)
    data = x.data.sum(axis=axes_t)

    def backward(g: np.ndarray) -> None:
        expanded = np.expand_dims(g, axes_t)
        _accumulate(x, np.broadcast_to(expanded, x.shape).astype(g.dtype))

    return _make(data, (x,), backward)


def _check_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    axes_t = tuple(ax % x.ndim if -x.ndim <= ax < x.ndim else _axis_err(ax, x) for ax in axes)
    if len(set(axes_t)) != len(axes_t):
        raise ValueError(f"repeated reduction axis in {tuple(axes)}")
    return axes_t


def _axis_err(ax, x):
    raise ValueError(f"axis {ax} out of range for shape {x.shape}")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; total element count must be preserved."""
    data = x.data.reshape(tuple(shape))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    axes_t = tuple(axes)
    data = np.ascontiguousarray(np.transpose(x.data, axes_t))
    inverse = tuple(np.argsort(axes_t))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.ascontiguousarray(np.transpose(g, inverse)))

    return _make(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along one axis; all other dims must agree."""
    if not tensors:
        raise ValueError("concat of an empty sequence")
    if len(tensors) == 1:
        t = tensors[0]
        return reshape(t, t.shape)
    first = tensors[0].shape
    ax = axis % len(first)
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
                t.shape[i] != first[i] for i in range(len(first)) if i != ax):
            raise DimensionError(
                f"concat shapes {[t.shape for t in tensors]} differ off axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * len(first)
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def gather_rows(table: Tensor, ids: np.ndarray | Tensor) -> Tensor:
    """Row lookup ``table[ids]``, differentiable w.r.t. the table."""
    idx = ids.data if isinstance(ids, Tensor) else np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"id out of range [0, {table.shape[0]}) in gather: min {idx.min()}, max {idx.max()}")
    data = table.data[idx]

    def backward(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _make(data, (table,), backward)


# ---------------------------------------------------------------------------
# Convolutions (channels-last, im2col based)
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        pad_h = max((ho - 1) * stride + kh - h, 0)
        pad_w = max((wo - 1) * stride + kw - w, 0)
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(
                f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        pad_h = pad_w = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def _extract_patches(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """View of the padded input as (B, Ho, Wo, kh, kw, C) windows."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return view


def _scatter_patches(shape, patch_grads: np.ndarray, stride: int) -> np.ndarray:
    """Inverse of _extract_patches: sum window gradients into a padded array."""
    out = np.zeros(shape, dtype=patch_grads.dtype)
    _, ho, wo, kh, kw, _ = patch_grads.shape
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += patch_grads[:, :, :, i, j, :]
    return out


def _crop(arr: np.ndarray, pad_h, pad_w) -> np.ndarray:
    t, b = pad_h
    l, r = pad_w
    h, w = arr.shape[1], arr.shape[2]
    return arr[:, t:h - b or None, l:w - r or None, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of a (B, H, W, Cin) input with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    ho, wo, pad_h, pad_w = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), pad_h, pad_w, (0, 0)))
    cols = _extract_patches(xp, kh, kw, ho, wo, stride).reshape(b * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    data = (cols @ kmat).reshape(b, ho, wo, cout)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(b * ho * wo, cout)
        if kernel.requires_grad:
            _accumulate(kernel, (cols.T @ g2).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(b, ho, wo, kh, kw, cin)
            dxp = _scatter_patches(xp.shape, dcols, stride)
            _accumulate(x, _crop(dxp, pad_h, pad_w))

    return _make(data, (x, kernel), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel cross-correlation: (B, H, W, C) input, (kh, kw, C) kernel."""
    if x.ndim != 4 or kernel.ndim != 3:
        raise DimensionError(
            f"depthwise_conv2d expects 4-D input and 3-D kernel, got {x.shape} and {kernel.shape}")
    b, h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if kc != c:
        raise DimensionError(
            f"depthwise channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    ho, wo, pad_h, pad_w = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), pad_h, pad_w, (0, 0)))
    patches = _extract_patches(xp, kh, kw, ho, wo, stride)
    data = np.einsum("bxyijc,ijc->bxyc", patches, kernel.data)

    def backward(g: np.ndarray) -> None:
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("bxyijc,bxyc->ijc", patches, g))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += g * kernel.data[i, j, :]
            _accumulate(x, _crop(dxp, pad_h, pad_w))

    return _make(data, (x, kernel), backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]):
    """Backpropagate from a scalar loss.

    Returns gradients for ``params``: a dict with the same keys when given a
    mapping, else a dict keyed by tensor identity.  Parameters the loss does
    not depend on get zero gradients.
    """
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    named = isinstance(params, Mapping)
    items = list(params.items()) if named else [(t, t) for t in params]

    order = _topo_order(loss)
    for node in order:
        node.grad = None
    for _, t in items:
        t.grad = None

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    out = {}
    for key, t in items:
        out[key] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords_per_input: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    All float inputs must be float64 (gradient checks always run in double);
    they are perturbed in place, so ``fn`` may simply close over the same
    tensors (e.g. a model whose parameters are in ``inputs``).  Returns the
    maximum relative error ``|analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8)`` over all checked coordinates of every input that
    requires a gradient.  Large inputs can be spot-checked by bounding
    ``max_coords_per_input``.
    """
    for t in inputs:
        if t.dtype.kind == "f" and t.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 inputs, got {t.dtype}")
    out = fn(*inputs)
    if out.shape != ():
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    checked = [t for t in inputs if t.requires_grad]
    grads = backward(out, checked)

    worst = 0.0
    for t in checked:
        analytic = grads[t].reshape(-1)
        flat = t.data.reshape(-1)
        coords = range(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_input, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs).item()
            flat[i] = orig - eps
            f_minus = fn(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
