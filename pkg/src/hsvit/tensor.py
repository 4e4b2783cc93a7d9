"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional tape node: the parent
tensors it was computed from and a closure that maps the output gradient
to per-parent gradients.  Calling ``backward`` on a scalar loss walks the
tape in reverse topological order and accumulates ``grad`` on every
tensor that requires it.  Graphs are single use: build, backward, drop.

Operations never mutate their inputs.  All arithmetic is float64; there
is no implicit dtype promotion because nothing else ever enters.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UsageError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @staticmethod
    def _wrap(arr: np.ndarray, parents=(), backward=None) -> "Tensor":
        # Internal constructor: takes ownership of arr without copying.
        out = Tensor.__new__(Tensor)
        out.data = arr
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if backward is not None and grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def clone(self) -> "Tensor":
        out = Tensor._wrap(self.data.copy())
        out.requires_grad = self.requires_grad
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, gradient=None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` over the whole tape.

        ``gradient`` seeds the output gradient; it defaults to 1 and is
        only optional for single-element tensors.
        """
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        if gradient is None:
            if self.data.size != 1:
                raise UsageError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(gradient, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {seed.shape} does not match tensor shape {self.shape}"
                )
        order = self._topo_order()
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def _topo_order(self):
        # Iterative post-order walk; recursion depth would be a liability
        # on deep tapes.  Visits parents before children, deterministically.
        order = []
        seen = set()
        stack = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self):
        return transpose(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean0(self):
        return mean0(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  Also accepts a trailing-shape bias for b.

    b may either match a exactly or match a suffix of a's shape, in which
    case it is broadcast over the leading axes (the usual bias pattern).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        k = a.ndim - b.ndim
        if k <= 0 or a.shape[k:] != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
        lead = tuple(range(k))

        def backward(g):
            return g, g.sum(axis=lead)

        return Tensor._wrap(a.data + b.data, (a, b), backward)

    def backward(g):
        return g, g

    return Tensor._wrap(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g, -g

    return Tensor._wrap(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g * b.data, g * a.data

    return Tensor._wrap(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return Tensor._wrap(-a.data, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._wrap(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._wrap(np.where(mask, a.data, 0.0), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._wrap(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")

    def backward(g):
        return (g.T.copy(),)

    return Tensor._wrap(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new_shape = tuple(int(s) for s in shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {new_shape}")
    old_shape = a.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return Tensor._wrap(a.data.reshape(new_shape), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along axis 0 or 1, as a copy."""
    if axis not in (0, 1) or axis >= a.ndim:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {a.shape}")
    extent = a.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range for extent {extent}")
    index = (slice(start, start + length),) if axis == 0 else (slice(None), slice(start, start + length))
    full_shape = a.shape

    def backward(g):
        dx = np.zeros(full_shape)
        dx[index] = g
        return (dx,)

    return Tensor._wrap(a.data[index].copy(), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat of an empty sequence")
    if axis not in (0, 1) or axis >= tensors[0].ndim:
        raise ShapeError(f"concat: axis {axis} invalid for shape {tensors[0].shape}")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(
            t.shape[d] != base[d] for d in range(len(base)) if d != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {base} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(sizes)):
            sl = slice(offsets[i], offsets[i + 1])
            pieces.append(g[sl] if axis == 0 else g[:, sl])
        return tuple(pieces)

    return Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        shape = a.shape

        def backward(g):
            return (np.full(shape, float(g)),)

        return Tensor._wrap(np.array(a.data.sum()), (a,), backward)
    if axis != 0:
        raise ShapeError("sum supports axis=None or axis=0")
    n = a.shape[0]

    def backward(g):
        return (np.broadcast_to(g, (n,) + g.shape).copy(),)

    return Tensor._wrap(a.data.sum(axis=0), (a,), backward)


def mean0(a: Tensor) -> Tensor:
    """Mean over axis 0.  Reduction order is fixed by the row order."""
    if a.ndim < 1 or a.shape[0] < 1:
        raise ShapeError(f"mean0 needs a non-empty leading axis, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, (n,) + g.shape).copy(),)

    return Tensor._wrap(a.data.mean(axis=0), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinear normalizations


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._wrap(out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor._wrap(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} and beta {beta.shape} must be ({d},)"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._wrap(xhat * gamma.data + beta.data, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# spatial operations


@dataclass
class ConvKernel:
    """Weights for one 2-d convolution: [out_ch, in_ch, kh, kw] plus bias."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got {self.weights.shape}")
        out_ch = self.weights.shape[0]
        if self.bias.shape != (out_ch,):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match {out_ch} output channels"
            )
        if min(self.weights.shape) < 1:
            raise ShapeError(f"conv weights have a zero extent: {self.weights.shape}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"conv padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def parameters(self):
        return [self.weights, self.bias]

    def clone(self) -> "ConvKernel":
        return ConvKernel(self.weights.clone(), self.bias.clone(), self.stride, self.padding)


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv geometry invalid: extent {extent}, kernel {k}, "
            f"stride {stride}, padding {padding} gives no integer output extent"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """2-d cross-correlation of a [C,H,W] input with a ConvKernel.

    Implemented as im2col plus one matrix product; the backward pass
    scatters column gradients back through the same geometry.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    out_ch, in_ch, kh, kw = kernel.weights.shape
    if c != in_ch:
        raise ShapeError(
            f"conv2d: input has {c} channels (shape {x.shape}) but kernel expects "
            f"{in_ch} (shape {kernel.weights.shape})"
        )
    stride, padding = kernel.stride, kernel.padding
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)

    if padding:
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding))
        padded[:, padding : padding + h, padding : padding + w] = x.data
    else:
        padded = x.data
    s0, s1, s2 = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    cols = view.reshape(c * kh * kw, ho * wo)
    w2 = kernel.weights.data.reshape(out_ch, c * kh * kw)
    out = (w2 @ cols + kernel.bias.data[:, None]).reshape(out_ch, ho, wo)

    def backward(g):
        gm = g.reshape(out_ch, ho * wo)
        dw = (gm @ cols.T).reshape(kernel.weights.shape)
        db = gm.sum(axis=1)
        dcols = (w2.T @ gm).reshape(c, kh, kw, ho, wo)
        dpadded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, i, j
                ]
        if padding:
            dx = dpadded[:, padding : padding + h, padding : padding + w]
        else:
            dx = dpadded
        return dx, dw, db

    return Tensor._wrap(out, (x, kernel.weights, kernel.bias), backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling over square windows; ties route to the first index."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d input must be [C,H,W], got {x.shape}")
    if window < 1 or stride < 1:
        raise ConfigError(f"maxpool2d: window {window} and stride {stride} must be >= 1")
    c, h, w = x.shape
    if window > h or window > w:
        raise ConfigError(f"maxpool2d: window {window} exceeds input extents {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    s0, s1, s2 = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, (c, ho, wo, window, window), (s0, s1 * stride, s2 * stride, s1, s2)
    )
    flat = view.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # argmax takes the first maximum
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros((c, h, w))
        ci, oi, oj = np.indices((c, ho, wo))
        wi, wj = np.divmod(arg, window)
        np.add.at(dx, (ci, oi * stride + wi, oj * stride + wj), g)
        return (dx,)

    return Tensor._wrap(out.copy(), (x,), backward)


def extract_patches(x: Tensor, patch: int) -> Tensor:
    """Split [C,H,W] into non-overlapping patches, one row per patch.

    Output is [(H/patch)*(W/patch), C*patch*patch]; rows scan the patch
    grid in row-major order.
    """
    if x.ndim != 3:
        raise ShapeError(f"extract_patches input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"extract_patches: {h}x{w} not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    grid = x.data.reshape(c, gh, patch, gw, patch)
    out = grid.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)

    def backward(g):
        back = g.reshape(gh, gw, c, patch, patch).transpose(2, 0, 3, 1, 4)
        return (back.reshape(c, h, w).copy(),)

    return Tensor._wrap(out.copy(), (x,), backward)


# ---------------------------------------------------------------------------
# serialization: little-endian rank, extents, then float64 payload


def tensor_to_bytes(t: Tensor) -> bytes:
    header = struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes) -> Tensor:
    if len(blob) < 4:
        raise FormatError("tensor blob shorter than its rank field")
    (rank,) = struct.unpack_from("<I", blob, 0)
    if rank > 8:
        raise FormatError(f"tensor blob declares implausible rank {rank}")
    head = 4 + 4 * rank
    if len(blob) < head:
        raise FormatError("tensor blob truncated inside its extent list")
    shape = struct.unpack_from(f"<{rank}I", blob, 4)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = head + 8 * count
    if len(blob) != expected:
        raise FormatError(f"tensor blob is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=head, count=count).astype(np.float64)
    return Tensor._wrap(data.reshape(shape))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
