"""Dense fp64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation that touches a tensor requiring gradients
records its parents and a backward closure on the output.  ``backward(loss)``
walks the recorded graph once in reverse topological order and accumulates
adjoints into ``.grad``.  The graph lives only as long as the output tensors
are referenced, so dropping the loss after a step frees the whole pass.

Storage and raw arithmetic are delegated to numpy (always ``float64``); the
graph structure and every backward rule are defined here.

Implicit broadcasting for elementwise ops is restricted to *leading* 1-sized
axes: one operand may have shape ``(1,)*s + rest`` where ``rest`` matches the
trailing axes of the other.  Anything else must go through an explicit
``broadcast_to``, which keeps shape expansion visible at the call site.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "no_grad", "grad_enabled",
    "add", "sub", "mul", "div", "matmul",
    "sigmoid", "silu", "softmax_dim0", "exp", "log",
    "cumsum", "outer", "reshape", "transpose", "reduce_sum",
    "index_select", "concatenate", "broadcast_to", "tril", "clamp_min",
    "save_tensors", "load_tensors",
]

_grad_mode = True


def grad_enabled() -> bool:
    return _grad_mode


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_mode
    prev = _grad_mode
    _grad_mode = False
    try:
        yield
    finally:
        _grad_mode = prev


class Tensor:
    """A float64 array plus an optional position in the autodiff graph.

    ``requires_grad=True`` marks a leaf whose ``.grad`` buffer survives
    across backward calls (gradients accumulate until ``zero_grad``).
    Tensors produced by operations carry their parents in ``_prev`` and a
    closure in ``_bwd``; their ``.grad`` is also populated by ``backward``
    so intermediate adjoints can be inspected in tests.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._bwd = None
        self._op = ""

    # -- conveniences ------------------------------------------------------
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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_mode and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._bwd = bwd
        out._op = op
    return out


# -- broadcasting ----------------------------------------------------------

def _is_leading_expansion(small: tuple, big: tuple) -> bool:
    """True if ``small`` equals ``big`` with some leading axes collapsed to 1."""
    for s in range(len(big) + 1):
        if small[s:] == big[s:] and all(x == 1 for x in small[:s]):
            return True
    return False


def _broadcast_result_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    r = max(len(sa), len(sb))
    pa = (1,) * (r - len(sa)) + sa
    pb = (1,) * (r - len(sb)) + sb
    if pa == pb:
        return pa
    if _is_leading_expansion(pa, pb):
        return pb
    if _is_leading_expansion(pb, pa):
        return pa
    raise ValueError(
        f"{op}: shapes {sa} and {sb} are not identical nor related by "
        f"leading-1 broadcasting"
    )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint over broadcast axes back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape, "add")
    data = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape, "sub")
    data = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    data = ad * bd

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _result(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    if np.abs(bd).min() < 1e-300:
        raise ValueError("div: denominator magnitude below 1e-300 (degenerate input)")
    data = ad / bd

    def bwd(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * data / bd, b.shape)

    return _result(data, (a, b), bwd, "div")


# -- matmul ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Both operands must be at least rank 2.  Rank >2 operands are treated as
    stacks of matrices over identical leading axes (no broadcasting of the
    stack dimensions).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be rank >= 2, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim:
        raise ValueError(f"matmul: rank mismatch between {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: stack dims differ between {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def bwd(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _result(data, (a, b), bwd, "matmul")


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Outer product of two rank-1 tensors: out[m, j] = u[m] * v[j]."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError(f"outer: expects rank-1 operands, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data
    data = np.outer(ud, vd)

    def bwd(g):
        return g @ vd, ud @ g

    return _result(data, (u, v), bwd, "outer")


# -- activations and transcendentals ----------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), bwd, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); silu(1) = 0.7310585786300049."""
    x = _as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    data = xd * s

    def bwd(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return _result(data, (x,), bwd, "silu")


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        return (g * data,)

    return _result(data, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    if xd.size and xd.min() <= 0.0:
        raise ValueError("log: domain error, input must be strictly positive")
    data = np.log(xd)

    def bwd(g):
        return (g / xd,)

    return _result(data, (x,), bwd, "log")


def softmax_dim0(x: Tensor) -> Tensor:
    """Softmax along axis 0 (shift-stabilized; columns sum to 1)."""
    x = _as_tensor(x)
    xd = x.data
    z = np.exp(xd - xd.max(axis=0, keepdims=True))
    s = z / z.sum(axis=0, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=0, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), bwd, "softmax_dim0")


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    """Inclusive cumulative sum.  Backward is the reversed cumulative sum."""
    x = _as_tensor(x)
    data = np.cumsum(x.data, axis=axis)

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _result(data, (x,), bwd, "cumsum")


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    orig = x.shape
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(orig),)

    return _result(data, (x,), bwd, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes (defaults to reversing them, i.e. 2-D transpose)."""
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _result(data, (x,), bwd, "transpose")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, ax)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _result(data, (x,), bwd, "reduce_sum")


def index_select(x: Tensor, axis: int, indices) -> Tensor:
    """Gather slices along ``axis``; backward scatter-adds into the source."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"index_select: indices must be rank 1, got shape {idx.shape}")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"index_select: index out of range for axis of size {n}")
    data = np.take(x.data, idx, axis=axis)
    in_shape = x.shape

    def bwd(g):
        z = np.zeros(in_shape)
        zm = np.moveaxis(z, axis, 0)
        np.add.at(zm, idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _result(data, (x,), bwd, "index_select")


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concatenate: empty tensor list")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(data, ts, bwd, "concatenate")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly expand 1-sized (or missing leading) axes to ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape)
    in_shape = x.shape

    def bwd(g):
        extra = g.ndim - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, in_shape)) if ss == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(in_shape),)

    return _result(data, (x,), bwd, "broadcast_to")


def tril(x: Tensor) -> Tensor:
    """Zero the strictly upper triangle of the last two axes (assignment, not
    multiplication, so masked garbage cannot leak NaN back in)."""
    x = _as_tensor(x)
    data = np.tril(x.data)

    def bwd(g):
        return (np.tril(g),)

    return _result(data, (x,), bwd, "tril")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    xd = x.data
    data = np.maximum(xd, floor)
    mask = xd > floor

    def bwd(g):
        return (g * mask,)

    return _result(data, (x,), bwd, "clamp_min")


# -- backward engine -----------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``.grad`` for every node in the graph.

    Calling backward twice on the same graph adds the gradients again
    (exactly doubling them); leaves not reachable from ``loss`` are left
    untouched, so their gradient reads as zero.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require gradients")

    order = _toposort(loss)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._bwd is None:
            continue
        contributions = node._bwd(g)
        for parent, contrib in zip(node._prev, contributions):
            if contrib is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + contrib
            else:
                adjoint[pid] = contrib


# -- binary tensor serialization ------------------------------------------------
#
# Layout (all integers little-endian):
#   magic  b"HGT1"
#   u32    format version (1)
#   u32    tensor count
#   per tensor:
#     u32      name length in bytes
#     bytes    UTF-8 name
#     u32      rank
#     u64[r]   dims
#     f64[...] data, C order
# fp64 payloads are written verbatim, so save -> load round-trips bit-exactly.

_MAGIC = b"HGT1"
_VERSION = 1


def save_tensors(path, tensors: dict):
    """Write named arrays/Tensors to ``path`` in the HGT1 container."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, t in tensors.items():
            # tobytes() serializes in C order regardless of memory layout
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path) -> dict:
    """Read an HGT1 container; returns name -> float64 ndarray (ordered)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"not an HGT1 tensor file: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported HGT1 version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError("HGT1 container has trailing bytes")
    return out
