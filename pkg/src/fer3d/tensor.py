"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Values live in numpy buffers (float32 for training, float64 for gradient
checks). Every differentiable op links its output to its inputs with
vector-Jacobian closures; ``Tensor.backward()`` replays them over a
topologically ordered ``GradTape``. Convolution and pooling are implemented
with strided window views plus GEMM, but their contracts (and the test
suite's brute-force oracle) are defined by the direct correlation sum.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
TENSOR_MAGIC = b"DIR3DTEN"

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=np.dtype(dtype))
    if arr.dtype in FLOAT_DTYPES:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float64)


class Tensor:
    """A dense array plus an optional link into the autodiff graph.

    ``data`` is the value buffer; ``grad`` accumulates the cotangent after
    ``backward()``. Tensors are immutable by convention once created; the
    optimizer alone rewrites parameter buffers in place between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = ()):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        tracked = _grad_enabled and any(p.requires_grad for p, _ in _parents)
        self.requires_grad = bool(requires_grad) or tracked
        self._parents = _parents if tracked else ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- graph ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable ``grad``."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}")
        GradTape(self).run()

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, shape):
        return reshape(self, shape)


class GradTape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Construction walks the graph depth-first; ``nodes`` lists every tensor
    with parents before children, so a single reverse sweep implements
    reverse-mode accumulation. Branches that do not feed the root are never
    visited and therefore contribute exactly zero gradient.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order
        self.root = root

    def run(self) -> None:
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib


def grad_map(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward on ``loss`` and return one gradient per named parameter.

    Parameters that never fed the loss get an all-zeros gradient.
    """
    for t in params.values():
        t.zero_grad()
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()}


# ---------------------------------------------------------------------------
# elementwise ops (asymmetric broadcast: b may broadcast against a's shape)
# ---------------------------------------------------------------------------

def _coerce_operand(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if b.dtype != a.dtype:
            raise ContractError(
                f"mixed dtypes {a.dtype.name} vs {b.dtype.name}; cast explicitly")
        return b
    return Tensor(np.asarray(b, dtype=a.dtype))


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out_shape = None
    if out_shape != a.shape:
        raise DimensionError(
            f"operand shape {b.shape} does not broadcast against {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down over broadcast axes so it matches ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _coerce_operand(a, b)
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data, _parents=(
        (a, lambda g: g),
        (b, lambda g: _reduce_to(g, b.shape)),
    ))
    return out


def subtract(a: Tensor, b) -> Tensor:
    b = _coerce_operand(a, b)
    _check_broadcast(a, b)
    return Tensor(a.data - b.data, _parents=(
        (a, lambda g: g),
        (b, lambda g: _reduce_to(-g, b.shape)),
    ))


def multiply(a: Tensor, b) -> Tensor:
    """Hadamard product; ``b`` may broadcast by singleton extents against ``a``."""
    b = _coerce_operand(a, b)
    _check_broadcast(a, b)
    return Tensor(a.data * b.data, _parents=(
        (a, lambda g: g * b.data),
        (b, lambda g: _reduce_to(g * a.data, b.shape)),
    ))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise ContractError("matmul needs two tensors")
    if b.dtype != a.dtype:
        raise ContractError(f"mixed dtypes {a.dtype.name} vs {b.dtype.name}")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    return Tensor(a.data @ b.data, _parents=(
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(x.data, axes), _parents=(
        (x, lambda g: np.transpose(g, inverse)),
    ))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return Tensor(x.data.reshape(shape), _parents=(
        (x, lambda g: g.reshape(old)),
    ))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    dtype = tensors[0].dtype
    for t in tensors:
        if t.dtype != dtype:
            raise ContractError("concat operands must share a dtype")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return vjp

    return Tensor(data, _parents=tuple(
        (t, make_vjp(i)) for i, t in enumerate(tensors)))


def time_slice(x: Tensor, t: int) -> Tensor:
    """Select step ``t`` from a [batch, T, ...] tensor."""
    if x.data.ndim < 2:
        raise DimensionError(f"time_slice expects [batch, T, ...], got {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, t] = g
        return full

    return Tensor(x.data[:, t], _parents=((x, vjp),))


def tensor_sum(x: Tensor) -> Tensor:
    return Tensor(np.asarray(x.data.sum(), dtype=x.dtype), _parents=(
        (x, lambda g: np.broadcast_to(g, x.shape).astype(x.dtype, copy=False)),
    ))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    # subgradient at 0 is 0
    return Tensor(out, _parents=((x, lambda g: g * (x.data > 0)),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    return Tensor(s, _parents=((x, lambda g: g * s * (1.0 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor(t, _parents=((x, lambda g: g * (1.0 - t * t)),))


# ---------------------------------------------------------------------------
# 3-D convolution and pooling
# ---------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(s) for s in v)
    if len(v) != 3:
        raise ContractError(f"expected 3 extents, got {v}")
    return v


def _pad_amounts(extent: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-extent // stride)  # ceil
        total = max((out - 1) * stride + kernel - extent, 0)
        # extra cell goes on the trailing side when odd
        return total // 2, total - total // 2
    raise ContractError(f"unknown padding mode {padding!r}")


def _out_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    before, after = _pad_amounts(extent, kernel, stride, padding)
    padded = extent + before + after
    if kernel > padded:
        raise DimensionError(
            f"window extent {kernel} exceeds padded input extent {padded}")
    return (padded - kernel) // stride + 1


def conv3d_output_shape(in_shape, kernel_shape, stride, padding) -> tuple:
    """Shape contract of conv3d, usable without executing anything."""
    t, h, w, cin = in_shape
    kt, kh, kw, kcin, cout = kernel_shape
    if kcin != cin:
        raise DimensionError(
            f"kernel expects {kcin} input channels, input has {cin}")
    st, sh, sw = _triple(stride)
    return (_out_extent(t, kt, st, padding),
            _out_extent(h, kh, sh, padding),
            _out_extent(w, kw, sw, padding),
            cout)


def _window_view(xp: np.ndarray, kshape, stride) -> np.ndarray:
    """Strided view [B, T', H', W', kT, kH, kW, C] over padded input."""
    b, tp, hp, wp, c = xp.shape
    kt, kh, kw = kshape
    st, sh, sw = stride
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sb, stt, shh, sww, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, to, ho, wo, kt, kh, kw, c),
        strides=(sb, stt * st, shh * sh, sww * sw, stt, shh, sww, sc),
        writeable=False,
    )


def _with_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 4:
        return x.data[None], True
    if x.data.ndim == 5:
        return x.data, False
    raise DimensionError(
        f"expected [T,H,W,C] or [batch,T,H,W,C], got {x.shape}")


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), padding: str = "valid") -> Tensor:
    """Cross-correlate ``x`` [.., T,H,W,Cin] with ``kernel`` [kT,kH,kW,Cin,Cout].

    Equals the direct six-loop correlation sum; 'same' with stride 1
    preserves every extent.
    """
    data, squeeze = _with_batch(x)
    if kernel.data.ndim != 5:
        raise DimensionError(f"kernel must be 5-D, got {kernel.shape}")
    if kernel.dtype != x.dtype:
        raise ContractError(f"mixed dtypes {x.dtype.name} vs {kernel.dtype.name}")
    kt, kh, kw, kcin, cout = kernel.shape
    b, t, h, w, cin = data.shape
    if kcin != cin:
        raise DimensionError(
            f"kernel expects {kcin} input channels, input has {cin}")
    st, sh, sw = _triple(stride)
    pads = [(0, 0),
            _pad_amounts(t, kt, st, padding),
            _pad_amounts(h, kh, sh, padding),
            _pad_amounts(w, kw, sw, padding),
            (0, 0)]
    xp = np.pad(data, pads) if any(p != (0, 0) for p in pads) else data
    for ext, k in zip(xp.shape[1:4], (kt, kh, kw)):
        if k > ext:
            raise DimensionError(
                f"kernel extent {k} exceeds padded input extent {ext}")
    windows = _window_view(xp, (kt, kh, kw), (st, sh, sw))
    to, ho, wo = windows.shape[1:4]
    cols = windows.reshape(b * to * ho * wo, kt * kh * kw * cin)
    kmat = kernel.data.reshape(kt * kh * kw * cin, cout)
    out = (cols @ kmat).reshape(b, to, ho, wo, cout)

    xp_shape = xp.shape
    crop = tuple(slice(p[0], p[0] + e) for p, e in
                 zip(pads[1:4], (t, h, w)))

    def vjp_x(g):
        gc = g.reshape(b * to * ho * wo, cout)
        dcols = (gc @ kmat.T).reshape(b, to, ho, wo, kt, kh, kw, cin)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for it in range(kt):
            ts = slice(it, it + st * (to - 1) + 1, st)
            for ih in range(kh):
                hs = slice(ih, ih + sh * (ho - 1) + 1, sh)
                for iw in range(kw):
                    ws = slice(iw, iw + sw * (wo - 1) + 1, sw)
                    dxp[:, ts, hs, ws, :] += dcols[:, :, :, :, it, ih, iw, :]
        dx = dxp[:, crop[0], crop[1], crop[2], :]
        return dx[0] if squeeze else dx

    def vjp_k(g):
        gc = g.reshape(b * to * ho * wo, cout)
        return (cols.T @ gc).reshape(kernel.shape)

    out_t = out[0] if squeeze else out
    return Tensor(out_t, _parents=((x, vjp_x), (kernel, vjp_k)))


def pool3d(x: Tensor, window, stride=None, mode: str = "average",
           padding: str = "valid") -> Tensor:
    """Windowed max/average pooling over the T, H, W axes.

    Average-pool backward spreads gradient uniformly over the window
    (divisor counts padded cells under 'same'); max-pool backward routes to
    the first argmax in scan order.
    """
    if mode not in ("max", "average"):
        raise ContractError(f"unknown pooling mode {mode!r}")
    data, squeeze = _with_batch(x)
    kt, kh, kw = _triple(window)
    st, sh, sw = _triple(stride if stride is not None else window)
    b, t, h, w, c = data.shape
    pads = [(0, 0),
            _pad_amounts(t, kt, st, padding),
            _pad_amounts(h, kh, sh, padding),
            _pad_amounts(w, kw, sw, padding),
            (0, 0)]
    fill = -np.inf if mode == "max" else 0.0
    if any(p != (0, 0) for p in pads):
        xp = np.pad(data, pads, constant_values=fill)
    else:
        xp = data
    for ext, k in zip(xp.shape[1:4], (kt, kh, kw)):
        if k > ext:
            raise DimensionError(
                f"window extent {k} exceeds padded input extent {ext}")
    windows = _window_view(xp, (kt, kh, kw), (st, sh, sw))
    to, ho, wo = windows.shape[1:4]
    kvol = kt * kh * kw
    flat = windows.reshape(b, to, ho, wo, kvol, c)

    xp_shape = xp.shape
    crop = tuple(slice(p[0], p[0] + e) for p, e in zip(pads[1:4], (t, h, w)))

    def scatter(contrib_per_offset):
        """contrib_per_offset(j) -> [b,to,ho,wo,c] slice added at offset j."""
        dxp = np.zeros(xp_shape, dtype=x.dtype)
        j = 0
        for it in range(kt):
            ts = slice(it, it + st * (to - 1) + 1, st)
            for ih in range(kh):
                hs = slice(ih, ih + sh * (ho - 1) + 1, sh)
                for iw in range(kw):
                    ws = slice(iw, iw + sw * (wo - 1) + 1, sw)
                    dxp[:, ts, hs, ws, :] += contrib_per_offset(j)
                    j += 1
        dx = dxp[:, crop[0], crop[1], crop[2], :]
        return dx[0] if squeeze else dx

    if mode == "average":
        out = flat.mean(axis=4)

        def vjp(g):
            share = g / kvol
            return scatter(lambda j: share)
    else:
        idx = flat.argmax(axis=4)  # first max in scan order
        out = np.take_along_axis(flat, idx[:, :, :, :, None, :], axis=4)[:, :, :, :, 0, :]

        def vjp(g):
            return scatter(lambda j: g * (idx == j))

    out_t = out[0] if squeeze else np.ascontiguousarray(out)
    return Tensor(out_t, _parents=((x, vjp),))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of row-wise softmax against one-hot labels."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.data.ndim != 2 or lab.shape != logits.shape:
        raise DimensionError(
            f"logits {logits.shape} and labels {getattr(lab, 'shape', None)} must both be [batch, K]")
    if not (np.isin(lab, (0.0, 1.0)).all() and np.array_equal(
            lab.sum(axis=1), np.ones(lab.shape[0]))):
        raise ContractError("labels must be one-hot rows")
    batch = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -(lab * logp).sum() / batch
    probs = np.exp(logp)

    def vjp(g):
        return g * (probs - lab) / batch

    return Tensor(np.asarray(loss, dtype=logits.dtype), _parents=((logits, vjp),))


# ---------------------------------------------------------------------------
# flat binary serialization
# ---------------------------------------------------------------------------

_PRECISION_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_tensor(fp, array) -> None:
    """Write magic, precision tag, rank, u64 extents, then raw LE scalars."""
    data = array.data if isinstance(array, Tensor) else np.asarray(array)
    if data.dtype not in FLOAT_DTYPES:
        raise ContractError(f"only float32/float64 tensors serialize, got {data.dtype}")
    tag = data.dtype.itemsize
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<BI", tag, data.ndim))
    fp.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fp.write(np.ascontiguousarray(data, dtype=_PRECISION_TAGS[tag]).tobytes())


def _read_exact(fp, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp) -> np.ndarray:
    magic = _read_exact(fp, len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    tag, rank = struct.unpack("<BI", _read_exact(fp, 5))
    if tag not in _PRECISION_TAGS:
        raise FormatError(f"unknown precision tag {tag}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fp, count * tag)
    arr = np.frombuffer(raw, dtype=_PRECISION_TAGS[tag]).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)
