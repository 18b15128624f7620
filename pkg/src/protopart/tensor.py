"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the tensor it produces, so the produced tensors collectively form the tape.
``backward`` walks that tape in reverse topological order and accumulates
gradients on grad-enabled leaves.  The op set is deliberately small: exactly
what a convolutional prototype network and its losses need, nothing more.

All arithmetic is float64.  numpy supplies the array kernels; the gradient
rules live here.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DataError, DimensionError, DomainError, NumericError

_GRAD_STATE = threading.local()   # each thread records on its own tape


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the context (evaluation-only paths)."""
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


class Tensor:
    """A dense float64 array with optional gradient tracking.

    Tensors are treated as immutable values once produced by an operation.
    Only the optimizer reassigns leaf ``data``, and it does so by replacing
    the array rather than writing through views.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*tensors: Tensor) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in tensors)


def _attach(out: Tensor, parents, backward_fn) -> None:
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward_fn = backward_fn


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def assert_all_finite(x, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        bad = arr[~np.isfinite(arr)]
        raise NumericError(f"{what} contains {bad.size} non-finite value(s), e.g. {bad.flat[0]!r}")


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Populate ``grad`` on every grad-enabled leaf reachable from ``loss``.

    Repeated calls without clearing grads accumulate, which is the documented
    contract; the trainer resets grads before each step.  With ``free_graph``
    (the default) the recorded tape is torn down afterwards — backward
    closures capture large buffers and form reference cycles, so leaving the
    graph to the cycle collector lets training runs balloon.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any grad-enabled leaf (empty tape)")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn()
    if free_graph:
        for node in topo:
            if node._backward_fn is not None:   # interior node: grad no longer needed
                node.grad = None
                node._backward_fn = None
                node._parents = ()


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if _tracking(a, b):
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        _attach(out, (a, b), bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    if _tracking(a):
        def bw():
            _accum(a, -out.grad)
        _attach(out, (a,), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if _tracking(a, b):
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        _attach(out, (a, b), bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul takes 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _tracking(a, b):
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        _attach(out, (a, b), bw)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if _tracking(a):
        mask = a.data > 0
        def bw():
            _accum(a, out.grad * mask)
        _attach(out, (a,), bw)
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    if _tracking(a):
        sign = np.sign(a.data)
        def bw():
            _accum(a, out.grad * sign)
        _attach(out, (a,), bw)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    if _tracking(a):
        def bw():
            _accum(a, out.grad * s * (1.0 - s))
        _attach(out, (a,), bw)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    if _tracking(a):
        def bw():
            _accum(a, out.grad * out.data)
        _attach(out, (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log of non-positive value (min={a.data.min()!r}); add an epsilon at the call site")
    out = Tensor(np.log(a.data))
    if _tracking(a):
        def bw():
            _accum(a, out.grad / a.data)
        _attach(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if _tracking(a):
        def bw():
            _accum(a, out.grad.reshape(a.data.shape))
        _attach(out, (a,), bw)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    if _tracking(a):
        inv = tuple(np.argsort(axes))
        def bw():
            _accum(a, np.transpose(out.grad, inv))
        _attach(out, (a,), bw)
    return out


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into place."""
    a = as_tensor(a)
    out = Tensor(a.data[key])
    if _tracking(a):
        def bw():
            g = np.zeros_like(a.data)
            g[key] = out.grad
            _accum(a, g)
        _attach(out, (a,), bw)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _tracking(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bw():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, g[tuple(sl)])
        _attach(out, tuple(tensors), bw)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    if _tracking(*tensors):
        def bw():
            g = out.grad
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _accum(t, np.take(g, i, axis=axis))
        _attach(out, tuple(tensors), bw)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracking(a):
        def bw():
            _accum(a, _expand_reduced(out.grad, a.data.shape, axis, keepdims))
        _attach(out, (a,), bw)
    return out


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _tracking(a):
        count = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
        def bw():
            _accum(a, _expand_reduced(out.grad, a.data.shape, axis, keepdims) / count)
        _attach(out, (a,), bw)
    return out


def max_(a, axis: int, keepdims: bool = False):
    """Max along one axis.  Returns (values, argmax); gradient flows only to
    the selected elements (first index wins on ties)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = Tensor(vals if keepdims else np.squeeze(vals, axis=axis))
    if _tracking(a):
        def bw():
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            gz = np.zeros_like(a.data)
            np.put_along_axis(gz, np.expand_dims(idx, axis), g, axis=axis)
            _accum(a, gz)
        _attach(out, (a,), bw)
    return out, idx


def topk(a, k: int):
    """Top-k values along the last axis, sorted descending.

    Ties break toward the lower index (stable sort), making the selection
    deterministic.  Returns (values, indices); gradient is routed to the
    selected entries only.
    """
    a = as_tensor(a)
    n = a.data.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"topk k={k} out of range for axis length {n}")
    if k == 1:
        idx = np.argmax(a.data, axis=-1)[..., None]
    else:
        idx = np.argsort(-a.data, axis=-1, kind="stable")[..., :k]
    vals = np.take_along_axis(a.data, idx, axis=-1)
    out = Tensor(vals)
    if _tracking(a):
        def bw():
            gz = np.zeros_like(a.data)
            np.put_along_axis(gz, idx, out.grad, axis=-1)
            _accum(a, gz)
        _attach(out, (a,), bw)
    return out, idx


def log_softmax(a, axis: int = -1) -> Tensor:
    """Log of softmax along ``axis``, stabilized with the max-shift trick."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    if _tracking(a):
        def bw():
            g = out.grad
            _accum(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))
        _attach(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold [B,C,H,W] into [B*Ho*Wo, C*kh*kw] patches (row-major patch order)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    d6 = dcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] with filters [F,C,kh,kw].

    Differentiable w.r.t. both input and weight.  Bias, when a layer needs
    one, is a separate broadcast add.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    b, c, h, wid = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {w.data.shape} larger than padded input {x.data.shape} (padding={padding})")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(f, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_data))
    if _tracking(x, w):
        def bw():
            g = out.grad.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
            if w.requires_grad:
                _accum(w, (g.T @ cols).reshape(f, c, kh, kw))
            if x.requires_grad:
                dcols = g @ wmat
                _accum(x, _col2im(dcols, x.data.shape, kh, kw, stride, padding, ho, wo))
        _attach(out, (x, w), bw)
    return out


# ---------------------------------------------------------------------------
# sampling and normalization
# ---------------------------------------------------------------------------

def bilinear_sample(featmap, coords) -> Tensor:
    """Sample a [D,H,W] feature map at fractional (y, x) coordinates.

    Out-of-range coordinates clamp to the border.  Integer coordinates are an
    exact gather.  Differentiable w.r.t. the feature map and, when ``coords``
    is a grad-enabled tensor, w.r.t. the coordinates.
    """
    featmap = as_tensor(featmap)
    coords = as_tensor(coords)
    if featmap.data.ndim != 3:
        raise DimensionError(f"bilinear_sample needs a [D,H,W] feature map, got {featmap.data.shape}")
    d, h, w = featmap.data.shape
    c = coords.data.reshape(-1, 2) if coords.data.size else np.zeros((0, 2))
    n = c.shape[0]
    if n == 0:
        out = Tensor(np.zeros((0, d)))
        return out

    y = c[:, 0]
    x = c[:, 1]
    yc = np.clip(y, 0.0, h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0

    ft = featmap.data.transpose(1, 2, 0)  # [H,W,D] for row gathers
    v00 = ft[y0, x0]
    v01 = ft[y0, x1]
    v10 = ft[y1, x0]
    v11 = ft[y1, x1]
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    vals = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    exact = (fy == 0.0) & (fx == 0.0)
    if exact.any():
        vals[exact] = v00[exact]  # bit-exact gather at grid points
    out = Tensor(vals)

    if _tracking(featmap, coords):
        def bw():
            g = out.grad
            if featmap.requires_grad:
                df = np.zeros((h, w, d))
                np.add.at(df, (y0, x0), g * w00)
                np.add.at(df, (y0, x1), g * w01)
                np.add.at(df, (y1, x0), g * w10)
                np.add.at(df, (y1, x1), g * w11)
                _accum(featmap, df.transpose(2, 0, 1))
            if coords.requires_grad:
                dy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
                dx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
                my = ((y >= 0.0) & (y <= h - 1.0)).astype(np.float64)
                mx = ((x >= 0.0) & (x <= w - 1.0)).astype(np.float64)
                gy = (g * dy).sum(axis=1) * my
                gx = (g * dx).sum(axis=1) * mx
                _accum(coords, np.stack([gy, gx], axis=1).reshape(coords.data.shape))
        _attach(out, (featmap, coords), bw)
    return out


def renormalize(vectors, target_norm: float):
    """Rescale each row of [n,D] to 2-norm ``target_norm``, keeping direction.

    Zero rows cannot be rescaled: they come back as zero rows with zero
    gradient, and the second return value flags them so callers can treat
    them as zero-similarity.
    """
    vectors = as_tensor(vectors)
    if vectors.data.ndim != 2:
        raise DimensionError(f"renormalize needs [n,D] rows, got {vectors.data.shape}")
    if not target_norm > 0:
        raise DomainError(f"target_norm must be positive, got {target_norm}")
    v = vectors.data
    r = np.sqrt((v * v).sum(axis=1))
    zero = r == 0.0
    safe_r = np.where(zero, 1.0, r)
    scale = np.where(zero, 0.0, target_norm / safe_r)
    out = Tensor(v * scale[:, None])
    if _tracking(vectors):
        def bw():
            g = out.grad
            dot = (v * g).sum(axis=1)
            gv = scale[:, None] * g - (scale * dot / (safe_r ** 2))[:, None] * v
            gv[zero] = 0.0
            _accum(vectors, gv)
        _attach(out, (vectors,), bw)
    return out, zero.copy()


# ---------------------------------------------------------------------------
# serialization: "PPXT" flat binary tensor records
# ---------------------------------------------------------------------------

PPXT_MAGIC = b"PPXT"
PPXT_VERSION = 1


def write_tensor_record(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    f.write(PPXT_MAGIC)
    f.write(struct.pack("<HH", PPXT_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor_record(f) -> np.ndarray:
    magic = f.read(4)
    if magic != PPXT_MAGIC:
        raise DataError(f"bad tensor record magic {magic!r}; expected {PPXT_MAGIC!r}")
    version, rank = struct.unpack("<HH", f.read(4))
    if version != PPXT_VERSION:
        raise DataError(f"unsupported tensor record version {version}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise DataError("truncated tensor record")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_tensors(path, arrays) -> None:
    with open(path, "wb") as f:
        for arr in arrays:
            write_tensor_record(f, arr)


def load_tensors(path, expected: int | None = None) -> list:
    out = []
    with open(path, "rb") as f:
        while True:
            start = f.tell()
            if not f.read(4):
                break
            f.seek(start)
            out.append(read_tensor_record(f))
    if expected is not None and len(out) != expected:
        raise DataError(f"expected {expected} tensor records in {path}, found {len(out)}")
    return out
