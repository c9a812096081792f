"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors append records to
a module-global :class:`GradientTape`; :func:`backward` replays the records in
reverse, accumulating gradients additively into every tensor that requires
them. The tape covers exactly one forward pass and is consumed by the backward
pass that follows it.

Training runs in float32; gradient-check tests build float64 graphs by passing
64-bit arrays in. All operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, GraphError, ShapeError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class GradientTape:
    """Ordered record of operations for one forward pass.

    Records are appended in execution order, which is a topological order of
    the computation graph; replaying them reversed visits every consumer of a
    tensor before the tensor's own record, so each gradient is complete when
    it is propagated. A tape is single-use: :func:`backward` clears it and
    marks it consumed.
    """

    __slots__ = ("records", "consumed")

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False


_active_tape: GradientTape | None = None
_grad_enabled: bool = True


def active_tape() -> GradientTape:
    """Return the tape currently recording, starting a fresh one if needed."""
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = GradientTape()
    return _active_tape


def reset_tape() -> None:
    """Drop the active tape without running backward (e.g. after a no-op step)."""
    global _active_tape
    _active_tape = None


@contextlib.contextmanager
def no_grad():
    """Context manager that suppresses tape recording."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked on the gradient tape.

    ``node`` is the index of the record that produced this tensor on ``tape``,
    or None for leaves and untracked results.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are treated as untracked constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``fresh`` marks arrays the caller allocated exclusively for this tensor;
    anything else (views of an upstream gradient, shared buffers) is copied on
    first store so later in-place accumulation cannot corrupt other grads.
    """
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable[[np.ndarray], None]) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        tape = active_tape()
        out.requires_grad = True
        out.tape = tape
        out.node = len(tape.records)
        tape.records.append((out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Reverse-replay the tape that produced ``loss``, seeding with gradient 1.

    Gradients accumulate additively into every requiring tensor reachable from
    the loss. The tape is cleared and marked consumed afterwards.
    """
    global _active_tape
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise GraphError("loss is not attached to a gradient tape")
    if tape.consumed:
        raise GraphError("gradient tape was already consumed by a previous backward")
    loss.grad = np.ones_like(loss.data)
    for out, vjp in reversed(tape.records):
        if out.grad is not None:
            vjp(out.grad)
    tape.records.clear()
    tape.consumed = True
    if tape is _active_tape:
        _active_tape = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, fresh=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            _accumulate(b, gb, fresh=gb is not g)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, fresh=ga is not g)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape), fresh=True)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        s = float(b)
        out = Tensor(a.data * s)

        def vjp_scalar(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, g * s, fresh=True)

        return _record(out, (a,), vjp_scalar)

    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape), fresh=True)

    return _record(out, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))
    out_data = out.data

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * out_data, fresh=True)

    return _record(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g / x.data, fresh=True)

    return _record(out, (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes only strictly inside the interval."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.where(inside, g, 0.0), fresh=True)

    return _record(out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = Tensor(d * cdf)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
            _accumulate(x, g * (cdf + d * pdf), fresh=True)

    return _record(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    if x.requires_grad:
        positive = x.data > 0

        def vjp(g: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, np.where(positive, g, 0.0), fresh=True)

        return _record(out, (x,), vjp)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    s[~pos] = ez / (1.0 + ez)
    out = Tensor(s)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * s * (1.0 - s), fresh=True)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(orig))

    return _record(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.transpose(g, inv))

    return _record(out, (x,), vjp)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g, x.data.shape))

    return _record(out, (x,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` (copied)."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            _accumulate(x, full, fresh=True)

    return _record(out, (x,), vjp)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                _accumulate(p, g[tuple(idx)])

    return _record(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _record(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) or 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(x, np.broadcast_to(gg, x.data.shape) / count, fresh=True)

    return _record(out, (x,), vjp)


def argmax(x: Tensor, axis: int = -1) -> np.ndarray:
    """Index of the largest element; ties break toward the lowest index.

    Non-differentiable by design: the result is a plain integer array with no
    tape attachment, so no gradient ever flows through it.
    """
    x = as_tensor(x)
    return np.argmax(x.data, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(da, a.data.shape), fresh=True)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(db, b.data.shape), fresh=True)

    return _record(out, (a, b), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of (B, Cin, H, W) with (Cout, Cin, KH, KW).

    Output extents are (H + 2*pad - KH)/stride + 1 (likewise W); a non-integral
    extent is a configuration error.

    Tap-factorized: one batched GEMM maps channels to (tap, out-channel) planes
    over the padded grid, then each of the KH*KW taps is a shifted add. Both
    directions stay in long contiguous runs, which matters at the small channel
    counts the mask generator uses.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}")
    bsz, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d kernel {kernel.data.shape} larger than padded input {x.data.shape} (pad={pad})")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ConfigError(
            f"conv2d output extent is not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    hp, wp = h + 2 * pad, w + 2 * pad
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # rows ordered (tap, out-channel) so tap planes slice out contiguously
    wtap = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
    planes = np.matmul(wtap, xp.reshape(bsz, cin, hp * wp)).reshape(bsz, kh * kw, cout, hp, wp)
    out_data = np.zeros((bsz, cout, ho, wo), dtype=planes.dtype)
    for k, (i, j) in enumerate(taps):
        out_data += planes[:, k, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    out = Tensor(out_data)

    def vjp(g: np.ndarray) -> None:
        dplanes = np.zeros((bsz, kh * kw, cout, hp, wp), dtype=g.dtype)
        for k, (i, j) in enumerate(taps):
            dplanes[:, k, :, i : i + stride * ho : stride, j : j + stride * wo : stride] = g
        dpf = dplanes.reshape(bsz, kh * kw * cout, hp * wp)
        if x.requires_grad:
            dxp = np.matmul(wtap.T, dpf).reshape(bsz, cin, hp, wp)
            _accumulate(x, dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp, fresh=True)
        if kernel.requires_grad:
            xf = xp.reshape(bsz, cin, hp * wp)
            dwtap = np.matmul(dpf, xf.transpose(0, 2, 1)).sum(axis=0)
            dk = dwtap.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
            _accumulate(kernel, np.ascontiguousarray(dk), fresh=True)

    return _record(out, (x, kernel), vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties break toward the first element."""
    x = as_tensor(x)
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    winners = np.argmax(blocks, axis=-1)
    out = Tensor(np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0])

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            dblocks = np.zeros_like(blocks)
            np.put_along_axis(dblocks, winners[..., None], g[..., None], axis=-1)
            dx = dblocks.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
            _accumulate(x, dx, fresh=True)

    return _record(out, (x,), vjp)


def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.data.shape
    out = Tensor(x.data.repeat(scale, axis=2).repeat(scale, axis=3))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(bsz, c, h, scale, w, scale).sum(axis=(3, 5)), fresh=True)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; output sums to one along ``axis``."""
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ConfigError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)), fresh=True)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape), fresh=True)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.data.shape)
            _accumulate(beta, gb, fresh=gb is not g)
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            _accumulate(x, dx, fresh=True)

    return _record(out, (x, gamma, beta), vjp)


def cross_entropy_from_logits(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], computed stably."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.data.shape}")
    bsz, k = logits.data.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    rows = np.arange(bsz)
    losses = lse - logits.data[rows, labels]
    out = Tensor(np.asarray(losses.mean(), dtype=logits.data.dtype))

    def vjp(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, labels] -= 1.0
            _accumulate(logits, (float(g) / bsz) * p, fresh=True)

    return _record(out, (logits,), vjp)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean logistic loss, -d*log(sigmoid(z)) - (1-d)*log(1-sigmoid(z)), in stable logit form."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    if z.shape != t.shape:
        raise ShapeError(f"logits shape {z.shape} does not match targets {t.shape}")
    softplus_neg = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    losses = softplus_neg + (1.0 - t) * z
    out = Tensor(np.asarray(losses.mean(), dtype=z.dtype))

    def vjp(g: np.ndarray) -> None:
        if logits.requires_grad:
            s = np.empty_like(z)
            pos = z >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            s[~pos] = ez / (1.0 + ez)
            _accumulate(logits, (float(g) / z.size) * (s - t), fresh=True)

    return _record(out, (logits,), vjp)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -lam backward."""
    if lam < 0:
        raise ConfigError(f"grl lambda must be non-negative, got {lam}")
    x = as_tensor(x)
    out = Tensor(x.data)  # same buffer: forward is bit-exact

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (-lam), fresh=True)

    return _record(out, (x,), vjp)
