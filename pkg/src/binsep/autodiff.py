"""Small reverse-mode autodiff over numpy arrays.

Only the operations the separation networks need are provided.  Tensors are
laid out (channels, time) or (batch, channels, time).  Convolutions use
cross-correlation semantics (no kernel flip).

A graph is recorded while any input requires a gradient and grad mode is on;
``Tensor.backward`` walks it once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """Named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(x)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor data must be finite")
    return t


def _make(data, parents, backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# element-wise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        if _needs_add_at(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(x.data[index], (x,), backward)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def prelu(x, slope) -> Tensor:
    """PReLU with one slope per channel (axis -2)."""
    x, slope = as_tensor(x), as_tensor(slope)
    neg = x.data <= 0
    scale = np.where(neg, slope.data[:, None], 1.0)
    out = x.data * scale

    def backward(g):
        gx = g * scale
        gs = np.multiply(g, x.data, where=neg, out=np.zeros_like(g))
        gs = gs.reshape(-1, *gs.shape[-2:]).sum(axis=(0, 2))
        return gx, gs

    return _make(out, (x, slope), backward)


# ---------------------------------------------------------------------------
# convolutions


def _batched(x: np.ndarray):
    return (x[None], True) if x.ndim == 2 else (x, False)


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_b a[b] @ b[b].T for (B, I, T) and (B, J, T) arrays."""
    if a.shape[0] == 1:
        return a[0] @ b[0].T
    return np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)


def conv_output_length(T: int, kernel: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> int:
    return (T + pad - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x, kernels, bias=None, stride: int = 1, dilation: int = 1,
           causal_left_pad: bool | int = False, right_pad: int = 0) -> Tensor:
    """1-D cross-correlation of x [.., C_in, T] with kernels [C_out, C_in, K].

    ``causal_left_pad=True`` pads (K-1)*dilation zeros on the left; an
    integer pads exactly that many.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    b = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x.data)
    c_out, c_in, K = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"conv1d: input has {xd.shape[1]} channels, kernel expects {c_in}")
    if K < 1 or stride < 1 or dilation < 1:
        raise ValueError("conv1d: kernel, stride and dilation must be >= 1")
    left = (K - 1) * dilation if causal_left_pad is True else int(causal_left_pad or 0)
    T = xd.shape[-1]
    t_out = conv_output_length(T, K, stride, dilation, left + right_pad)
    if t_out < 1:
        raise ValueError("conv1d: input shorter than the kernel span")
    w2 = w.data.reshape(c_out, c_in * K)
    if K == 1 and stride == 1 and left == 0 and right_pad == 0:
        cols = xd
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (left, right_pad))) if (left or right_pad) else xd
        span = stride * (t_out - 1) + 1
        cols = np.stack([xp[:, :, k * dilation:k * dilation + span:stride] for k in range(K)], axis=2)
        cols = cols.reshape(xd.shape[0], c_in * K, t_out)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g if not squeeze else g[None]
        gw = _batched_outer(gb, cols).reshape(w.shape) if w.requires_grad else None
        gbias = gb.sum(axis=(0, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, gb)
            if cols is xd:
                gx = gcols
            else:
                gcols = gcols.reshape(gb.shape[0], c_in, K, t_out)
                gxp = np.zeros((gb.shape[0], c_in, T + left + right_pad))
                span = stride * (t_out - 1) + 1
                for k in range(K):
                    gxp[:, :, k * dilation:k * dilation + span:stride] += gcols[:, :, k, :]
                gx = gxp[:, :, left:left + T]
            if squeeze:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gbias)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def depthwise_conv1d(x, kernels, bias=None, dilation: int = 1) -> Tensor:
    """Causal per-channel dilated convolution; kernels [C, K], output length T."""
    x, w = as_tensor(x), as_tensor(kernels)
    b = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x.data)
    C, K = w.shape
    if xd.shape[1] != C:
        raise ValueError(f"depthwise_conv1d: {xd.shape[1]} channels, kernel has {C}")
    T = xd.shape[-1]
    left = (K - 1) * dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (left, 0)))
    out = np.zeros_like(xd)
    for k in range(K):
        out += w.data[:, k, None] * xp[:, :, k * dilation:k * dilation + T]
    if b is not None:
        out += b.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g if not squeeze else g[None]
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for k in range(K):
            sl = xp[:, :, k * dilation:k * dilation + T]
            gw[:, k] = (gb * sl).sum(axis=(0, 2))
            gxp[:, :, k * dilation:k * dilation + T] += w.data[:, k, None] * gb
        gx = gxp[:, :, left:]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw)
        if b is not None:
            grads += (gb.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def transposed_conv1d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Overlap-add transposed convolution.

    x is [.., C_in, F], kernels [C_in, C_out, K]; output length (F-1)*stride + K.
    With the same kernel array this is the adjoint of ``conv1d`` using
    kernels viewed as [C_out_conv=C_in, C_in_conv=C_out, K].
    """
    x, w = as_tensor(x), as_tensor(kernels)
    b = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x.data)
    c_in, c_out, K = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"transposed_conv1d: {xd.shape[1]} channels, kernel expects {c_in}")
    if stride > K:
        raise ValueError("transposed_conv1d: stride must not exceed kernel length")
    Bn, _, F = xd.shape
    w2 = w.data.reshape(c_in, c_out * K)
    frames = np.matmul(w2.T, xd).reshape(Bn, c_out, K, F)
    T_out = (F - 1) * stride + K
    span = stride * (F - 1) + 1
    out = np.zeros((Bn, c_out, T_out))
    for k in range(K):
        out[:, :, k:k + span:stride] += frames[:, :, k, :]
    if b is not None:
        out += b.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g if not squeeze else g[None]
        gframes = np.stack([gb[:, :, k:k + span:stride] for k in range(K)], axis=2)
        gframes = gframes.reshape(Bn, c_out * K, F)
        gx = np.matmul(w2, gframes) if x.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        gw = _batched_outer(xd, gframes).reshape(w.shape) if w.requires_grad else None
        grads = (gx, gw)
        if b is not None:
            grads += (gb.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation


def cumulative_stats(xd: np.ndarray, eps: float):
    """Running mean and inverse std over channels and all past frames.

    xd has shape (B, C, T).  Returns (mean, rstd) each (B, 1, T).
    """
    C, T = xd.shape[1], xd.shape[2]
    s1 = np.cumsum(xd.sum(axis=1, keepdims=True), axis=2)
    s2 = np.cumsum((xd * xd).sum(axis=1, keepdims=True), axis=2)
    count = C * np.arange(1, T + 1, dtype=np.float64)
    mu = s1 / count
    var = np.maximum(s2 / count - mu * mu, 0.0)
    return mu, 1.0 / np.sqrt(var + eps), count


def cumulative_layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Causal layer norm: statistics over channels and times 0..t."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd, squeeze = _batched(x.data)
    mu, rstd, count = cumulative_stats(xd, eps)
    centred = xd - mu
    xhat = centred * rstd
    out = gain.data[:, None] * xhat + bias.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g if not squeeze else g[None]
        ggain = (gb * xhat).sum(axis=(0, 2))
        gbias = gb.sum(axis=(0, 2))
        gxhat = gb * gain.data[:, None]
        A = gxhat.sum(axis=1, keepdims=True)
        Bt = (gxhat * centred).sum(axis=1, keepdims=True)
        r3 = rstd ** 3
        g_mu = -rstd * A + r3 * mu * Bt
        g_m2 = -0.5 * r3 * Bt
        g_s1 = g_mu / count
        g_s2 = g_m2 / count
        # reverse cumulative sums route each time step's stats back to its inputs
        rc1 = np.flip(np.cumsum(np.flip(g_s1, axis=2), axis=2), axis=2)
        rc2 = np.flip(np.cumsum(np.flip(g_s2, axis=2), axis=2), axis=2)
        gx = gxhat * rstd + rc1 + 2.0 * xd * rc2
        if squeeze:
            gx = gx[0]
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[..., Tensor], inputs: list, eps: float = 1e-5,
               max_entries: int = 10_000, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps the tensors in ``inputs`` to a scalar (non-scalar outputs are
    sum-reduced).  Every entry is checked unless a tensor has more than
    ``max_entries`` entries, in which case a random subset is used.
    The relative error of an entry is |a - n| / max(|a|, |n|, 1e-3 * scale),
    where scale is the largest gradient magnitude of that tensor.
    """
    rng = np.random.default_rng(seed)
    tensors = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check: non-finite input")

    def evaluate() -> float:
        with no_grad():
            val = float(np.sum(fn(*tensors).data))
        if not np.isfinite(val):
            raise ValueError("grad_check: non-finite function value")
        return val

    out = fn(*tensors)
    if out.data.size != 1:
        out = tsum(out)
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic)):
            raise ValueError("grad_check: non-finite gradient")
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-3 * scale)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


# ---------------------------------------------------------------------------
# parameter files
#
# Layout (all integers little-endian):
#   8 bytes  magic b"BSPARAM\0"
#   4 bytes  uint32 format version (1)
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header:
#            {"version": 1,
#             "tensors": [{"name", "shape", "offset", "count"}, ...],
#             "sha256": hex digest of the data block,
#             "metadata": {...}}
#   rest     data block: every tensor's float64 values, row-major,
#            little-endian, concatenated in header order; offset/count are
#            in elements from the start of the data block.

MAGIC = b"BSPARAM\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_parameters(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> str:
    """Write an ordered name -> array mapping; returns the data hash."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    header = json.dumps({"version": FORMAT_VERSION, "tensors": entries, "sha256": digest,
                         "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(blob)
    return digest


def load_parameters(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    if 20 + hlen > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        tensors, digest = header["tensors"], header["sha256"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    blob = raw[20 + hlen:]
    if len(blob) % 8 or hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError(f"{path}: data hash mismatch")
    data = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for e in tensors:
        start, count = int(e["offset"]), int(e["count"])
        if start < 0 or start + count > data.size or int(np.prod(e["shape"], dtype=np.int64)) != count:
            raise CheckpointError(f"{path}: tensor {e['name']!r} extent out of range")
        arrays[e["name"]] = data[start:start + count].reshape(e["shape"]).astype(np.float64)
    return arrays, header.get("metadata", {})
