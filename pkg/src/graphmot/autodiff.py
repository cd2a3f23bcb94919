"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the thread's active :class:`Tape` whenever one
of their inputs is tracked (a :class:`Parameter` or the output of a recorded
op).  Without an active tape every op is a plain numpy computation, which is
what inference uses.

    with Tape() as tape:
        loss = mean(relu(linear(x, W, b)))
        backward(loss)          # accumulates into W.grad, b.grad and clears the tape
"""

from __future__ import annotations

import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "tracked", "adjoint")

    def __init__(self, value, tracked: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tracked = tracked
        self.adjoint: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __len__(self) -> int:
        return self.value.shape[0]

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(value, tracked=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def clear(self) -> None:
        self.ops.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _finish(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], back: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite output")
    tape = current_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out = Tensor(value, tracked=True)
        tape.ops.append((out, inputs, back))
        return out
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def segment_sum(x: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``x`` into ``n`` buckets given by ``index``."""
    if x.ndim == 1:
        return np.bincount(index, weights=x, minlength=n).astype(DTYPE)
    if len(index) == 0:
        return np.zeros((n,) + x.shape[1:], dtype=DTYPE)
    m = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    flat = x.reshape(len(index), -1)
    return np.asarray(m @ flat).reshape((n,) + x.shape[1:])


# ---------------------------------------------------------------- core ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _finish("matmul", av @ bv, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish("add", value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _finish("sub", value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    try:
        value = av * bv
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _finish("mul", value, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g * c,)

    return _finish("scale", a.value * c, (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", value, tensors, back)


def row_gather(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("row_gather", x.shape, ("index range", int(index.min()), int(index.max())))
    n = x.shape[0]

    def back(g):
        return (segment_sum(g, index, n),)

    return _finish("row_gather", x.value[index], (x,), back)


def index_add_rows(x, index, n: int) -> Tensor:
    """``out[index[e]] += x[e]`` into a zero array with ``n`` rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0] or (len(index) and (index.min() < 0 or index.max() >= n)):
        raise ShapeError("index_add_rows", x.shape, (len(index), n))

    def back(g):
        return (g[index],)

    return _finish("index_add_rows", segment_sum(x.value, index, n), (x,), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0

    def back(g):
        return (g * mask,)

    return _finish("relu", x.value * mask, (x,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.value)

    def back(g):
        return (g * s * (1.0 - s),)

    return _finish("sigmoid", s, (x,), back)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    x = as_tensor(x)
    v = x.value
    value = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))

    def back(g):
        return (g * _sigmoid(-v),)

    return _finish("log_sigmoid", value, (x,), back)


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value

    def back(g):
        return (g / v,)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(v)
    return _finish("log", value, (x,), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)

    def back(g):
        return (g * value,)

    return _finish("exp", value, (x,), back)


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| <= beta, |x| - beta/2 outside."""
    x = as_tensor(x)
    v = x.value
    inner = np.abs(v) <= beta
    value = np.where(inner, 0.5 * v * v / beta, np.abs(v) - 0.5 * beta)

    def back(g):
        return (g * np.where(inner, v / beta, np.sign(v)),)

    return _finish("smooth_l1", value, (x,), back)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(x.value.sum()), (x,), back)


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(1, x.value.size)
    return scale(sum(x), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _finish("reshape", x.value.reshape(shape), (x,), back)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalization over the last axis followed by an affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    v = x.value
    if gain.shape != (v.shape[-1],) or bias.shape != (v.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gain.value

    def back(g):
        dxhat = g * gv
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, g.shape[-1])
        return dx, (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0), flat_g.sum(axis=0)

    return _finish("layer_norm", xhat * gv + bias.value, (x, gain, bias), back)


def linear(x, W, b=None) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("linear", x.shape, W.shape)
    xv, Wv = x.value, W.value
    value = xv @ Wv
    if b is None:

        def back_nb(g):
            return g @ Wv.T, xv.T @ g

        return _finish("linear", value, (x, W), back_nb)
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeError("linear", x.shape, W.shape, b.shape)

    def back(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _finish("linear", value + b.value, (x, W, b), back)


def dropout(x, rate: float, seed: int, train: bool) -> Tensor:
    """Inverted dropout; identity unless ``train`` and ``rate > 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    factor = keep / (1.0 - rate)

    def back(g):
        return (g * factor,)

    return _finish("dropout", x.value * factor, (x,), back)


def segment_softmax(logits, segments, n_segments: int) -> Tensor:
    """Softmax over groups of rows sharing a segment id, column-wise.

    ``logits`` is (E,) or (E, C); ``segments`` maps each row to its destination.
    Destinations with no incoming rows simply produce no output.
    """
    logits = as_tensor(logits)
    seg = np.asarray(segments, dtype=np.int64)
    v = logits.value
    if v.shape[0] != len(seg) or (len(seg) and (seg.min() < 0 or seg.max() >= n_segments)):
        raise ShapeError("segment_softmax", logits.shape, (len(seg), n_segments))
    if len(seg) == 0:
        return _finish("segment_softmax", v.copy(), (logits,), lambda g: (g,))
    seg_max = np.full((n_segments,) + v.shape[1:], -np.inf)
    np.maximum.at(seg_max, seg, v)
    e = np.exp(v - seg_max[seg])
    denom = segment_sum(e, seg, n_segments)
    alpha = e / denom[seg]

    def back(g):
        ag = alpha * g
        return (ag - alpha * segment_sum(ag, seg, n_segments)[seg],)

    return _finish("segment_softmax", alpha, (logits,), back)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``, then clear the tape."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise RuntimeError("backward called without an active tape")
    if not loss.tracked:
        tape.clear()
        return
    loss.adjoint = np.ones_like(loss.value)
    leaves: dict[int, Parameter] = {}
    for out, inputs, back in reversed(tape.ops):
        g = out.adjoint
        if g is None:
            continue
        out.adjoint = None
        grads = back(g)
        for t, gi in zip(inputs, grads):
            if not t.tracked:
                continue
            if t.adjoint is None:
                t.adjoint = np.array(gi, dtype=DTYPE, copy=True).reshape(t.shape)
            else:
                t.adjoint += gi.reshape(t.shape)
            if isinstance(t, Parameter):
                leaves[id(t)] = t
    for p in leaves.values():
        p.grad += p.adjoint
        p.adjoint = None
    loss.adjoint = None
    tape.clear()


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            adamw_step(p.value, p.grad, m, v, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step_count)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        """Restore moment buffers saved by :meth:`state_arrays`."""
        for p, m, v in zip(self.params, self.m, self.v):
            try:
                m[...] = arrays[f"adam.m.{p.name}"]
                v[...] = arrays[f"adam.v.{p.name}"]
            except KeyError:
                raise ValueError(f"checkpoint has no optimizer state for {p.name}") from None
        self.step_count = int(step_count)


def adamw_step(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step_count) -> None:
    """In-place AdamW update of ``param`` and its moment buffers."""
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step_count)
    v_hat = v / (1.0 - beta2**step_count)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"GMCKPT01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Iterable[tuple[str, np.ndarray]], meta: Optional[dict] = None) -> None:
    """Write named arrays as a JSON header followed by a little-endian float64 payload."""
    arrays = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in arrays]
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise ValueError("duplicate array names in checkpoint")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for _, a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 16 + hlen
    arrays = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).astype(DTYPE)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: payload length does not match header")
    return header, arrays


def assign_arrays(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``params``; names and shapes must match exactly."""
    expected = {p.name: p.shape for p in params}
    got = {n: a.shape for n, a in arrays.items() if not n.startswith("adam.")}
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ValueError(f"checkpoint parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for p in params:
        if tuple(got[p.name]) != tuple(p.shape):
            raise ValueError(f"checkpoint shape mismatch for {p.name}: {got[p.name]} vs {p.shape}")
        p.value[...] = arrays[p.name]
