"""
Reverse-mode gradient engine over numpy arrays.

Every forward op returns a new `Tensor` that remembers its parents and a closure mapping
the output gradient to one gradient per parent. `backward` walks the recorded graph in
reverse topological order, accumulates into the `.grad` of leaf tensors created with
`requires_grad=True`, then releases the graph so long attack loops keep bounded memory.

There is no broadcasting: binary ops require identical shapes and raise `ShapeError`
naming the op and both shapes.
"""
import builtins
import logging
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from advspeech.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return subtract(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{op}: produced non-finite values", module="tensorgrad")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = op
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}", module="tensorgrad")


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same("subtract", a, b)
    return _make(a.data - b.data, "subtract", (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same("multiply", a, b)
    return _make(a.data * b.data, "multiply", (a, b), lambda g: (g * b.data, g * a.data))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return _make(out, "leaky_relu", (x,), lambda g: (g * np.where(positive, 1.0, slope),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log: non-positive input", module="tensorgrad")
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def power(x: Tensor, p: float) -> Tensor:
    y = x.data**p
    return _make(y, "power", (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    above = x.data > floor
    return _make(np.maximum(x.data, floor), "clamp_min", (x,), lambda g: (g * above,))


def sign(x: Tensor) -> Tensor:
    """Sign with a gradient defined as exactly zero."""
    return _make(np.sign(x.data), "sign", (x,), lambda g: (np.zeros_like(x.data),))


# reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(
        np.array(x.data.mean()), "mean", (x,), lambda g: (np.full(x.shape, float(g) / n),)
    )


def l2_norm(x: Tensor) -> Tensor:
    norm = float(np.sqrt(np.sum(x.data * x.data)))

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (float(g) * x.data / norm,)

    return _make(np.array(norm), "l2_norm", (x,), backward)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}", module="tensorgrad")
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {x.shape}", module="tensorgrad")
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}", module="tensorgrad")
    return _make(x.data.reshape(shape).copy(), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def softmax(x: Tensor, scale: float = 1.0, scaled: bool = False) -> Tensor:
    """Softmax over the last axis; `scaled=True` multiplies scores by 1/sqrt(d) first."""
    if scaled:
        scale = scale / np.sqrt(x.shape[-1])
    z = scale * x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (scale * y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (x,), backward)


# structural


def slice_axis(x: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    out = x.data[index].copy()
    if out.size == 0:
        raise ShapeError(f"slice: empty result from {x.shape}", module="tensorgrad")

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, "slice", (x,), backward)


def crop(x: Tensor, length: int) -> Tensor:
    """Centre-crop the last axis to `length` samples."""
    total = x.shape[-1]
    if length > total:
        raise ShapeError(f"crop: cannot crop {x.shape} to {length}", module="tensorgrad")
    if length == total:
        return x
    start = (total - length) // 2
    return slice_axis(x, x.data.ndim - 1, start, start + length)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        other = t.shape
        if len(other) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concatenate: shape mismatch {ref} vs {other}", module="tensorgrad")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, "concatenate", tensors, backward)


def pad(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    widths = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _make(
        np.pad(x.data, widths), "pad", (x,), lambda g: (g[..., left : left + n],)
    )


def frame(x: Tensor, frame_len: int, hop: int) -> Tensor:
    """Gather overlapping frames of a 1-D signal into a (frames, frame_len) matrix."""
    if x.data.ndim != 1:
        raise ShapeError(f"frame: expected rank 1, got {x.shape}", module="tensorgrad")
    n = x.shape[0]
    n_frames = 1 + (n - frame_len) // hop
    index = hop * np.arange(n_frames)[:, None] + np.arange(frame_len)[None, :]

    def backward(g):
        return (np.bincount(index.ravel(), weights=g.ravel(), minlength=n),)

    return _make(x.data[index], "frame", (x,), backward)


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Adjoint of `frame`: sum overlapping frames back into a signal of `length` samples."""
    n_frames, frame_len = frames.shape
    if (n_frames - 1) * hop + frame_len > length:
        raise ShapeError(
            f"overlap_add: {frames.shape} frames at hop {hop} exceed length {length}",
            module="tensorgrad",
        )
    index = hop * np.arange(n_frames)[:, None] + np.arange(frame_len)[None, :]
    out = np.bincount(index.ravel(), weights=frames.data.ravel(), minlength=length)
    return _make(out, "overlap_add", (frames,), lambda g: (g[index],))


def linear_map(
    x: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    name: str = "linear_map",
) -> Tensor:
    """Apply a fixed linear operator given with its adjoint."""
    return _make(np.asarray(forward(x.data), dtype=np.float64), name, (x,), lambda g: (adjoint(g),))


# convolution and resampling


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding="same",
) -> Tensor:
    """
    x: (C_in, T), weight: (C_out, C_in, K), bias: (C_out,).
    padding is "same" (stride 1 only), an int, or a (left, right) pair of zero-pad widths.
    """
    if x.data.ndim != 2 or weight.data.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {weight.shape}", module="tensorgrad")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv1d: bias shape mismatch {bias.shape} vs {weight.shape}", module="tensorgrad"
        )
    c_out, c_in, k = weight.shape
    if padding == "same":
        left, right = (k - 1) // 2, k - 1 - (k - 1) // 2
    elif isinstance(padding, int):
        left = right = padding
    else:
        left, right = padding
    n = x.shape[1]
    padded = np.pad(x.data, ((0, 0), (left, right)))
    n_out = (n + left + right - k) // stride + 1
    if n_out < 1:
        raise ShapeError(f"conv1d: input {x.shape} shorter than kernel {k}", module="tensorgrad")
    starts = stride * np.arange(n_out)
    index = np.arange(k)[:, None] + starts[None, :]
    cols = padded[:, index].reshape(c_in * k, n_out)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        g_weight = (g @ cols.T).reshape(weight.shape)
        g_cols = (w2.T @ g).reshape(c_in, k, n_out)
        g_padded = np.zeros_like(padded)
        for j in range(k):
            g_padded[:, j + starts] += g_cols[:, j, :]
        g_x = g_padded[:, left : left + n]
        if bias is None:
            return g_x, g_weight
        return g_x, g_weight, g.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv1d", parents, backward)


def upsample2(x: Tensor, mode: str = "linear") -> Tensor:
    """Double the last axis of a (C, T) tensor by nearest or linear interpolation."""
    if x.data.ndim != 2:
        raise ShapeError(f"upsample2: expected rank 2, got {x.shape}", module="tensorgrad")
    c, n = x.shape
    if mode == "nearest":
        out = np.repeat(x.data, 2, axis=1)
        return _make(out, "upsample2", (x,), lambda g: (g.reshape(c, n, 2).sum(axis=2),))
    if mode != "linear":
        raise ContractError(f"upsample2: unknown mode {mode}", module="tensorgrad")
    nxt = np.minimum(np.arange(n) + 1, n - 1)
    out = np.empty((c, 2 * n))
    out[:, 0::2] = x.data
    out[:, 1::2] = 0.5 * (x.data + x.data[:, nxt])

    def backward(g):
        even, odd = g[:, 0::2], g[:, 1::2]
        g_x = even + 0.5 * odd
        g_x[:, 1:] += 0.5 * odd[:, :-1]
        g_x[:, n - 1] += 0.5 * odd[:, n - 1]
        return (g_x,)

    return _make(out, "upsample2", (x,), backward)


# attention


def window_index(length: int, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Key positions t-window+1..t for every query t, and which of them exist."""
    index = np.arange(length)[:, None] - (window - 1) + np.arange(window)[None, :]
    valid = index >= 0
    return np.where(valid, index, 0), valid


def attention_weights(q: np.ndarray, k: np.ndarray, window: int) -> np.ndarray:
    """Causal windowed scaled dot-product weights, shape (T, window)."""
    index, valid = window_index(q.shape[1], window)
    scores = np.einsum("dt,dtw->tw", q, k[:, index]) / np.sqrt(q.shape[0])
    scores = np.where(valid, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(scores), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """
    Context c[:, t] = sum_j a[t, j] v[:, t-window+1+j] with softmax weights over
    q[:, t] . k[:, s] / sqrt(d) for s in (t-window, t]. Positions after t never enter.
    q, k: (d, T); v: (C, T) -> (C, T).
    """
    if q.shape != k.shape:
        raise ShapeError(
            f"windowed_attention: query/key mismatch {q.shape} vs {k.shape}", module="tensorgrad"
        )
    if v.data.ndim != 2 or v.shape[1] != q.shape[1]:
        raise ShapeError(
            f"windowed_attention: value mismatch {v.shape} vs {q.shape}", module="tensorgrad"
        )
    d, n = q.shape
    index, valid = window_index(n, window)
    weights = attention_weights(q.data, k.data, window)
    v_win = v.data[:, index]
    context = np.einsum("ctw,tw->ct", v_win, weights)
    scale = 1.0 / np.sqrt(d)

    def backward(g):
        g_weights = np.einsum("ct,ctw->tw", g, v_win)
        g_scores = weights * (g_weights - np.sum(g_weights * weights, axis=1, keepdims=True))
        g_scores = np.where(valid, g_scores, 0.0)
        k_win = k.data[:, index]
        g_q = scale * np.einsum("tw,dtw->dt", g_scores, k_win)
        g_k_win = scale * g_scores[None, :, :] * q.data[:, :, None]
        g_v_win = g[:, :, None] * weights[None, :, :]
        g_k = np.zeros_like(k.data)
        g_v = np.zeros_like(v.data)
        for j in range(window):
            cols = index[:, j]
            mask = valid[:, j]
            g_k[:, cols[mask]] += g_k_win[:, mask, j]
            g_v[:, cols[mask]] += g_v_win[:, mask, j]
        return g_q, g_k, g_v

    return _make(context, "windowed_attention", (q, k, v), backward)


# connectionist temporal classification


def ctc_extended(target: Sequence[int], blank: int) -> np.ndarray:
    ext = [blank]
    for label in target:
        ext.extend([label, blank])
    return np.array(ext, dtype=np.int64)


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = builtins.sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    for s in range(2, len(ext)):
        allowed[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return allowed


def _shift(values: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(values, -np.inf)
    if by > 0:
        out[by:] = values[:-by]
    else:
        out[:by] = values[-by:]
    return out


def ctc_forward_backward(
    log_probs: np.ndarray, target: Sequence[int], blank: int
) -> Tuple[float, np.ndarray]:
    """(log P(target), per-frame label occupancy (T, K)) by log-space forward-backward."""
    n_frames, n_labels = log_probs.shape
    ext = ctc_extended(target, blank)
    n_states = len(ext)
    skip = _ctc_skip_allowed(ext, blank)
    emit = log_probs[:, ext]

    alpha = np.full((n_frames, n_states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, n_frames):
            prev = alpha[t - 1]
            acc = np.logaddexp(prev, _shift(prev, 1))
            acc = np.logaddexp(acc, np.where(skip, _shift(prev, 2), -np.inf))
            alpha[t] = acc + emit[t]

        beta = np.full((n_frames, n_states), -np.inf)
        beta[-1, -1] = 0.0
        if n_states > 1:
            beta[-1, -2] = 0.0
        skip_from = _shift(skip.astype(np.float64), -2) > 0
        for t in range(n_frames - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = np.logaddexp(nxt, _shift(nxt, -1))
            acc = np.logaddexp(acc, np.where(skip_from, _shift(nxt, -2), -np.inf))
            beta[t] = acc

    if n_states > 1:
        log_p = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    else:
        log_p = float(alpha[-1, -1])
    occupancy = np.zeros((n_frames, n_labels))
    if np.isfinite(log_p):
        np.add.at(occupancy, (slice(None), ext), np.exp(alpha + beta - log_p))
    return log_p, occupancy


def ctc_nll(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """-log P(target | frames) for per-frame log-probabilities (T, K)."""
    log_p, occupancy = ctc_forward_backward(log_probs.data, list(target), blank)
    if not np.isfinite(log_p):
        raise ContractError("ctc_nll: target has zero probability", module="tensorgrad")
    return _make(np.array(-log_p), "ctc_nll", (log_probs,), lambda g: (-float(g) * occupancy,))


# backward pass


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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


def backward(loss: Tensor):
    """Populate `.grad` of every reachable leaf with requires_grad, then release the graph."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got {loss.shape}", module="tensorgrad")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any parameter", module="tensorgrad")
    order = _topological(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|), central differences."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(
            f"finite_diff_check: f must be scalar, got {out.shape}", module="tensorgrad"
        )
    backward(out)
    analytic = leaf.grad.reshape(-1)
    base = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(base.size):
            plus = base.copy()
            minus = base.copy()
            plus[i] += h
            minus[i] -= h
            f_plus = f(Tensor(plus.reshape(x.shape))).item()
            f_minus = f(Tensor(minus.reshape(x.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"finite_diff_check over {base.size} coordinates: max relative error {worst:.3e}")
    return worst


# parameters and optimizer


class ParameterSet:
    """Named trainable tensors in a fixed insertion order."""

    def __init__(self, tensors: Optional[Dict[str, np.ndarray]] = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name}", module="tensorgrad")
        if any(ch.isspace() for ch in name):
            raise ContractError(f"parameter name {name!r} contains whitespace", module="tensorgrad")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def count(self) -> int:
        return builtins.sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def copy(self) -> "ParameterSet":
        return ParameterSet({name: t.data.copy() for name, t in self._tensors.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}


class AdamState:
    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParameterSet, state: AdamState):
    """One bias-corrected Adam update, in place on the parameter data."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: missing gradient for {missing}", module="tensorgrad")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g.shape != state.m[name].shape:
            raise ContractError(f"adam_step: moment shape mismatch for {name}", module="tensorgrad")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        tensor.data = tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
