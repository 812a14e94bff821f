"""Dense float64 tensors with reverse-mode autodiff, Adam, and gradient checks.

The op set is deliberately small: just what a Transformer encoder, a
pointer-style scoring head and the training losses need. Every op records a
closure that pushes its output gradient back to its inputs; ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "timeline-bench-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior nodes get fresh buffers; leaves keep accumulating across calls
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; a 2-D right operand is shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        # promote vectors to matrices so one formula covers every case
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = np.reshape(g, np.matmul(ad, bd).shape)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(out, tensors, fn)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (``a[index]``); duplicates accumulate."""
    out = a.data[index]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), fn)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return take(a, tuple(index))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# normalisation, softmax, dropout
# ---------------------------------------------------------------------------


def masked_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    A fully masked row yields all zeros rather than NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def masked_log_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Log-softmax along ``axis``; masked entries are -inf and get no gradient."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    shifted = z - zmax
    e = np.exp(shifted)
    lse = np.log(e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def fn(g):
        gz = g - p * np.where(np.isfinite(out), g, 0.0).sum(axis=axis, keepdims=True)
        if mask is not None:
            gz = np.where(mask, gz, 0.0)
        return (gz,)

    return _result(out, (x,), fn)


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    axis: int = -1,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def fn(g):
        gx = inv * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).sum(axis=axis, keepdims=True) / n)
        return (gx,)

    out = _result(xhat, (x,), fn)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


class DropoutStream:
    """Counter-based (Philox) random stream for dropout masks."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def uniform(self, shape: tuple[int, ...]) -> np.ndarray:
        bitgen = np.random.Philox(key=self.seed, counter=self.counter)
        self.counter += 1
        return np.random.Generator(bitgen).random(shape)


def dropout(x: Tensor, p: float, stream: DropoutStream | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if stream is None:
        raise ValueError("dropout in training mode needs a DropoutStream")
    keep = (stream.uniform(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def sinusoidal_pe(length: int, dim: int) -> Tensor:
    """PE[pos, 2i] = sin(pos / 10000^(2i/dim)), PE[pos, 2i+1] = cos(same)."""
    if dim % 2:
        raise ShapeError(f"sinusoidal_pe needs an even dim, got {dim}")
    pos = np.arange(length, dtype=DTYPE)[:, None]
    freq = np.power(10000.0, np.arange(0, dim, 2, dtype=DTYPE) / dim)
    pe = np.zeros((length, dim), dtype=DTYPE)
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return Tensor(pe)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and close over ``params``; parameter values are
    perturbed in place and restored.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {value.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def encode_params(params: dict[str, np.ndarray], config: dict) -> bytes:
    """Serialise named float64 arrays (little-endian) plus a config header."""
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, arr in sorted(params.items())
        },
    }
    return json.dumps(body, sort_keys=True, indent=1).encode("utf-8")


def decode_params(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(blob.decode("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a timeline-bench checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(entry["shape"])
        params[name] = arr
    return params, doc["config"]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))
