"""Dense float64 tensors with a reverse-mode differentiation tape.

Usage::

    with Tape() as tape:
        loss = sum_reduce(relu(matmul(x, w)))
        tape.backward(loss)
    w.grad  # populated

Primitives always compute; they are recorded only while a tape is active
and at least one input requires a gradient.
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scripts.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in self.data.shape):
            raise ShapeError("tensor", self.data.shape)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.data.shape)
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    primitive: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so every node's inputs precede it.
    A tape belongs to one thread; separate tapes may live in separate threads.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.sweeps = 0
        self._produced = {}
        self._leaves = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, primitive, inputs, output, vjp):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced[id(output)] = len(self.nodes)
        output._tape = self
        self.nodes.append(TapeNode(primitive, tuple(inputs), output, vjp))

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def contains(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced or id(tensor) in self._leaves

    def gradients(self, output: Tensor, wrt: Sequence[Tensor], seed=None, allow_unused=False):
        """Vector-Jacobian product of ``output`` against each tensor in ``wrt``.

        ``wrt`` may hold leaves or recorded intermediates. ``.grad`` is not
        touched.
        """
        if id(output) not in self._produced:
            raise TapeError("output was not produced on this tape")
        for t in wrt:
            if not self.contains(t) and not allow_unused:
                raise TapeError(f"tensor {t!r} is not on the tape")
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError("seed", seed.shape, output.shape)

        grads = {id(output): seed}
        last = self._produced[id(output)]
        for node in reversed(self.nodes[: last + 1]):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        self.sweeps += 1
        return [np.array(grads[id(t)]) if id(t) in grads else np.zeros_like(t.data) for t in wrt]

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaves = self.leaves
        for leaf, g in zip(leaves, self.gradients(loss, leaves)):
            leaf.grad = g

    def jacobian(self, output: Tensor, leaves: Sequence[Tensor]) -> np.ndarray:
        """Rows are gradients of each output scalar w.r.t. the concatenated leaves."""
        for leaf in leaves:
            if id(leaf) not in self._leaves:
                raise TapeError(f"leaf {leaf!r} is not on the tape")
        width = sum(leaf.size for leaf in leaves)
        rows = np.zeros((output.size, width))
        for i in range(output.size):
            seed = np.zeros(output.size)
            seed[i] = 1.0
            grads = self.gradients(output, leaves, seed.reshape(output.shape))
            rows[i] = np.concatenate([g.ravel() for g in grads])
        return rows


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss is not on a tape")
    loss._tape.backward(loss)


def jacobian(output: Tensor, leaves: Sequence[Tensor]) -> np.ndarray:
    if output._tape is None:
        raise TapeError("output is not on a tape")
    return output._tape.jacobian(output, leaves)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(primitive, inputs, out, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(primitive)
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(primitive, inputs, result, vjp)
    return result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _broadcast_shape(primitive, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


# --- PRIMITIVES ---

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]

    def vjp(g):
        g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _emit("matmul", (a, b), np.asarray(out), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, vjp)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def identity(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("identity", (x,), x.data.copy(), lambda g: (g,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # subgradient at 0 is 0
    active = x.data > 0
    return _emit("relu", (x,), np.where(active, x.data, 0.0), lambda g: (g * active,))


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _emit("absolute", (x,), np.abs(x.data), lambda g: (g * sign,))


def sum_reduce(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum_reduce", (x,), out, vjp)


def softmax(x, mask=None) -> Tensor:
    """Softmax of a vector; masked-out entries get exactly zero weight."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError("softmax", x.shape)
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("softmax", x.shape, mask.shape)
    out = np.zeros_like(x.data)
    if mask.any():
        z = x.data[mask] - x.data[mask].max()
        e = np.exp(z)
        out[mask] = e / e.sum()
    s = out[mask]

    def vjp(g):
        gin = np.zeros_like(x.data)
        gm = g[mask]
        gin[mask] = s * (gm - np.dot(gm, s))
        return (gin,)

    return _emit("softmax", (x,), out, vjp)


def take(x, index: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 1 or not 0 <= index < x.shape[0]:
        raise ShapeError("take", x.shape)

    def vjp(g):
        gin = np.zeros_like(x.data)
        gin[index] = g
        return (gin,)

    return _emit("take", (x,), np.asarray(x.data[index]), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    out = np.asarray(-log_p[np.arange(n), labels].mean())
    probs = np.exp(log_p)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", (logits,), out, vjp)


def mse_loss(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target
    out = np.asarray((diff ** 2).mean())
    return _emit("mse_loss", (pred,), out, lambda g: (g * 2.0 * diff / diff.size,))


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # (N, C, H, W, k, k) views over a padded input
    return sliding_window_view(_pad_hw(x, k // 2), (k, k), axis=(2, 3))


def conv2d(x, w) -> Tensor:
    """Stride-1, same-padding 2-D convolution (cross-correlation), no bias."""
    x, w = _as_tensor(x), _as_tensor(w)
    if (
        x.data.ndim != 4
        or w.data.ndim != 4
        or w.shape[1] != x.shape[1]
        or w.shape[2] != w.shape[3]
        or w.shape[2] % 2 == 0
    ):
        raise ShapeError("conv2d", x.shape, w.shape)
    k = w.shape[2]
    win = _windows(x.data, k)
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)

    def vjp(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        flipped = w.data[:, :, ::-1, ::-1]
        gx = np.einsum("nohwij,ocij->nchw", _windows(g, k), flipped, optimize=True)
        return gx, gw

    return _emit("conv2d", (x, w), out, vjp)


def _box_sum3(x: np.ndarray) -> np.ndarray:
    return _windows(x, 3).sum(axis=(-1, -2))


def avg_pool3x3(x) -> Tensor:
    """3x3 stride-1 average pool; padded cells are excluded from the count."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("avg_pool3x3", x.shape)
    counts = _box_sum3(np.ones((1, 1) + x.shape[2:]))
    out = _box_sum3(x.data) / counts
    return _emit("avg_pool3x3", (x,), out, lambda g: (_box_sum3(g / counts),))


# --- DERIVED QUANTITIES ---

def hvp_finite_difference(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], v, eps: float = 1e-4) -> Tensor:
    """Hessian-vector product (grad L(p + eps v) - grad L(p - eps v)) / (2 eps).

    ``loss_fn`` rebuilds the loss from ``params`` on the active tape. ``v`` is
    either one array per parameter or a flat vector. Parameter buffers are
    restored before returning.
    """
    if eps <= 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    params = list(params)
    if isinstance(v, (np.ndarray, Tensor)):
        flat = np.ravel(v.data if isinstance(v, Tensor) else v).astype(np.float64)
        if flat.size != sum(p.size for p in params):
            raise ShapeError("hvp_finite_difference", (sum(p.size for p in params),), flat.shape)
        splits = np.cumsum([p.size for p in params])[:-1]
        v = [chunk.reshape(p.shape) for chunk, p in zip(np.split(flat, splits), params)]
    directions = [np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64) for d in v]
    for p, d in zip(params, directions):
        if d.shape != p.shape:
            raise ShapeError("hvp_finite_difference", p.shape, d.shape)
    originals = [p.data for p in params]

    def grad_at(sign):
        for p, base, d in zip(params, originals, directions):
            p.data = base + sign * eps * d
        with Tape() as tape:
            loss = loss_fn()
            grads = tape.gradients(loss, params, allow_unused=True)
        return np.concatenate([g.ravel() for g in grads])

    try:
        hv = (grad_at(1.0) - grad_at(-1.0)) / (2.0 * eps)
    finally:
        for p, base in zip(params, originals):
            p.data = base
    return Tensor(hv)
