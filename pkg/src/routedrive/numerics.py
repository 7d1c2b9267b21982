"""Dense float64 tensors with reverse-mode differentiation, plus an Adam optimizer.

Every model component is written against the handful of ops defined here.
Tensors wrap a numpy array; ops that see at least one ``requires_grad``
input record a closure that pushes the output gradient back to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

MASK_VALUE = -1e9
_MASK_THRESHOLD = -1e8  # anything below counts as disallowed

__all__ = [
    "MASK_VALUE",
    "Tensor",
    "ParamStore",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "silu",
    "layer_norm",
    "masked_softmax",
    "reshape",
    "transpose",
    "concat",
    "take",
    "scatter",
    "mean",
    "sum_all",
    "broadcast_to",
    "embedding",
    "cross_entropy",
    "mse",
    "backward",
    "adam_step",
    "clip_grad_norm",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    """Wrap an op result; only record the closure when a parent needs it."""
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=live, _backward=fn)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), bw)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        _accumulate(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _make(out, (a, b), bw)


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale. No bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            proj = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - gx_mean - xhat * proj))

    return _make(out, (x, gain), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis after adding ``mask`` (0 allowed, -1e9 not)."""
    mask = np.asarray(mask, dtype=np.float64)
    allowed = mask > _MASK_THRESHOLD
    if mask.shape[-1:] != scores.shape[-1:]:
        raise DimensionError(f"mask {mask.shape} does not cover scores {scores.shape}")
    if not np.all(np.any(allowed, axis=-1)):
        raise ContractError("masked_softmax: a row has every position disallowed")
    z = scores.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (scores,), bw)


# ----------------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def bw(g):
        _accumulate(a, g.reshape(src))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        other = [s for i, s in enumerate(p.shape) if i != ax]
        first = [s for i, s in enumerate(parts[0].shape) if i != ax]
        if p.ndim != parts[0].ndim or other != first:
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[q.shape for q in parts]}"
            )
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def take(a: Tensor, index, axis: int) -> Tensor:
    """Gather slices of ``a`` at integer positions ``index`` along ``axis``."""
    idx = np.asarray(index, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise IndexError(f"take: index out of bounds for axis {axis} of size {a.shape[ax]}")

    def bw(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[ax] = idx
        # indices are unique wherever this is used for routing; np.add.at covers repeats
        np.add.at(full, tuple(sl), g)
        _accumulate(a, full)

    return _make(np.take(a.data, idx, axis=ax), (a,), bw)


def scatter(length: int, parts: Sequence[tuple[Tensor, np.ndarray]], axis: int) -> Tensor:
    """Inverse of ``take`` over a partition: place each part's slices at its indices."""
    first = parts[0][0]
    ax = axis % first.ndim
    shape = list(first.shape)
    shape[ax] = length
    out = np.zeros(shape)
    seen = np.zeros(length, dtype=np.int64)
    for t, idx in parts:
        idx = np.asarray(idx, dtype=np.int64)
        if t.shape[ax] != idx.size:
            raise DimensionError(f"scatter: part of shape {t.shape} vs {idx.size} indices")
        sl = [slice(None)] * len(shape)
        sl[ax] = idx
        out[tuple(sl)] = t.data
        seen[idx] += 1
    if not np.all(seen == 1):
        raise ContractError("scatter: index sets must partition the target axis")

    def bw(g):
        for t, idx in parts:
            if t.requires_grad:
                _accumulate(t, np.take(g, np.asarray(idx, dtype=np.int64), axis=ax))

    return _make(out, tuple(t for t, _ in parts), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accumulate(a, g)

    return _make(np.broadcast_to(a.data, tuple(shape)).copy(), (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return take(table, ids.reshape(-1), axis=0) if ids.ndim <= 1 else reshape(
        take(table, ids.reshape(-1), axis=0), (*ids.shape, table.shape[-1])
    )


# ----------------------------------------------------------------------------
# reductions and losses
# ----------------------------------------------------------------------------


def mean(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    ax = axis % a.ndim

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(gg / n, a.shape))

    return _make(a.data.mean(axis=ax, keepdims=keepdims), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over the leading axes.

    ``weights`` is a 0/1 array over the leading axes; the result is the sum of
    selected token losses divided by the number of selected tokens.
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    count = w.sum()
    if count <= 0:
        raise ContractError("cross_entropy: loss mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        _accumulate(logits, g * (p - onehot) * (w / count)[..., None])

    return _make(np.asarray(loss), (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        _accumulate(pred, g * 2.0 * diff / n)

    return _make(np.asarray((diff * diff).mean()), (pred,), bw)


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any trainable tensor")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are not needed once consumed
            node.grad = None
            node._backward = None
            node._parents = ()


# ----------------------------------------------------------------------------
# parameters and optimizer
# ----------------------------------------------------------------------------


@dataclass
class _Slot:
    tensor: Tensor
    trainable: bool = True
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


class ParamStore:
    """Named leaf tensors with per-parameter trainable flags and Adam moments."""

    def __init__(self) -> None:
        self._slots: dict[str, _Slot] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._slots:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._slots[name] = _Slot(t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def names(self) -> list[str]:
        return list(self._slots)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, s.tensor) for k, s in self._slots.items())

    def is_trainable(self, name: str) -> bool:
        return self._slots[name].trainable

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            self._slots[n].trainable = flag

    def reset_optimizer(self) -> None:
        for s in self._slots.values():
            s.m = s.v = None
            s.step = 0

    def zero_grad(self) -> None:
        for s in self._slots.values():
            s.tensor.grad = None

    def num_values(self) -> int:
        return sum(s.tensor.data.size for s in self._slots.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every trainable parameter.

    Frozen parameters are skipped entirely; a parameter that received no
    gradient is treated as having a zero gradient.
    """
    for slot in store._slots.values():
        if not slot.trainable:
            continue
        p = slot.tensor
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if slot.m is None:
            slot.m = np.zeros_like(p.data)
            slot.v = np.zeros_like(p.data)
        slot.step += 1
        slot.m = beta1 * slot.m + (1.0 - beta1) * g
        slot.v = beta2 * slot.v + (1.0 - beta2) * g * g
        m_hat = slot.m / (1.0 - beta1**slot.step)
        v_hat = slot.v / (1.0 - beta2**slot.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale trainable gradients so their global L2 norm is at most ``max_norm``."""
    grads = [
        s.tensor.grad for s in store._slots.values() if s.trainable and s.tensor.grad is not None
    ]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for s in store._slots.values():
            if s.trainable and s.tensor.grad is not None:
                s.tensor.grad = s.tensor.grad * factor
    return total
