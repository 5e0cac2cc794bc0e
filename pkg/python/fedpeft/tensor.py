"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of operations the miniature transformer needs are provided.
Every op is a plain function that computes its output with numpy and, when a
:class:`GradTape` is active and one of its inputs is being tracked, appends a
record holding the vector-Jacobian product for the backward pass.

Example:
    >>> a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    >>> with GradTape() as tape:
    ...     tape.watch(a)
    ...     loss = sum_all(matmul(a, Tensor([[1.0], [1.0]])))
    >>> (grad,) = tape.gradient(loss, [a])
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NumericalError, ShapeError

Array = np.ndarray
Needs = tuple[bool, ...]
VJP = Callable[[Array, Needs], tuple["Array | None", ...]]

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("fedpeft_tape", default=None)

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Immutable n-dimensional array of 64-bit floats."""

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def constant(cls, arr: Array) -> "Tensor":
        """Wrap an array without copying when it is already read-only float64."""
        if isinstance(arr, np.ndarray) and arr.dtype == np.float64 and not arr.flags.writeable:
            return cls._wrap(arr)
        return cls(arr)

    @classmethod
    def _wrap(cls, arr: Array) -> "Tensor":
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out._data = arr
        return out

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def item(self) -> float:
        return float(self._data)

    def numpy(self) -> Array:
        """Writable copy of the values."""
        return self._data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP
    needs: Needs


class GradTape:
    """Ordered record of executed ops, replayed in reverse by :meth:`gradient`.

    Only ops with at least one tracked input are recorded. A tensor is tracked
    when it was passed to :meth:`watch` or produced by a recorded op. The tape
    keeps references to every recorded tensor, so identities stay stable for
    its whole lifetime.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> list[str]:
        return [record.op for record in self._records]

    def watch(self, *tensors: Tensor) -> None:
        for tensor in tensors:
            if id(tensor) not in self._tracked:
                self._tracked.add(id(tensor))
                self._watched.append(tensor)

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    def _record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: VJP) -> None:
        needs = tuple(id(t) in self._tracked for t in inputs)
        if not any(needs):
            return
        self._tracked.add(id(output))
        self._records.append(_Record(op, inputs, output, vjp, needs))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[Array | None]:
        """Gradients of ``sum(target)`` with respect to each source.

        Returns:
            One array per source. Sources never watched get ``None``; watched
            sources the target does not depend on get zeros.
        """
        grads: dict[int, Array] = {id(target): np.ones(target.shape)}
        for record in reversed(self._records):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            input_grads = record.vjp(upstream, record.needs)
            for tensor, need, grad in zip(record.inputs, record.needs, input_grads):
                if not need or grad is None:
                    continue
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad
        result: list[Array | None] = []
        for source in sources:
            if id(source) not in self._tracked:
                result.append(None)
            else:
                grad = grads.get(id(source))
                result.append(np.zeros(source.shape) if grad is None else grad)
        return result


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def _emit(op: str, out: Array, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op}: non-finite values in output of shape {out.shape}")
    result = Tensor._wrap(np.asarray(out, dtype=np.float64))
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape._record(op, inputs, result, vjp)
    return result


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.constant(np.asarray(value, dtype=np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` or has the same
    leading axes as ``a``. No other broadcasting is performed.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2] or (y.ndim > 2 and x.shape[:-2] != y.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {y.shape}")

    def vjp(g: Array, needs: Needs):
        ga = g @ np.swapaxes(y, -1, -2) if needs[0] else None
        gb = None
        if needs[1]:
            if y.ndim == 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return _emit("matmul", x @ y, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")
    width = bias.shape[0]

    def vjp(g: Array, needs: Needs):
        return g, g.reshape(-1, width).sum(axis=0) if needs[1] else None

    return _emit("add_bias", x.data + bias.data, (x, bias), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g, needs: (g * factor,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {original} to {shape}") from exc
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(original),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {x.shape}")
    return _emit("transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g, needs: (np.swapaxes(g, -1, -2),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    z = x.data
    t = np.tanh(_GELU_C * (z + 0.044715 * z**3))

    def vjp(g: Array, needs: Needs):
        dt = (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * 0.044715 * z**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * dt),)

    return _emit("gelu", 0.5 * z * (1.0 + t), (x,), vjp)


def softmax_rows(x: Tensor, key_mask: Array | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum.

    Args:
        x: Scores ``[..., n]``.
        key_mask: Optional boolean array broadcastable to ``x``; ``False``
            entries act as a score of minus infinity and get probability 0.
    """
    x = _as_tensor(x)
    z = x.data
    if key_mask is not None:
        try:
            mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), z.shape)
        except ValueError as exc:
            raise ShapeError(f"softmax_rows: mask {np.shape(key_mask)} does not fit {z.shape}") from exc
        if not mask.any(axis=-1).all():
            raise InputError("softmax_rows: a row has no unmasked entries")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array, needs: Needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", p, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1] if x.ndim else 0
    if width < 1 or gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit {x.shape}")
    z = x.data
    centered = z - z.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    g_data = gain.data

    def vjp(g: Array, needs: Needs):
        gx = None
        if needs[0]:
            dxhat = g * g_data
            gx = inv_std * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, width).sum(axis=0) if needs[1] else None
        gb = g.reshape(-1, width).sum(axis=0) if needs[2] else None
        return gx, gg, gb

    return _emit("layer_norm", xhat * g_data + bias.data, (x, gain, bias), vjp)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[n, T, d]`` → ``[n, H, T, d/H]``."""
    x = _as_tensor(x)
    if x.ndim != 3 or n_heads < 1 or x.shape[-1] % n_heads:
        raise ShapeError(f"split_heads: cannot split {x.shape} into {n_heads} heads")
    n, t, d = x.shape
    out = x.data.reshape(n, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)
    return _emit("split_heads", out, (x,), lambda g, needs: (g.transpose(0, 2, 1, 3).reshape(n, t, d),))


def merge_heads(x: Tensor) -> Tensor:
    """``[n, H, T, d/H]`` → ``[n, T, d]``."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"merge_heads: expected [n, H, T, dh], got {x.shape}")
    n, h, t, dh = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(n, t, h * dh)
    return _emit("merge_heads", out, (x,), lambda g, needs: (g.reshape(n, t, h, dh).transpose(0, 2, 1, 3),))


def masked_mean(x: Tensor, mask: Array) -> Tensor:
    """Mean over axis 1 of ``[n, T, d]`` restricted to positions where ``mask`` is true."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask {mask.shape} does not fit {x.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("masked_mean: a row has no unmasked positions")
    weights = mask / counts[:, None]
    out = np.einsum("nt,ntd->nd", weights, x.data)
    return _emit("masked_mean", out, (x,), lambda g, needs: (weights[:, :, None] * g[:, None, :],))


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of the true class; returns a scalar tensor."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, n_classes = logits.shape
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"cross_entropy: labels must be integers in [0, {n_classes})")
    if n == 0:
        raise InputError("cross_entropy: empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def vjp(g: Array, needs: Needs):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), vjp)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), lambda g, needs: (np.full(shape, float(g)),))
