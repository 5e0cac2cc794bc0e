"""LoRA adapters on the Q/K/V projections, with B partitioned across heads.

Adapters use the row-vector convention of the model: a projection maps
``x[.., d_in]`` to ``x @ W`` with ``W[d_in, d_out]``, and the low-rank update
is ``(x @ A.T) @ B.T`` with ``A[r, d_in]`` and ``B[d_out, r]``. Row block
``h`` of ``B`` (rows ``h*d/H .. (h+1)*d/H``) produces the output columns that
feed head ``h``, so that block is owned by the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import InputError, ShapeError
from .tensor import Tensor, add, matmul, transpose

if TYPE_CHECKING:
    from .model import ModelConfig

PROJECTIONS = ("q", "k", "v")


def apply_lora(x, w, a, b) -> Tensor:
    """Return ``x @ W + (x @ A.T) @ B.T`` without forming ``B @ A``."""
    x, w, a, b = (v if isinstance(v, Tensor) else Tensor.constant(np.asarray(v, dtype=np.float64)) for v in (x, w, a, b))
    if w.ndim != 2 or a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"apply_lora: W {w.shape}, A {a.shape}, B {b.shape} must be matrices")
    d_in, d_out = w.shape
    if a.shape[1] != d_in or b.shape[0] != d_out or a.shape[0] != b.shape[1]:
        raise ShapeError(f"apply_lora: A {a.shape} and B {b.shape} do not fit W {w.shape}")
    return add(matmul(x, w), matmul(matmul(x, transpose(a)), transpose(b)))


def head_rows(d_model: int, n_heads: int, head: int) -> slice:
    if n_heads < 1 or d_model % n_heads:
        raise ShapeError(f"cannot split d={d_model} into {n_heads} heads")
    if not 0 <= head < n_heads:
        raise InputError(f"head index {head} out of range [0, {n_heads})")
    size = d_model // n_heads
    return slice(head * size, (head + 1) * size)


def head_slice(b: np.ndarray, head: int, n_heads: int) -> np.ndarray:
    """Row-block view of ``B`` owned by ``head``."""
    return b[head_rows(b.shape[0], n_heads, head)]


def pruned_head_count(total_heads: int, sparsity: float) -> int:
    """Number of heads pruned at ``sparsity``; at least one head always survives."""
    if not 0.0 <= sparsity < 1.0 or math.isnan(sparsity):
        raise InputError(f"sparsity must be in [0, 1), got {sparsity}")
    # Decimal value of the sparsity as written: 0.3 * 10 prunes 3 heads, not 2.
    return min(math.floor(Fraction(repr(float(sparsity))) * total_heads), total_heads - 1)


@dataclass(frozen=True)
class AdapterTensors:
    """Tensor view of an adapter, the leaves a :class:`GradTape` watches."""

    a: list[list[Tensor]]
    b: list[list[Tensor]]
    head: Tensor

    def leaves(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer_a, layer_b in zip(self.a, self.b):
            for ta, tb in zip(layer_a, layer_b):
                out.extend((ta, tb))
        out.append(self.head)
        return out

    def layer(self, index: int) -> tuple[list[Tensor], list[Tensor]]:
        return self.a[index], self.b[index]


@dataclass(eq=False)
class LoraAdapter:
    """Trainable set: ``a[L, 3, r, d]``, ``b[L, 3, d, r]`` and task head ``head[d, C]``.

    Instances are treated as values; arithmetic returns new adapters.
    """

    a: np.ndarray
    b: np.ndarray
    head: np.ndarray

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.head = np.asarray(self.head, dtype=np.float64)
        if self.a.ndim != 4 or self.b.ndim != 4 or self.head.ndim != 2:
            raise ShapeError(f"adapter arrays have wrong rank: a {self.a.shape}, b {self.b.shape}, head {self.head.shape}")
        n_layers, n_proj, rank, d = self.a.shape
        if n_proj != len(PROJECTIONS) or self.b.shape != (n_layers, n_proj, d, rank) or self.head.shape[0] != d:
            raise ShapeError(f"inconsistent adapter: a {self.a.shape}, b {self.b.shape}, head {self.head.shape}")

    @classmethod
    def initialize(cls, config: "ModelConfig", rng: np.random.Generator) -> "LoraAdapter":
        """A ~ N(0, 1/d), B = 0, task head ~ N(0, init_std)."""
        L, r, d = config.n_layers, config.rank, config.d_model
        a = rng.normal(0.0, 1.0 / math.sqrt(d), size=(L, len(PROJECTIONS), r, d))
        b = np.zeros((L, len(PROJECTIONS), d, r))
        head = rng.normal(0.0, config.init_std, size=(d, config.n_classes))
        return cls(a, b, head)

    @property
    def n_layers(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[2]

    @property
    def d_model(self) -> int:
        return self.a.shape[3]

    @property
    def n_classes(self) -> int:
        return self.head.shape[1]

    def parameter_count(self) -> int:
        return self.a.size + self.b.size + self.head.size

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.head.copy())

    def zeros_like(self) -> "LoraAdapter":
        return LoraAdapter(np.zeros_like(self.a), np.zeros_like(self.b), np.zeros_like(self.head))

    def same_layout(self, other: "LoraAdapter") -> bool:
        return self.a.shape == other.a.shape and self.b.shape == other.b.shape and self.head.shape == other.head.shape

    def _check(self, other: "LoraAdapter") -> None:
        if not self.same_layout(other):
            raise ShapeError(f"adapter layouts differ: {self.a.shape}/{self.head.shape} vs {other.a.shape}/{other.head.shape}")

    def __add__(self, other: "LoraAdapter") -> "LoraAdapter":
        self._check(other)
        return LoraAdapter(self.a + other.a, self.b + other.b, self.head + other.head)

    def __sub__(self, other: "LoraAdapter") -> "LoraAdapter":
        self._check(other)
        return LoraAdapter(self.a - other.a, self.b - other.b, self.head - other.head)

    def __mul__(self, factor: float) -> "LoraAdapter":
        factor = float(factor)
        return LoraAdapter(self.a * factor, self.b * factor, self.head * factor)

    __rmul__ = __mul__

    def as_tensors(self) -> AdapterTensors:
        a = [[Tensor(self.a[l, p]) for p in range(len(PROJECTIONS))] for l in range(self.n_layers)]
        b = [[Tensor(self.b[l, p]) for p in range(len(PROJECTIONS))] for l in range(self.n_layers)]
        return AdapterTensors(a, b, Tensor(self.head))

    @classmethod
    def from_leaf_values(cls, template: "LoraAdapter", values: Sequence[np.ndarray]) -> "LoraAdapter":
        """Inverse of :meth:`AdapterTensors.leaves` ordering for plain arrays (e.g. gradients)."""
        expected = 2 * template.n_layers * len(PROJECTIONS) + 1
        if len(values) != expected:
            raise ShapeError(f"expected {expected} leaf arrays, got {len(values)}")
        a = np.empty_like(template.a)
        b = np.empty_like(template.b)
        it = iter(values)
        for l in range(template.n_layers):
            for p in range(len(PROJECTIONS)):
                a[l, p] = next(it)
                b[l, p] = next(it)
        return cls(a, b, np.array(next(it), dtype=np.float64))


@dataclass(frozen=True)
class PruneMask:
    """One keep flag per (layer, head); a pruned head governs its Q, K and V blocks of B."""

    keep: np.ndarray = field()

    def __post_init__(self) -> None:
        keep = np.array(self.keep, dtype=bool)
        if keep.ndim != 2 or keep.size == 0:
            raise ShapeError(f"prune mask must be [L, H], got {keep.shape}")
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @classmethod
    def all_keep(cls, n_layers: int, n_heads: int) -> "PruneMask":
        return cls(np.ones((n_layers, n_heads), dtype=bool))

    @property
    def n_layers(self) -> int:
        return self.keep.shape[0]

    @property
    def n_heads(self) -> int:
        return self.keep.shape[1]

    @property
    def pruned_count(self) -> int:
        return int((~self.keep).sum())

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())

    @property
    def sparsity(self) -> float:
        return self.pruned_count / self.keep.size

    def kept_heads(self, layer: int) -> list[int]:
        return [int(h) for h in np.flatnonzero(self.keep[layer])]

    def is_pruned(self, layer: int, head: int) -> bool:
        return not bool(self.keep[layer, head])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PruneMask) and np.array_equal(self.keep, other.keep)

    def __hash__(self) -> int:
        return hash(self.keep.tobytes())


def freeze_pruned(grads: LoraAdapter, mask: PruneMask) -> LoraAdapter:
    """Zero the B gradient row-blocks of pruned heads; A, T and kept blocks pass through."""
    if mask.n_layers != grads.n_layers or grads.d_model % mask.n_heads:
        raise ShapeError(f"mask {mask.keep.shape} does not fit adapter with L={grads.n_layers}, d={grads.d_model}")
    if mask.pruned_count == 0:
        return grads
    b = grads.b.copy()
    for layer, head in zip(*np.nonzero(~mask.keep)):
        b[layer, :, head_rows(grads.d_model, mask.n_heads, int(head)), :] = 0.0
    return LoraAdapter(grads.a, b, grads.head)
