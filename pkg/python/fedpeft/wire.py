"""Client update payloads and their binary wire format.

Values travel as float32 while training runs in float64, so the codec is
lossless at wire precision: decoding gives back ``update.quantized()``, and
re-encoding a decoded update reproduces the payload byte for byte.

Layout (little-endian; see docs/FORMATS.md)::

    header   40 bytes  magic "FPEF", u16 version, u16 reserved, u32 client,
                       u32 round, u32 samples, u16 L, H, d, r, C, n_proj,
                       f64 loss
    alpha    L*H float32
    per layer, per projection (q, k, v):
             A         r*d float32
             u32       number of kept head blocks
             per kept head, ascending:
                       u32 head id, (d/H)*r float32
    head     d*C float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, ShapeError
from .lora import PROJECTIONS, LoraAdapter, PruneMask, head_rows

MAGIC = b"FPEF"
FORMAT_VERSION = 1
VALUE_BYTES = 4

_HEADER = struct.Struct("<4sHHIIIHHHHHHd")
_U32 = struct.Struct("<I")
HEADER_SIZE = _HEADER.size

BlockKey = tuple[int, int]


@dataclass(eq=False)
class ClientUpdate:
    """What a client uploads after local training.

    ``delta_b`` holds only the kept heads: ``(layer, head) -> [3, d/H, r]``.
    ``importance`` has pruned heads zeroed.
    """

    client_id: int
    round: int
    sample_count: int
    loss: float
    importance: np.ndarray
    delta_a: np.ndarray
    delta_b: dict[BlockKey, np.ndarray] = field(default_factory=dict)
    delta_head: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_layers(self) -> int:
        return self.delta_a.shape[0]

    @property
    def n_heads(self) -> int:
        return self.importance.shape[1]

    @property
    def rank(self) -> int:
        return self.delta_a.shape[2]

    @property
    def d_model(self) -> int:
        return self.delta_a.shape[3]

    @property
    def n_classes(self) -> int:
        return self.delta_head.shape[1]

    @property
    def mask(self) -> PruneMask:
        keep = np.zeros((self.n_layers, self.n_heads), dtype=bool)
        for layer, head in self.delta_b:
            keep[layer, head] = True
        return PruneMask(keep)

    def transmitted_values(self) -> int:
        return (
            self.importance.size
            + self.delta_a.size
            + sum(block.size for block in self.delta_b.values())
            + self.delta_head.size
        )

    @classmethod
    def from_delta(
        cls,
        delta: LoraAdapter,
        mask: PruneMask,
        importance,
        *,
        client_id: int,
        round: int,
        sample_count: int,
        loss: float,
    ) -> "ClientUpdate":
        """Sparsify a dense adapter delta: B blocks of pruned heads are dropped."""
        scores = np.array(getattr(importance, "scores", importance), dtype=np.float64)
        if scores.shape != mask.keep.shape or mask.n_layers != delta.n_layers:
            raise ShapeError(f"importance {scores.shape} / mask {mask.keep.shape} do not fit adapter L={delta.n_layers}")
        blocks: dict[BlockKey, np.ndarray] = {}
        for layer in range(mask.n_layers):
            for head in mask.kept_heads(layer):
                rows = head_rows(delta.d_model, mask.n_heads, head)
                blocks[(layer, head)] = delta.b[layer, :, rows, :].copy()
        scores[~mask.keep] = 0.0
        return cls(
            client_id=client_id,
            round=round,
            sample_count=sample_count,
            loss=float(loss),
            importance=scores,
            delta_a=delta.a.copy(),
            delta_b=blocks,
            delta_head=delta.head.copy(),
        )

    def quantized(self) -> "ClientUpdate":
        """This update at wire precision: what ``decode_update(encode_update(self))`` returns."""

        def f32(arr: np.ndarray) -> np.ndarray:
            return np.asarray(arr, dtype=np.float32).astype(np.float64)

        return ClientUpdate(
            client_id=self.client_id,
            round=self.round,
            sample_count=self.sample_count,
            loss=self.loss,
            importance=f32(self.importance),
            delta_a=f32(self.delta_a),
            delta_b={key: f32(block) for key, block in self.delta_b.items()},
            delta_head=f32(self.delta_head),
        )

    def to_dense_b(self) -> np.ndarray:
        """ΔB as ``[L, 3, d, r]`` with zeros for absent blocks."""
        dense = np.zeros((self.n_layers, len(PROJECTIONS), self.d_model, self.rank))
        for (layer, head), block in self.delta_b.items():
            dense[layer, :, head_rows(self.d_model, self.n_heads, head), :] = block
        return dense

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        return (
            (self.client_id, self.round, self.sample_count, self.loss)
            == (other.client_id, other.round, other.sample_count, other.loss)
            and np.array_equal(self.importance, other.importance)
            and np.array_equal(self.delta_a, other.delta_a)
            and np.array_equal(self.delta_head, other.delta_head)
            and self.delta_b.keys() == other.delta_b.keys()
            and all(np.array_equal(self.delta_b[k], other.delta_b[k]) for k in self.delta_b)
        )


def payload_size(
    n_layers: int,
    n_heads: int,
    d_model: int,
    rank: int,
    n_classes: int,
    kept_heads: int,
    n_projections: int = len(PROJECTIONS),
) -> int:
    """Exact encoded size in bytes; ``kept_heads`` is the total over all layers."""
    head_dim = d_model // n_heads
    return (
        HEADER_SIZE
        + VALUE_BYTES * n_layers * n_heads
        + n_layers * n_projections * (_U32.size + VALUE_BYTES * rank * d_model)
        + n_projections * kept_heads * (_U32.size + VALUE_BYTES * head_dim * rank)
        + VALUE_BYTES * d_model * n_classes
    )


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_update(update: ClientUpdate) -> bytes:
    L, H, d, r, C = update.n_layers, update.n_heads, update.d_model, update.rank, update.n_classes
    if update.importance.shape != (L, H):
        raise ProtocolError(f"importance {update.importance.shape} does not match L={L}, H={H}")
    try:
        parts = [
            _HEADER.pack(
                MAGIC, FORMAT_VERSION, 0, update.client_id, update.round, update.sample_count,
                L, H, d, r, C, len(PROJECTIONS), float(update.loss),
            )
        ]
    except struct.error as exc:
        raise ProtocolError(f"update header out of range: {exc}") from exc
    parts.append(_f32(update.importance))
    for layer in range(L):
        kept = sorted(head for (l, head) in update.delta_b if l == layer)
        for p in range(len(PROJECTIONS)):
            parts.append(_f32(update.delta_a[layer, p]))
            parts.append(_U32.pack(len(kept)))
            for head in kept:
                parts.append(_U32.pack(head))
                parts.append(_f32(update.delta_b[(layer, head)][p]))
    parts.append(_f32(update.delta_head))
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> int:
        start = self.offset
        if start + size > len(self.payload):
            raise ProtocolError(f"payload truncated at byte {start} (need {size} more, have {len(self.payload) - start})")
        self.offset += size
        return start

    def u32(self) -> int:
        return _U32.unpack_from(self.payload, self.take(_U32.size))[0]

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        start = self.take(VALUE_BYTES * count)
        return np.frombuffer(self.payload, dtype="<f4", count=count, offset=start).astype(np.float64).reshape(shape)


def decode_update(payload: bytes) -> ClientUpdate:
    """Parse an encoded update; any malformation raises :class:`ProtocolError`."""
    if len(payload) < HEADER_SIZE:
        raise ProtocolError(f"payload of {len(payload)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, _, client, rnd, samples, L, H, d, r, C, n_proj, loss = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ProtocolError(f"unsupported format version {version}")
    if n_proj != len(PROJECTIONS) or min(L, H, d, r, C) < 1 or d % H:
        raise ProtocolError(f"inconsistent dimensions L={L} H={H} d={d} r={r} C={C} projections={n_proj}")
    reader = _Reader(payload)
    reader.take(HEADER_SIZE)
    importance = reader.floats((L, H))
    head_dim = d // H
    delta_a = np.zeros((L, n_proj, r, d))
    delta_b: dict[BlockKey, np.ndarray] = {}
    for layer in range(L):
        layer_heads: list[int] | None = None
        blocks: dict[int, list[np.ndarray]] = {}
        for p in range(n_proj):
            delta_a[layer, p] = reader.floats((r, d))
            count = reader.u32()
            if count > H:
                raise ProtocolError(f"layer {layer}: {count} head blocks for {H} heads")
            heads = []
            for _ in range(count):
                head = reader.u32()
                if head >= H or (heads and head <= heads[-1]):
                    raise ProtocolError(f"layer {layer}: head ids must be ascending and < {H}, got {head}")
                heads.append(head)
                blocks.setdefault(head, []).append(reader.floats((head_dim, r)))
            if layer_heads is None:
                layer_heads = heads
            elif heads != layer_heads:
                raise ProtocolError(f"layer {layer}: projections carry different head sets")
        for head in layer_heads or []:
            delta_b[(layer, head)] = np.stack(blocks[head])
    delta_head = reader.floats((d, C))
    if reader.offset != len(payload):
        raise ProtocolError(f"{len(payload) - reader.offset} trailing bytes after payload")
    return ClientUpdate(
        client_id=client,
        round=rnd,
        sample_count=samples,
        loss=loss,
        importance=importance,
        delta_a=delta_a,
        delta_b=delta_b,
        delta_head=delta_head,
    )


def serialize_sparse(
    delta: LoraAdapter,
    mask: PruneMask,
    importance,
    *,
    client_id: int,
    round: int,
    sample_count: int,
    loss: float,
) -> bytes:
    update = ClientUpdate.from_delta(
        delta, mask, importance, client_id=client_id, round=round, sample_count=sample_count, loss=loss
    )
    return encode_update(update)
