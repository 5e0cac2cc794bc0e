"""Server-side merging of client updates.

A, the task head and (in plain FedAvg mode) B are averaged by sample count.
In weighted mode each head's B block is averaged by the clients' importance
scores for that head instead. Updates are reduced in client-id order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InputError, ProtocolError
from .lora import LoraAdapter, head_rows
from .wire import ClientUpdate

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("fedavg", "weighted")


@dataclass(frozen=True)
class GlobalState:
    """Global trainable set, round counter and server merge constants."""

    adapter: LoraAdapter
    round: int = 0
    server_lr: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.server_lr > 0:
            raise InputError(f"server_lr must be positive, got {self.server_lr}")
        if not self.epsilon > 0:
            raise InputError(f"epsilon must be positive, got {self.epsilon}")


def _ordered(state: GlobalState, updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ProtocolError("no client updates to merge")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"updates from different rounds: {sorted(rounds)}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in update set: {sorted(ids)}")
    adapter = state.adapter
    for u in updates:
        if u.delta_a.shape != adapter.a.shape or u.delta_head.shape != adapter.head.shape:
            raise ProtocolError(f"client {u.client_id}: update layout does not match the global adapter")
    return sorted(updates, key=lambda u: u.client_id)


def fedavg_merge(state: GlobalState, updates: Sequence[ClientUpdate], include_heads: bool = False) -> GlobalState:
    """Sample-weighted average of ΔA and ΔT (and of B blocks when ``include_heads``).

    For B, each block is averaged over the clients that transmitted it.
    The round counter is left alone.
    """
    ordered = _ordered(state, updates)
    weights = [float(u.sample_count) for u in ordered]
    total = sum(weights)
    if total <= 0:
        raise ProtocolError("total sample count of the update set is zero")
    eta = state.server_lr
    adapter = state.adapter

    delta_a = np.zeros_like(adapter.a)
    delta_head = np.zeros_like(adapter.head)
    for w, u in zip(weights, ordered):
        delta_a += w * u.delta_a
        delta_head += w * u.delta_head
    a = adapter.a + eta * (delta_a / total)
    head = adapter.head + eta * (delta_head / total)

    b = adapter.b
    if include_heads:
        b = b.copy()
        n_heads = ordered[0].n_heads
        for key in sorted({k for u in ordered for k in u.delta_b}):
            layer, h = key
            num = None
            den = 0.0
            for w, u in zip(weights, ordered):
                block = u.delta_b.get(key)
                if block is None:
                    continue
                num = w * block if num is None else num + w * block
                den += w
            if num is not None and den > 0:
                b[layer, :, head_rows(adapter.d_model, n_heads, h), :] += eta * (num / den)
    return replace(state, adapter=LoraAdapter(a, b, head))


def weighted_head_merge(
    state: GlobalState,
    updates: Sequence[ClientUpdate],
    epsilon: float | None = None,
    server_lr: float | None = None,
) -> GlobalState:
    """Importance-weighted merge of head-owned B blocks.

    ``p += η · Σ α·Δp / (Σ α + ε)`` per (layer, head), summing over senders.
    A head nobody transmitted, or whose denominator is zero, is left unchanged.
    """
    ordered = _ordered(state, updates)
    eps = state.epsilon if epsilon is None else float(epsilon)
    eta = state.server_lr if server_lr is None else float(server_lr)
    if eps < 0 or not eta > 0:
        raise InputError(f"need epsilon >= 0 and server_lr > 0, got {eps}, {eta}")
    adapter = state.adapter
    L, d, r = adapter.n_layers, adapter.d_model, adapter.rank
    H = ordered[0].n_heads
    for u in ordered:
        alpha = u.importance
        if alpha.shape != (L, H):
            raise ProtocolError(f"client {u.client_id}: importance {alpha.shape} does not match L={L}, H={H}")
        if np.any(alpha < 0):
            raise InputError(f"client {u.client_id}: negative importance score")
        for layer, h in u.delta_b:
            if not (0 <= layer < L and 0 <= h < H):
                raise ProtocolError(f"client {u.client_id}: block ({layer}, {h}) out of range")
        missing = [(int(l), int(h)) for l, h in zip(*np.nonzero(alpha > 0)) if (l, h) not in u.delta_b]
        if missing:
            raise ProtocolError(f"client {u.client_id}: nonzero importance without a transmitted block at {missing}")

    b = adapter.b.copy()
    head_dim = d // H
    for layer in range(L):
        for h in range(H):
            num = np.zeros((b.shape[1], head_dim, r))
            den = 0.0
            sent = False
            for u in ordered:
                block = u.delta_b.get((layer, h))
                if block is None:
                    continue
                alpha = float(u.importance[layer, h])
                num += alpha * block
                den += alpha
                sent = True
            den += eps
            if not sent or den == 0.0:
                continue
            b[layer, :, head_rows(d, H, h), :] += eta * (num / den)
    return replace(state, adapter=LoraAdapter(adapter.a, b, adapter.head))


def aggregate(state: GlobalState, updates: Sequence[ClientUpdate], mode: str = "weighted") -> GlobalState:
    """Apply the merges for ``mode`` and advance the round once."""
    if mode == "fedavg":
        merged = fedavg_merge(state, updates, include_heads=True)
    elif mode == "weighted":
        merged = weighted_head_merge(fedavg_merge(state, updates, include_heads=False), updates)
    else:
        raise InputError(f"unknown aggregation mode {mode!r}; expected one of {AGGREGATION_MODES}")
    logger.debug("merged %d updates with %s", len(updates), mode)
    return replace(merged, round=state.round + 1)
