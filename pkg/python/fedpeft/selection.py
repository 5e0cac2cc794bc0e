"""Client selection: loss gap against the global model, or uniform at random."""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError

SELECTION_MODES = ("random", "loss")


class ClientLedger:
    """Last reported local loss per client plus the current global loss.

    Clients that never reported carry ``+inf`` so they outrank everyone else.
    """

    def __init__(self, n_clients: int):
        if n_clients < 1:
            raise InputError(f"need at least one client, got {n_clients}")
        self.losses = np.full(n_clients, np.inf)
        self.last_round = np.full(n_clients, -1, dtype=np.int64)
        self.global_loss = 0.0

    @property
    def n_clients(self) -> int:
        return self.losses.size

    def record(self, client_id: int, loss: float, round: int) -> None:
        if not 0 <= client_id < self.n_clients:
            raise InputError(f"client id {client_id} out of range [0, {self.n_clients})")
        if not math.isfinite(loss):
            raise InputError(f"client {client_id} reported non-finite loss {loss}")
        self.losses[client_id] = loss
        self.last_round[client_id] = round

    def set_global_loss(self, loss: float) -> None:
        if not math.isfinite(loss):
            raise InputError(f"global loss must be finite, got {loss}")
        self.global_loss = float(loss)

    def gaps(self) -> np.ndarray:
        return self.losses - self.global_loss

    def participated(self) -> np.ndarray:
        return self.last_round >= 0


def _check_k(k: int, n_clients: int) -> None:
    if not 1 <= k <= n_clients:
        raise InputError(f"clients per round must be in [1, {n_clients}], got {k}")


def select_top_k(ledger: ClientLedger, k: int) -> list[int]:
    """The ``k`` clients with the largest loss gap, ties by ascending id."""
    _check_k(k, ledger.n_clients)
    ids = np.arange(ledger.n_clients)
    order = np.lexsort((ids, -ledger.gaps()))
    return [int(i) for i in order[:k]]


def select_random(rng: np.random.Generator, n_clients: int, k: int) -> list[int]:
    """``k`` distinct clients drawn uniformly, returned in ascending order."""
    _check_k(k, n_clients)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))
