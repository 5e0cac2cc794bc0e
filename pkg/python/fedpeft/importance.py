"""Per-head confidence scores and the pruning masks derived from them.

A head's score is the dataset average, over real non-EOS query positions, of
the largest attention probability the query puts on any non-EOS key. Removing
EOS keys renormalizes each row over the remaining keys first.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import InputError, ShapeError
from .lora import LoraAdapter, PruneMask, pruned_head_count

if TYPE_CHECKING:
    from .data import Dataset
    from .model import MiniTransformer

logger = logging.getLogger(__name__)

IMPORTANCE_MODES = ("softmax", "logit")


@dataclass(frozen=True)
class ImportanceMatrix:
    """Scores ``[L, H]`` in [0, 1]; zero marks a pruned head."""

    scores: np.ndarray
    client_id: int = -1
    round: int = 0
    dataset_size: int = 0

    def __post_init__(self) -> None:
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ShapeError(f"importance must be [L, H], got {scores.shape}")
        if np.any(scores < 0) or not np.all(np.isfinite(scores)):
            raise InputError("importance scores must be finite and non-negative")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def n_heads(self) -> int:
        return self.scores.shape[1]

    def thresholded(self, mask: PruneMask) -> "ImportanceMatrix":
        if mask.keep.shape != self.scores.shape:
            raise ShapeError(f"mask {mask.keep.shape} does not fit importance {self.scores.shape}")
        return replace(self, scores=np.where(mask.keep, self.scores, 0.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def score_attention(
    probs: np.ndarray,
    tokens: np.ndarray,
    mask: np.ndarray,
    eos_token: int,
    scores: np.ndarray | None = None,
    mode: str = "softmax",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample head scores for one layer.

    Args:
        probs: ``[n, H, T, T]`` post-softmax attention.
        tokens: ``[n, T]`` token ids.
        mask: ``[n, T]`` true for real positions.
        eos_token: Id excluded as query and as key.
        scores: ``[n, H, T, T]`` pre-softmax scores, needed for ``mode="logit"``.
        mode: ``"softmax"`` or ``"logit"`` (mean raw row maximum, not yet squashed).

    Returns:
        ``(per_sample [n, H], valid [n])``; samples without a non-EOS real
        position are marked invalid and score 0.
    """
    if mode not in IMPORTANCE_MODES:
        raise InputError(f"unknown importance mode {mode!r}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 4 or probs.shape[2] != probs.shape[3] or tokens.shape != (probs.shape[0], probs.shape[2]):
        raise ShapeError(f"attention {probs.shape} does not fit tokens {np.shape(tokens)}")
    valid = np.asarray(mask, dtype=bool) & (np.asarray(tokens) != eos_token)
    keys = valid[:, None, None, :]
    if mode == "softmax":
        kept = np.where(keys, probs, 0.0)
        mass = kept.sum(axis=-1)
        row_max = np.divide(kept.max(axis=-1), mass, out=np.zeros_like(mass), where=mass > 0)
    else:
        if scores is None or np.shape(scores) != probs.shape:
            raise ShapeError("logit importance needs pre-softmax scores shaped like the attention")
        raw = np.where(keys, scores, -np.inf).max(axis=-1)
        row_max = np.where(np.isfinite(raw), raw, 0.0)
    queries = valid[:, None, :].astype(np.float64)
    counts = queries.sum(axis=-1)
    numerator = (row_max * queries).sum(axis=-1)
    per_sample = np.divide(numerator, counts, out=np.zeros_like(numerator), where=counts > 0)
    return per_sample, valid.any(axis=1)


def compute_importance(
    model: "MiniTransformer",
    adapter: LoraAdapter,
    dataset: "Dataset",
    eos_token: int | None = None,
    mode: str = "softmax",
    *,
    client_id: int = -1,
    round: int = 0,
    batch_size: int = 128,
) -> ImportanceMatrix:
    """Forward-only importance of every head of ``model`` with ``adapter`` on ``dataset``."""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot compute importance on an empty dataset")
    eos = model.config.eos_token if eos_token is None else eos_token
    L, H = model.config.n_layers, model.config.n_heads
    totals = np.zeros((L, H))
    counted = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        _, trace = model.forward(dataset.tokens[start:stop], dataset.mask[start:stop], adapter)
        for layer in range(L):
            per_sample, valid = score_attention(
                trace.probs[layer], trace.tokens, trace.mask, eos, trace.scores[layer], mode
            )
            totals[layer] += per_sample[valid].sum(axis=0)
            if layer == 0:
                counted += int(valid.sum())
    if counted == 0:
        raise InputError("no sample has a non-EOS position to score")
    scores = totals / counted
    if mode == "logit":
        scores = _sigmoid(scores)
    return ImportanceMatrix(scores, client_id=client_id, round=round, dataset_size=n)


def prune_by_sparsity(importance: ImportanceMatrix, sparsity: float) -> tuple[PruneMask, ImportanceMatrix]:
    """Prune the ⌊sparsity·L·H⌋ lowest-scoring heads across all layers.

    Ties are broken by ascending flat (layer, head) index.
    """
    flat = importance.scores.ravel()
    n_prune = pruned_head_count(flat.size, sparsity)
    order = np.lexsort((np.arange(flat.size), flat))
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:n_prune]] = False
    mask = PruneMask(keep.reshape(importance.scores.shape))
    return mask, importance.thresholded(mask)


def random_prune_mask(n_layers: int, n_heads: int, sparsity: float, rng: np.random.Generator) -> PruneMask:
    """Uniformly chosen heads, same count as :func:`prune_by_sparsity`."""
    total = n_layers * n_heads
    n_prune = pruned_head_count(total, sparsity)
    keep = np.ones(total, dtype=bool)
    if n_prune:
        keep[rng.choice(total, size=n_prune, replace=False)] = False
    return PruneMask(keep.reshape(n_layers, n_heads))


def mean_pairwise_distance(matrices: Sequence[ImportanceMatrix | np.ndarray]) -> float:
    """Mean Euclidean distance over all pairs; 0.0 for fewer than two matrices."""
    flats = [np.asarray(getattr(m, "scores", m), dtype=np.float64).ravel() for m in matrices]
    if len(flats) < 2:
        return 0.0
    distances = [float(np.linalg.norm(a - b)) for a, b in itertools.combinations(flats, 2)]
    return float(np.mean(distances))
