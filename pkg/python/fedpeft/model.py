"""Encoder-only miniature transformer classifier.

The backbone (embeddings, attention and FFN weights, layer norms) is frozen and
rebuilt from a seed; only the LoRA adapter and task head are trained. Each
block is post-LN::

    h   = LN(x + MHA(x))
    out = LN(h + gelu(h W1 + b1) W2 + b2)

followed by a masked mean-pool and the task head ``T`` (no bias).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .lora import PROJECTIONS, AdapterTensors, LoraAdapter, apply_lora
from .tensor import (
    GradTape,
    Tensor,
    add,
    add_bias,
    cross_entropy,
    gelu,
    layer_norm,
    masked_mean,
    matmul,
    merge_heads,
    reshape,
    scale,
    softmax_rows,
    split_heads,
    transpose,
)

if TYPE_CHECKING:
    from .data import Dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the toy model; the ``[model]`` table of an experiment config."""

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 32
    max_len: int = 16
    n_classes: int = 3
    rank: int = 4
    eos_token: int = 1
    pad_token: int = 0
    init_std: float = 0.05

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("eos_token", "pad_token"):
                if not 0 <= value < self.vocab_size:
                    raise ConfigError(f"model.{f.name}", f"must be in [0, {self.vocab_size}), got {value}")
            elif f.name == "init_std":
                if not value > 0:
                    raise ConfigError("model.init_std", f"must be positive, got {value}")
            elif value < 1:
                raise ConfigError(f"model.{f.name}", f"must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model", f"{self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.eos_token == self.pad_token:
            raise ConfigError("model.eos_token", "must differ from pad_token")
        if self.n_classes < 2:
            raise ConfigError("model.n_classes", "need at least 2 classes")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    position = np.arange(max_len)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(position * rate)
    table[:, 1::2] = np.cos(position * rate)[:, : d_model // 2]
    return table


@dataclass(frozen=True)
class LayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))

    def projection(self, index: int) -> np.ndarray:
        return (self.w_q, self.w_k, self.w_v)[index]


@dataclass(frozen=True)
class BackboneParams:
    """Frozen backbone Θ; identical on every client for a given seed."""

    token_embedding: np.ndarray
    positions: np.ndarray
    layers: tuple[LayerParams, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_embedding", _frozen(self.token_embedding))
        object.__setattr__(self, "positions", _frozen(self.positions))
        object.__setattr__(self, "layers", tuple(self.layers))

    @classmethod
    def initialize(cls, config: ModelConfig, seed) -> "BackboneParams":
        """Gaussian weights (std ``init_std``), unit LN gains, zero biases."""
        rng = np.random.default_rng(seed)
        d, d_ff, std = config.d_model, config.d_ff, config.init_std

        def normal(*shape: int) -> np.ndarray:
            return rng.normal(0.0, std, size=shape)

        embedding = normal(config.vocab_size, d)
        layers = []
        for _ in range(config.n_layers):
            layers.append(
                LayerParams(
                    w_q=normal(d, d),
                    w_k=normal(d, d),
                    w_v=normal(d, d),
                    w_o=normal(d, d),
                    ln1_gain=np.ones(d),
                    ln1_bias=np.zeros(d),
                    w_ff1=normal(d, d_ff),
                    b_ff1=np.zeros(d_ff),
                    w_ff2=normal(d_ff, d),
                    b_ff2=np.zeros(d),
                    ln2_gain=np.ones(d),
                    ln2_bias=np.zeros(d),
                )
            )
        return cls(embedding, sinusoidal_positions(config.max_len, d), tuple(layers))


@dataclass(frozen=True)
class AttentionTrace:
    """Per-layer attention of one forward pass.

    Attributes:
        probs: One ``[n, H, T, T]`` array per layer, post-softmax.
        scores: One ``[n, H, T, T]`` array per layer, scaled ``q·k`` before softmax.
        tokens: ``[n, T]`` token ids.
        mask: ``[n, T]`` boolean, true for real (unpadded) positions.
    """

    probs: tuple[np.ndarray, ...]
    scores: tuple[np.ndarray, ...]
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.probs)


LayerLora = tuple[list[Tensor], list[Tensor]]


def mha_forward(
    x: Tensor,
    layer: LayerParams,
    n_heads: int,
    lora: LayerLora | None = None,
    key_mask: np.ndarray | None = None,
    max_len: int | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Multi-head self-attention with optional LoRA on Q, K and V.

    Args:
        x: ``[T, d]`` or ``[n, T, d]`` inputs.
        layer: Frozen weights of the block.
        n_heads: Number of heads; ``d`` must be divisible by it.
        lora: ``(A list, B list)`` in projection order q, k, v.
        key_mask: ``[T]`` or ``[n, T]`` boolean; false keys get probability 0.
        max_len: Longest accepted sequence.

    Returns:
        ``(output, probs, scores)`` where ``probs`` and ``scores`` are
        ``[H, T, T]`` (unbatched) or ``[n, H, T, T]``.
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"mha_forward: expected [T, d] or [n, T, d], got {x.shape}")
    n, t, d = x.shape
    if max_len is not None and t > max_len:
        raise InputError(f"sequence length {t} exceeds max_len {max_len}")
    if layer.w_q.shape != (d, d):
        raise ShapeError(f"mha_forward: input width {d} does not match W_Q {layer.w_q.shape}")

    projected = []
    for index in range(len(PROJECTIONS)):
        weight = Tensor.constant(layer.projection(index))
        if lora is None:
            projected.append(matmul(x, weight))
        else:
            projected.append(apply_lora(x, weight, lora[0][index], lora[1][index]))
    q, k, v = (split_heads(p, n_heads) for p in projected)

    mask4 = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape == (t,):
            mask4 = key_mask.reshape(1, 1, 1, t)
        elif key_mask.shape == (n, t):
            mask4 = key_mask.reshape(n, 1, 1, t)
        else:
            raise ShapeError(f"mha_forward: key mask {key_mask.shape} does not fit input {x.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d // n_heads))
    probs = softmax_rows(scores, mask4)
    out = matmul(merge_heads(matmul(probs, v)), Tensor.constant(layer.w_o))
    if single:
        return reshape(out, (t, d)), probs.data[0], scores.data[0]
    return out, probs.data, scores.data


class MiniTransformer:
    """Frozen backbone plus the forward, loss and evaluation entry points.

    The instance holds no trainable state; adapters are passed in, so one
    model is shared read-only by every simulated client and thread.
    """

    def __init__(self, config: ModelConfig, backbone: BackboneParams):
        if len(backbone.layers) != config.n_layers or backbone.token_embedding.shape != (config.vocab_size, config.d_model):
            raise ShapeError("backbone does not match model config")
        self.config = config
        self.backbone = backbone

    @classmethod
    def from_seed(cls, config: ModelConfig, seed) -> "MiniTransformer":
        return cls(config, BackboneParams.initialize(config, seed))

    def init_adapter(self, rng: np.random.Generator) -> LoraAdapter:
        return LoraAdapter.initialize(self.config, rng)

    def _check_batch(self, tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tokens = np.asarray(tokens)
        mask = np.asarray(mask, dtype=bool)
        if tokens.ndim != 2 or mask.shape != tokens.shape:
            raise ShapeError(f"tokens {tokens.shape} and mask {mask.shape} must both be [n, T]")
        if tokens.shape[0] == 0:
            raise InputError("empty batch")
        if tokens.shape[1] > self.config.max_len:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if not np.issubdtype(tokens.dtype, np.integer) or tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token ids must be integers in [0, {self.config.vocab_size})")
        if not mask.any(axis=1).all():
            raise InputError("every sequence needs at least one unmasked position")
        return tokens, mask

    def embed(self, tokens: np.ndarray) -> Tensor:
        t = tokens.shape[1]
        x = self.backbone.token_embedding[tokens] * math.sqrt(self.config.d_model) + self.backbone.positions[:t]
        return Tensor.constant(_frozen(x))

    def _forward(
        self, tokens: np.ndarray, mask: np.ndarray, params: AdapterTensors, use_lora: bool = True
    ) -> tuple[Tensor, AttentionTrace]:
        tokens, mask = self._check_batch(tokens, mask)
        x = self.embed(tokens)
        all_probs, all_scores = [], []
        for index, layer in enumerate(self.backbone.layers):
            lora = params.layer(index) if use_lora else None
            attn, probs, scores = mha_forward(x, layer, self.config.n_heads, lora, mask, self.config.max_len)
            all_probs.append(probs)
            all_scores.append(scores)
            h = layer_norm(add(x, attn), Tensor.constant(layer.ln1_gain), Tensor.constant(layer.ln1_bias))
            ff = gelu(add_bias(matmul(h, Tensor.constant(layer.w_ff1)), Tensor.constant(layer.b_ff1)))
            ff = add_bias(matmul(ff, Tensor.constant(layer.w_ff2)), Tensor.constant(layer.b_ff2))
            x = layer_norm(add(h, ff), Tensor.constant(layer.ln2_gain), Tensor.constant(layer.ln2_bias))
        logits = matmul(masked_mean(x, mask), params.head)
        return logits, AttentionTrace(tuple(all_probs), tuple(all_scores), tokens, mask)

    def forward(
        self, tokens: np.ndarray, mask: np.ndarray, adapter: LoraAdapter, use_lora: bool = True
    ) -> tuple[Tensor, AttentionTrace]:
        """Logits ``[n, C]`` and the attention trace.

        With ``use_lora=False`` the adapter contributes only its task head,
        giving the backbone-only output.
        """
        if adapter.n_layers != self.config.n_layers or adapter.d_model != self.config.d_model:
            raise ShapeError(f"adapter a {adapter.a.shape} does not fit model config")
        return self._forward(tokens, mask, adapter.as_tensors(), use_lora)

    def loss_and_grad(
        self, adapter: LoraAdapter, tokens: np.ndarray, mask: np.ndarray, labels: np.ndarray
    ) -> tuple[float, LoraAdapter]:
        """Mean cross-entropy and its gradient over the trainable set only."""
        params = adapter.as_tensors()
        leaves = params.leaves()
        with GradTape() as tape:
            tape.watch(*leaves)
            logits, _ = self._forward(tokens, mask, params)
            loss = cross_entropy(logits, labels)
        grads = tape.gradient(loss, leaves)
        return loss.item(), LoraAdapter.from_leaf_values(adapter, grads)

    def evaluate(self, adapter: LoraAdapter, dataset: "Dataset", batch_size: int = 256) -> tuple[float, float]:
        """Mean cross-entropy and accuracy over ``dataset``, forward only."""
        n = len(dataset)
        if n == 0:
            raise InputError("cannot evaluate on an empty dataset")
        params = adapter.as_tensors()
        total_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            labels = dataset.labels[start:stop]
            logits, _ = self._forward(dataset.tokens[start:stop], dataset.mask[start:stop], params)
            total_loss += cross_entropy(logits, labels).item() * (stop - start)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        return total_loss / n, correct / n
