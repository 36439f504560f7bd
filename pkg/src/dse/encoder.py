"""The trainable encoder: embedding table -> mean pooling -> dropout -> MLP head.

Training view: pooled token embeddings pass through inverted dropout, a
tanh hidden layer, a second dropout, and a linear output layer; those
head outputs feed the contrastive loss. Evaluation view: mean-pooled
embeddings only, no head and no dropout.

The forward pass records everything needed for exact analytic backprop
(token ids, dropout masks, activations) in a ForwardTape; ``backward``
replays it to produce parameter gradients that a finite-difference oracle
can check to ~1e-4 relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import TokenSeq, tokenize


class ForwardMode(Enum):
    TRAIN_STOCHASTIC = "train_stochastic"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 64
    head_hidden: int = 64
    head_out: int = 32
    dropout_rate: float = 0.1
    hash_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.embed_dim, self.head_hidden, self.head_out) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class EncoderModel:
    config: EncoderConfig
    E: np.ndarray   # vocab_size x d
    W1: np.ndarray  # d x head_hidden
    b1: np.ndarray  # head_hidden
    W2: np.ndarray  # head_hidden x head_out
    b2: np.ndarray  # head_out

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("E", self.E), ("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)]

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(
            config=self.config,
            E=self.E.astype(dtype),
            W1=self.W1.astype(dtype),
            b1=self.b1.astype(dtype),
            W2=self.W2.astype(dtype),
            b2=self.b2.astype(dtype),
        )

    def copy(self) -> "EncoderModel":
        return self.astype(self.E.dtype)


@dataclass
class GradientSet:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [("E", self.E), ("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)]


@dataclass
class ForwardTape:
    """Intermediate state of one TRAIN-view forward pass."""

    token_ids: list[tuple[int, ...]]
    drop1: np.ndarray     # n x d, mask already scaled by 1/(1-p); ones when deterministic
    drop2: np.ndarray     # n x head_hidden, scaled mask
    pooled: np.ndarray    # n x d, pre-dropout
    hidden: np.ndarray    # n x head_hidden, tanh output pre-dropout


def init_model(cfg: EncoderConfig, seed: int, dtype=np.float32) -> EncoderModel:
    """Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)] per matrix; zero biases."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, shape: tuple[int, int]) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return EncoderModel(
        config=cfg,
        E=uniform(cfg.vocab_size, (cfg.vocab_size, cfg.embed_dim)),
        W1=uniform(cfg.embed_dim, (cfg.embed_dim, cfg.head_hidden)),
        b1=np.zeros(cfg.head_hidden, dtype=dtype),
        W2=uniform(cfg.head_hidden, (cfg.head_hidden, cfg.head_out)),
        b2=np.zeros(cfg.head_out, dtype=dtype),
    )


def _pool(model: EncoderModel, token_seqs: list[TokenSeq]) -> np.ndarray:
    rows = np.empty((len(token_seqs), model.config.embed_dim), dtype=model.E.dtype)
    for i, seq in enumerate(token_seqs):
        if not seq.ids:
            raise ValueError(f"token sequence {i} is empty; nothing to pool")
        rows[i] = model.E[list(seq.ids)].mean(axis=0)
    return rows


def forward_eval(model: EncoderModel, token_seqs: list[TokenSeq]) -> np.ndarray:
    """Evaluation view: mean-pooled embeddings, deterministic, no head."""
    return _pool(model, token_seqs)


def forward_train(
    model: EncoderModel,
    token_seqs: list[TokenSeq],
    mode: ForwardMode = ForwardMode.TRAIN_STOCHASTIC,
    rng_seed: int | list[int] = 0,
) -> tuple[np.ndarray, ForwardTape]:
    """Training view: pooled -> dropout -> tanh layer -> dropout -> linear out.

    Dropout is inverted (kept units scaled by 1/(1-p)) and uses independent
    masks per example per call, deterministic for a given rng_seed.
    """
    cfg = model.config
    dtype = model.E.dtype
    pooled = _pool(model, token_seqs)
    n = pooled.shape[0]

    p = cfg.dropout_rate
    if mode is ForwardMode.TRAIN_STOCHASTIC and p > 0.0:
        rng = np.random.default_rng(rng_seed)
        keep = np.asarray(1.0 - p, dtype=dtype)
        drop1 = (rng.random((n, cfg.embed_dim)) >= p).astype(dtype) / keep
        drop2 = (rng.random((n, cfg.head_hidden)) >= p).astype(dtype) / keep
    else:
        drop1 = np.ones((n, cfg.embed_dim), dtype=dtype)
        drop2 = np.ones((n, cfg.head_hidden), dtype=dtype)

    pooled_d = pooled * drop1
    hidden = np.tanh(pooled_d @ model.W1 + model.b1)
    hidden_d = hidden * drop2
    out = hidden_d @ model.W2 + model.b2

    tape = ForwardTape(
        token_ids=[seq.ids for seq in token_seqs],
        drop1=drop1,
        drop2=drop2,
        pooled=pooled,
        hidden=hidden,
    )
    return out, tape


def replay_forward(model: EncoderModel, tape: ForwardTape) -> np.ndarray:
    """Recompute the TRAIN-view output with the tape's frozen dropout masks.

    Used by the finite-difference oracle: perturbed parameters, same masks.
    """
    from .corpus import TokenSeq as _TS

    seqs = [_TS(ids=ids, word_count=len(ids)) for ids in tape.token_ids]
    pooled = _pool(model, seqs)
    pooled_d = pooled * tape.drop1.astype(pooled.dtype)
    hidden = np.tanh(pooled_d @ model.W1 + model.b1)
    return hidden * tape.drop2.astype(pooled.dtype) @ model.W2 + model.b2


def backward(model: EncoderModel, tape: ForwardTape, grad_out: np.ndarray) -> GradientSet:
    """Exact gradients of all parameters given dL/d(head output).

    Chains through the recorded dropout masks, the tanh layer, mean pooling,
    and the embedding lookup; untouched vocab rows get exactly zero.
    """
    n = len(tape.token_ids)
    if grad_out.shape != (n, model.config.head_out):
        raise ValueError(f"grad shape {grad_out.shape} != ({n}, {model.config.head_out})")

    hidden_d = tape.hidden * tape.drop2
    dW2 = hidden_d.T @ grad_out
    db2 = grad_out.sum(axis=0)

    dhidden = (grad_out @ model.W2.T) * tape.drop2
    dpre1 = dhidden * (1.0 - tape.hidden**2)

    pooled_d = tape.pooled * tape.drop1
    dW1 = pooled_d.T @ dpre1
    db1 = dpre1.sum(axis=0)

    dpooled = (dpre1 @ model.W1.T) * tape.drop1

    dE = np.zeros_like(model.E)
    for i, ids in enumerate(tape.token_ids):
        contrib = dpooled[i] / len(ids)
        for tid in ids:
            dE[tid] += contrib

    return GradientSet(E=dE, W1=dW1.astype(model.W1.dtype), b1=db1.astype(model.b1.dtype),
                       W2=dW2.astype(model.W2.dtype), b2=db2.astype(model.b2.dtype))


def tokenize_texts(texts: list[str], cfg: EncoderConfig) -> list[TokenSeq]:
    return [tokenize(t, cfg.vocab_size, cfg.hash_seed) for t in texts]


def embed_texts(model: EncoderModel, texts: list[str]) -> np.ndarray:
    """Evaluation-view embeddings for raw texts (tokenize + mean pool)."""
    return forward_eval(model, tokenize_texts(texts, model.config))
