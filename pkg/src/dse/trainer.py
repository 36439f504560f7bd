"""Batch assembly, the Adam training loop, and bit-exact checkpointing.

Two learning-rate groups: the embedding table trains at lr_backbone, the
contrastive head at lr_head. Checkpoints serialize to a versioned binary
format (magic "DSECKPT1", UTF-8 key=value header, raw little-endian f32
arrays in fixed order, 8-byte length footer) whose save/load/save
roundtrip is byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncoderConfig,
    EncoderModel,
    ForwardMode,
    GradientSet,
    forward_train,
    init_model,
    tokenize_texts,
)
from .loss import LossConfig, TrainBatch, batch_loss_and_grad
from .pairs import TrainPair

CHECKPOINT_MAGIC = b"DSECKPT1\n"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 15
    lr_head: float = 3e-4
    lr_backbone: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0
    init_seed: int = 0
    dropout_seed: int = 0
    same_dialogue_exclusion: bool = False
    keep_partial_batches: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.lr_head, self.lr_backbone) <= 0:
            raise ValueError("learning rates must be positive")

    def digest(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(vars(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def paper_preset() -> TrainConfig:
    """The published hyperparameters: batch 1024, 15 epochs, lr 3e-4 / 3e-6."""
    return TrainConfig(batch_size=1024, epochs=15, lr_head=3e-4, lr_backbone=3e-6)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class Checkpoint:
    model: EncoderModel
    adam: AdamState
    epoch: int
    config_digest: str


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]


class CheckpointError(ValueError):
    pass


def init_adam_state(model: EncoderModel) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p) for name, p in model.param_items()},
        v={name: np.zeros_like(p) for name, p in model.param_items()},
        t=0,
    )


def make_batches(
    pairs: list[TrainPair],
    cfg: TrainConfig,
    epoch: int,
    group_ids: list[int] | None = None,
) -> list[list[int]]:
    """Deterministic per-epoch shuffle, chunked into index lists of batch_size.

    A trailing chunk of size 1 is always dropped (the loss needs at least
    2 pairs); other partial chunks are kept or dropped per
    keep_partial_batches. With same_dialogue_exclusion and group_ids, a
    single greedy pass places each pair into the first batch with room
    that does not already hold its group, falling back silently to the
    first batch with room.
    """
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs to train, got {len(pairs)}")
    rng = np.random.default_rng([cfg.shuffle_seed, epoch])
    order = rng.permutation(len(pairs)).tolist()

    M = cfg.batch_size
    if cfg.same_dialogue_exclusion and group_ids is not None:
        num_batches = max(1, -(-len(order) // M))
        batches: list[list[int]] = [[] for _ in range(num_batches)]
        groups: list[set[int]] = [set() for _ in range(num_batches)]
        for idx in order:
            g = group_ids[idx]
            target = next(
                (b for b in range(num_batches) if len(batches[b]) < M and g not in groups[b]),
                None,
            )
            if target is None:
                target = next(b for b in range(num_batches) if len(batches[b]) < M)
            batches[target].append(idx)
            groups[target].add(g)
    else:
        batches = [order[i : i + M] for i in range(0, len(order), M)]

    if cfg.keep_partial_batches:
        return [b for b in batches if len(b) >= 2]
    return [b for b in batches if len(b) == M]


def adam_step(model: EncoderModel, grads: GradientSet, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction and per-group learning rates."""
    state.t += 1
    t = state.t
    lrs = {"E": cfg.lr_backbone, "W1": cfg.lr_head, "b1": cfg.lr_head, "W2": cfg.lr_head, "b2": cfg.lr_head}
    params = dict(model.param_items())
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        params[name] -= (lrs[name] * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(params[name].dtype)


def train(
    pairs: list[TrainPair],
    encoder_cfg: EncoderConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    hooks: list | None = None,
    group_ids: list[int] | None = None,
) -> TrainResult:
    """Full contrastive training run; deterministic given the configs' seeds.

    Each step forwards both sides of a batch in stochastic mode (fresh
    dropout masks, seeds derived from (dropout_seed, epoch, step, side)),
    computes the symmetrized loss and exact gradients, and applies Adam.
    Hooks fire once after each epoch with the current Checkpoint.
    """
    model = init_model(encoder_cfg, train_cfg.init_seed)
    adam = init_adam_state(model)
    queries = tokenize_texts([p.query for p in pairs], encoder_cfg)
    responses = tokenize_texts([p.response for p in pairs], encoder_cfg)

    epoch_losses: list[float] = []
    ckpt = Checkpoint(model=model, adam=adam, epoch=0, config_digest=train_cfg.digest())
    for epoch in range(train_cfg.epochs):
        losses = []
        for step, batch_idx in enumerate(make_batches(pairs, train_cfg, epoch, group_ids)):
            seq_q = [queries[i] for i in batch_idx]
            seq_r = [responses[i] for i in batch_idx]
            emb_q, tape_q = forward_train(model, seq_q, ForwardMode.TRAIN_STOCHASTIC,
                                          rng_seed=[train_cfg.dropout_seed, epoch, step, 0])
            emb_r, tape_r = forward_train(model, seq_r, ForwardMode.TRAIN_STOCHASTIC,
                                          rng_seed=[train_cfg.dropout_seed, epoch, step, 1])
            batch = TrainBatch(np.vstack([emb_q, emb_r]))
            loss_value, grads = batch_loss_and_grad(model, batch, loss_cfg, tape_q, tape_r)
            adam_step(model, grads, adam, train_cfg)
            losses.append(loss_value)
        epoch_losses.append(float(np.mean(losses)))
        ckpt = Checkpoint(model=model, adam=adam, epoch=epoch + 1, config_digest=train_cfg.digest())
        for hook in hooks or []:
            hook(ckpt, epoch_losses)
    return TrainResult(checkpoint=ckpt, epoch_losses=epoch_losses)


_ARRAY_ORDER = ["E", "W1", "b1", "W2", "b2"]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.model.config
    header_fields = [
        ("vocab_size", cfg.vocab_size),
        ("embed_dim", cfg.embed_dim),
        ("head_hidden", cfg.head_hidden),
        ("head_out", cfg.head_out),
        ("dropout_rate", repr(cfg.dropout_rate)),
        ("hash_seed", cfg.hash_seed),
        ("epoch", ckpt.epoch),
        ("adam_t", ckpt.adam.t),
        ("config_digest", ckpt.config_digest),
    ]
    arrays = [dict(ckpt.model.param_items())[n] for n in _ARRAY_ORDER]
    arrays += [ckpt.adam.m[n] for n in _ARRAY_ORDER]
    arrays += [ckpt.adam.v[n] for n in _ARRAY_ORDER]
    payload = b"".join(a.astype("<f4").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for key, value in header_fields:
            fh.write(f"{key}={value}\n".encode())
        fh.write(b"\n")
        fh.write(payload)
        fh.write(struct.pack("<Q", len(payload)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad magic: not a DSECKPT1 checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    sep = rest.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("truncated checkpoint: header not terminated")
    header: dict[str, str] = {}
    for line in rest[:sep].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    body = rest[sep + 2:]
    if len(body) < 8:
        raise CheckpointError("truncated checkpoint: missing footer")
    payload, footer = body[:-8], body[-8:]
    (expected_len,) = struct.unpack("<Q", footer)
    if len(payload) != expected_len:
        raise CheckpointError(
            f"truncated checkpoint: payload is {len(payload)} bytes, footer says {expected_len}"
        )

    try:
        cfg = EncoderConfig(
            vocab_size=int(header["vocab_size"]),
            embed_dim=int(header["embed_dim"]),
            head_hidden=int(header["head_hidden"]),
            head_out=int(header["head_out"]),
            dropout_rate=float(header["dropout_rate"]),
            hash_seed=int(header["hash_seed"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header missing field {exc}") from exc

    shapes = {
        "E": (cfg.vocab_size, cfg.embed_dim),
        "W1": (cfg.embed_dim, cfg.head_hidden),
        "b1": (cfg.head_hidden,),
        "W2": (cfg.head_hidden, cfg.head_out),
        "b2": (cfg.head_out,),
    }
    offset = 0
    groups: list[dict[str, np.ndarray]] = []
    for _ in range(3):  # params, adam m, adam v
        group = {}
        for name in _ARRAY_ORDER:
            shape = shapes[name]
            count = int(np.prod(shape))
            chunk = payload[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise CheckpointError("truncated checkpoint: array payload too short")
            group[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
            offset += 4 * count
        groups.append(group)
    if offset != len(payload):
        raise CheckpointError("checkpoint payload longer than expected")

    params, m, v = groups
    model = EncoderModel(config=cfg, E=params["E"], W1=params["W1"], b1=params["b1"],
                         W2=params["W2"], b2=params["b2"])
    adam = AdamState(m=m, v=v, t=int(header["adam_t"]))
    return Checkpoint(model=model, adam=adam, epoch=int(header["epoch"]),
                      config_digest=header.get("config_digest", ""))
