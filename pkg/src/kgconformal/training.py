"""Stochastic training of embedding models and checkpoint persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kg import KnowledgeGraph, Triple
from .models import (
    ModelKind,
    ModelParams,
    batch_gradients,
    entity_width,
    init_model,
    relation_width,
    triple_scores,
    wrap_phases,
)

_LOSSES = ("margin_ranking", "cross_entropy")
_OPTIMIZERS = ("sgd", "adagrad")

# Max candidate-triple rows materialized at once by full-softmax batches.
_FULL_SOFTMAX_ROWS = 65536
_FULL_SOFTMAX_MAX_ENTITIES = 2000


class TrainingDivergenceError(RuntimeError):
    """Loss became NaN/Inf; carries the epoch and batch where it happened."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    loss: str = "cross_entropy"
    margin: float = 1.0
    negatives: int = 16
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 0.05
    optimizer: str = "adagrad"
    adagrad_eps: float = 1e-10
    l2_penalty: float = 1e-7
    seed: int = 0
    full_softmax: bool = False

    def validate(self) -> None:
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {_LOSSES}, got {self.loss!r}")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss == "margin_ranking" and not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")
        if self.adagrad_eps <= 0:
            raise ValueError("adagrad_eps must be > 0")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "margin": self.margin,
            "negatives": self.negatives,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "adagrad_eps": self.adagrad_eps,
            "l2_penalty": self.l2_penalty,
            "seed": self.seed,
            "full_softmax": self.full_softmax,
        }


def default_dim(kind: ModelKind) -> int:
    # d*d relation matrices make the bilinear-matrix family pricier per dim.
    return 32 if kind is ModelKind.RESCAL else 64


def _draw_replacements(
    originals: np.ndarray, shape: tuple[int, ...], rng: np.random.Generator, domain: np.ndarray
) -> np.ndarray:
    """Uniform draws from `domain` avoiding the per-row original (rejection resampling)."""
    if domain.size < 2:
        raise ValueError("need at least 2 candidate entities to corrupt a triple")
    draws = domain[rng.integers(0, domain.size, size=shape)]
    bad = draws == originals
    while bad.any():
        draws[bad] = domain[rng.integers(0, domain.size, size=int(bad.sum()))]
        bad = draws == originals
    return draws


def sample_negatives(
    triple: Triple,
    k: int,
    rng: np.random.Generator,
    n_entities: int | None = None,
    entities: np.ndarray | None = None,
) -> list[Triple]:
    """Corrupt one triple k times: per negative, a uniformly chosen side is
    replaced by a uniform entity different from the original on that side.

    The corruption pool is `entities` when given, else all ids below
    `n_entities`. Generated negatives may coincide with other true triples;
    no filtering is applied.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if entities is None:
        if n_entities is None:
            raise ValueError("pass n_entities or entities")
        if n_entities < 2:
            raise ValueError("need at least 2 entities to corrupt a triple")
        entities = np.arange(n_entities, dtype=np.int64)
    sides = rng.integers(0, 2, size=k)  # 0 -> corrupt head, 1 -> corrupt tail
    originals = np.where(sides == 0, triple.head, triple.tail)
    draws = _draw_replacements(originals, (k,), rng, np.asarray(entities, dtype=np.int64))
    out = []
    for side, e in zip(sides, draws):
        if side == 0:
            out.append(Triple(int(e), triple.relation, triple.tail))
        else:
            out.append(Triple(triple.head, triple.relation, int(e)))
    return out


@dataclass
class TrainResult:
    model: ModelParams
    loss_trace: list[float] = field(default_factory=list)


class _Optimizer:
    """Accumulate-then-apply updates restricted to the rows a batch touched."""

    def __init__(self, model: ModelParams, config: TrainConfig):
        self.model = model
        self.config = config
        self.adagrad = config.optimizer == "adagrad"
        if self.adagrad:
            self.acc_entity = np.zeros_like(model.entity_emb)
            self.acc_relation = np.zeros_like(model.relation_emb)

    def apply(self, grad_buf: np.ndarray, rows: np.ndarray, which: str) -> None:
        params = self.model.entity_emb if which == "entity" else self.model.relation_emb
        g = grad_buf[rows]
        lam = self.config.l2_penalty
        if lam > 0:
            g = g + 2.0 * lam * params[rows]
        eta = self.config.learning_rate
        if self.adagrad:
            acc = self.acc_entity if which == "entity" else self.acc_relation
            acc[rows] += g * g
            params[rows] -= eta * g / (np.sqrt(acc[rows]) + self.config.adagrad_eps)
        else:
            params[rows] -= eta * g
        if which == "relation" and self.model.kind is ModelKind.ROTATE:
            params[rows] = wrap_phases(params[rows])


def train(
    kg: KnowledgeGraph,
    kind: ModelKind | str,
    config: TrainConfig,
    dim: int | None = None,
    norm_p: int = 1,
) -> TrainResult:
    """Fit embeddings on the training split by mini-batch gradient descent.

    Deterministic given `config.seed`: initialization, per-epoch shuffling,
    and negative sampling run on independent seed-derived streams. Only rows
    of entities/relations occurring in training triples are ever updated.
    """
    config.validate()
    kind = ModelKind(kind) if not isinstance(kind, ModelKind) else kind
    if not kg.train:
        raise ValueError("training split is empty")
    if dim is None:
        dim = default_dim(kind)
    if config.full_softmax and kg.n_entities > _FULL_SOFTMAX_MAX_ENTITIES:
        raise ValueError(f"full_softmax is limited to <= {_FULL_SOFTMAX_MAX_ENTITIES} entities")

    init_ss, shuffle_ss, neg_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = init_model(kind, dim, kg.n_entities, kg.n_relations, seed=init_ss, norm_p=norm_p)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    neg_rng = np.random.default_rng(neg_ss)

    heads = np.array([tr.head for tr in kg.train], dtype=np.int64)
    rels = np.array([tr.relation for tr in kg.train], dtype=np.int64)
    tails = np.array([tr.tail for tr in kg.train], dtype=np.int64)
    domain = kg.training_entities()
    if domain.size < 2:
        raise ValueError("need at least 2 training entities for negative sampling")

    n = heads.size
    grad_ent = np.zeros_like(model.entity_emb)
    grad_rel = np.zeros_like(model.relation_emb)
    opt = _Optimizer(model, config)
    loss_trace: list[float] = []

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        weight_sum = 0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            bh, br, bt = heads[idx], rels[idx], tails[idx]
            if config.loss == "margin_ranking":
                loss, weight, ent_rows, rel_rows = _margin_batch(
                    model, config, bh, br, bt, neg_rng, domain, grad_ent, grad_rel
                )
            else:
                loss, weight, ent_rows, rel_rows = _cross_entropy_batch(
                    model, config, bh, br, bt, neg_rng, domain, grad_ent, grad_rel
                )
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch, batch_index, float(loss))
            loss_sum += loss * weight
            weight_sum += weight
            opt.apply(grad_ent, ent_rows, "entity")
            opt.apply(grad_rel, rel_rows, "relation")
            grad_ent[ent_rows] = 0.0
            grad_rel[rel_rows] = 0.0
        loss_trace.append(loss_sum / weight_sum)
    return TrainResult(model, loss_trace)


def _margin_batch(model, config, bh, br, bt, rng, domain, grad_ent, grad_rel):
    """Pairwise hinge: mean over (positive, negative) pairs of max(0, margin - s_pos + s_neg)."""
    b, k = bh.size, config.negatives
    sides = rng.integers(0, 2, size=(b, k))
    originals = np.where(sides == 0, bh[:, None], bt[:, None])
    draws = _draw_replacements(originals, (b, k), rng, domain)
    neg_h = np.where(sides == 0, draws, bh[:, None])
    neg_t = np.where(sides == 1, draws, bt[:, None])
    neg_r = np.broadcast_to(br[:, None], (b, k))

    s_pos = triple_scores(model, bh, br, bt)
    s_neg = triple_scores(model, neg_h.ravel(), neg_r.ravel(), neg_t.ravel()).reshape(b, k)
    slack = config.margin - s_pos[:, None] + s_neg
    active = slack > 0.0
    loss = float(np.where(active, slack, 0.0).mean())

    scale = 1.0 / (b * k)
    pos_coef = -active.sum(axis=1) * scale
    dh, dr, dt = batch_gradients(model, bh, br, bt)
    np.add.at(grad_ent, bh, dh * pos_coef[:, None])
    np.add.at(grad_ent, bt, dt * pos_coef[:, None])
    np.add.at(grad_rel, br, dr * pos_coef[:, None])

    neg_coef = active.astype(np.float64).ravel() * scale
    dh, dr, dt = batch_gradients(model, neg_h.ravel(), neg_r.ravel(), neg_t.ravel())
    np.add.at(grad_ent, neg_h.ravel(), dh * neg_coef[:, None])
    np.add.at(grad_ent, neg_t.ravel(), dt * neg_coef[:, None])
    np.add.at(grad_rel, neg_r.ravel(), dr * neg_coef[:, None])

    ent_rows = np.unique(np.concatenate([bh, bt, neg_h.ravel(), neg_t.ravel()]))
    return loss, b * k, ent_rows, np.unique(br)


def _cross_entropy_batch(model, config, bh, br, bt, rng, domain, grad_ent, grad_rel):
    """Softmax loss over the true answer plus corruptions of the queried slot.

    Per positive, a uniformly drawn direction picks which slot is queried;
    candidates are either k sampled corruptions or (full_softmax) the whole
    training-entity pool.
    """
    b = bh.size
    dirs = rng.integers(0, 2, size=b)  # 0 -> tail query, 1 -> head query
    answers = np.where(dirs == 0, bt, bh)
    if config.full_softmax:
        cands = np.broadcast_to(domain, (b, domain.size))
        true_col = np.searchsorted(domain, answers)
    else:
        draws = _draw_replacements(answers[:, None], (b, config.negatives), rng, domain)
        cands = np.concatenate([answers[:, None], draws], axis=1)
        true_col = np.zeros(b, dtype=np.int64)

    m = cands.shape[1]
    cand_h = np.where(dirs[:, None] == 0, bh[:, None], cands)
    cand_t = np.where(dirs[:, None] == 0, cands, bt[:, None])
    cand_r = np.broadcast_to(br[:, None], (b, m))

    scores = triple_scores(model, cand_h.ravel(), cand_r.ravel(), cand_t.ravel()).reshape(b, m)
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    log_probs = shifted - np.log(denom)[:, None]
    loss = float(-log_probs[np.arange(b), true_col].mean())

    dlogits = expd / denom[:, None]
    dlogits[np.arange(b), true_col] -= 1.0
    dlogits /= b

    rows = b * m
    for start in range(0, rows, _FULL_SOFTMAX_ROWS):
        stop = min(start + _FULL_SOFTMAX_ROWS, rows)
        fh = cand_h.ravel()[start:stop]
        fr = cand_r.ravel()[start:stop]
        ft = cand_t.ravel()[start:stop]
        coef = dlogits.ravel()[start:stop][:, None]
        dh, dr, dt = batch_gradients(model, fh, fr, ft)
        np.add.at(grad_ent, fh, dh * coef)
        np.add.at(grad_ent, ft, dt * coef)
        np.add.at(grad_rel, fr, dr * coef)

    ent_rows = np.unique(np.concatenate([cand_h.ravel(), cand_t.ravel()]))
    return loss, b, ent_rows, np.unique(br)


# --- checkpoint I/O ---------------------------------------------------------

CHECKPOINT_MAGIC = b"CKGE"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4s4I2Q")
_KIND_CODES = {
    ModelKind.TRANSE: 1,
    ModelKind.ROTATE: 2,
    ModelKind.RESCAL: 3,
    ModelKind.DISTMULT: 4,
    ModelKind.COMPLEX: 5,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    model: ModelParams
    meta: dict


def save_checkpoint(model: ModelParams, meta: dict, path: str | Path) -> None:
    """Write a model plus JSON metadata; loading reproduces arrays bitwise.

    Layout: magic, u32 version, header (kind, norm, dim, |E|, |R|), raw
    little-endian f64 arrays, then length-prefixed JSON metadata.
    """
    model.validate()
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        _KIND_CODES[model.kind],
        model.norm_p,
        model.dim,
        model.n_entities,
        model.n_relations,
    )
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model.entity_emb.astype("<f8", copy=False).tobytes())
        fh.write(model.relation_emb.astype("<f8", copy=False).tobytes())
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic, version, kind_code, norm_p, dim, n_ent, n_rel = _HEADER.unpack(
            _read_exact(fh, _HEADER.size, "header")
        )
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        if kind_code not in _CODE_KINDS:
            raise CheckpointError(f"unknown model kind code {kind_code}")
        kind = _CODE_KINDS[kind_code]
        w = entity_width(kind, dim)
        v = relation_width(kind, dim)
        ent = np.frombuffer(_read_exact(fh, 8 * n_ent * w, "entity embeddings"), dtype="<f8")
        rel = np.frombuffer(_read_exact(fh, 8 * n_rel * v, "relation embeddings"), dtype="<f8")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta_bytes = _read_exact(fh, meta_len, "metadata")
        if fh.read(1):
            raise CheckpointError("unexpected trailing data after metadata")
    model = ModelParams(
        kind,
        dim,
        ent.reshape(n_ent, w).copy(),
        rel.reshape(n_rel, v).copy(),
        norm_p=norm_p,
    )
    model.validate()
    return Checkpoint(version=version, model=model, meta=json.loads(meta_bytes.decode("utf-8")))
