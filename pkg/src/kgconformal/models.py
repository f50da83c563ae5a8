"""Shallow embedding models: five scoring families with analytic gradients.

All scoring runs through one vectorized kernel per family, evaluated with a
fixed floating-point expression tree. Scoring a single triple is the
single-row case of the batched kernel, so batched and per-triple paths agree
bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .kg import Direction, Query, Triple

# Entity rows processed per block when scoring against all entities; bounds
# the (block, dim, dim) temporary used by the bilinear family.
_SCORE_BLOCK = 2048


class ModelKind(Enum):
    TRANSE = "transe"
    ROTATE = "rotate"
    RESCAL = "rescal"
    DISTMULT = "distmult"
    COMPLEX = "complex"


# Complex-valued embeddings are stored as interleaved (real, imag) pairs.
_COMPLEX_KINDS = (ModelKind.ROTATE, ModelKind.COMPLEX)


def entity_width(kind: ModelKind, dim: int) -> int:
    return 2 * dim if kind in _COMPLEX_KINDS else dim


def relation_width(kind: ModelKind, dim: int) -> int:
    if kind is ModelKind.RESCAL:
        return dim * dim
    if kind is ModelKind.COMPLEX:
        return 2 * dim
    return dim  # TransE/DistMult vectors; RotatE phases


@dataclass
class ModelParams:
    """Embedding tensors for one scoring family.

    `norm_p` selects the distance norm (1 or 2) for the translation and
    rotation families; it is ignored by the bilinear families.
    """

    kind: ModelKind
    dim: int
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    norm_p: int = 1

    @property
    def n_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_emb.shape[0]

    def validate(self) -> None:
        if self.norm_p not in (1, 2):
            raise ValueError(f"norm_p must be 1 or 2, got {self.norm_p}")
        expected = (entity_width(self.kind, self.dim), relation_width(self.kind, self.dim))
        got = (self.entity_emb.shape[1], self.relation_emb.shape[1])
        if expected != got:
            raise ValueError(f"embedding widths {got} do not match {self.kind.value}/d={self.dim} ({expected})")
        if not (np.isfinite(self.entity_emb).all() and np.isfinite(self.relation_emb).all()):
            raise ValueError("non-finite embedding values")
        if self.kind is ModelKind.ROTATE:
            phases = self.relation_emb
            if phases.size and (phases.min() <= -np.pi or phases.max() > np.pi):
                raise ValueError("rotation phases outside (-pi, pi]")


def init_model(
    kind: ModelKind | str,
    dim: int,
    n_entities: int,
    n_relations: int,
    seed: int,
    norm_p: int = 1,
) -> ModelParams:
    """Draw fresh embeddings, uniform in [-6/sqrt(d), 6/sqrt(d)] (phases in (-pi, pi]).

    Deterministic given `seed`.
    """
    kind = ModelKind(kind) if not isinstance(kind, ModelKind) else kind
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n_entities < 1 or n_relations < 1:
        raise ValueError("need at least one entity and one relation")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, size=(n_entities, entity_width(kind, dim)))
    if kind is ModelKind.ROTATE:
        # pi - 2*pi*u with u in [0, 1) lands exactly in (-pi, pi].
        rel = np.pi - 2.0 * np.pi * rng.random(size=(n_relations, dim))
    else:
        rel = rng.uniform(-bound, bound, size=(n_relations, relation_width(kind, dim)))
    params = ModelParams(kind, dim, ent, rel, norm_p=norm_p)
    params.validate()
    return params


def wrap_phases(phases: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi] (2*pi-periodic, score-preserving)."""
    wrapped = np.mod(phases, 2.0 * np.pi)
    return np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)


def _re(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2]


def _im(x: np.ndarray) -> np.ndarray:
    return x[..., 1::2]


def _pair_scores(model: ModelParams, heads: np.ndarray, rel: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Score head/tail row pairs (broadcastable 2-D blocks) under one relation row."""
    kind = model.kind
    if kind is ModelKind.TRANSE:
        u = (heads + rel) - tails
        if model.norm_p == 1:
            return -np.abs(u).sum(axis=1)
        return -np.sqrt((u * u).sum(axis=1))
    if kind is ModelKind.ROTATE:
        c, s = np.cos(rel), np.sin(rel)
        h_re, h_im = _re(heads), _im(heads)
        u_re = (h_re * c - h_im * s) - _re(tails)
        u_im = (h_re * s + h_im * c) - _im(tails)
        sq = u_re * u_re + u_im * u_im
        if model.norm_p == 1:
            return -np.sqrt(sq).sum(axis=1)
        return -np.sqrt(sq.sum(axis=1))
    if kind is ModelKind.RESCAL:
        m = rel.reshape(model.dim, model.dim)
        return ((heads[:, :, None] * tails[:, None, :]) * m).sum(axis=(1, 2))
    if kind is ModelKind.DISTMULT:
        # (h * t) first keeps the value bitwise symmetric in head and tail.
        return ((heads * tails) * rel).sum(axis=1)
    if kind is ModelKind.COMPLEX:
        h_re, h_im = _re(heads), _im(heads)
        r_re, r_im = _re(rel), _im(rel)
        a = h_re * r_re - h_im * r_im
        b = h_re * r_im + h_im * r_re
        return (a * _re(tails) + b * _im(tails)).sum(axis=1)
    raise AssertionError(f"unhandled kind {kind}")


def score(model: ModelParams, triple: Triple) -> float:
    """Plausibility score of one triple."""
    ent = model.entity_emb
    rel = model.relation_emb[triple.relation]
    return float(
        _pair_scores(model, ent[triple.head : triple.head + 1], rel, ent[triple.tail : triple.tail + 1])[0]
    )


def triple_scores(
    model: ModelParams, heads: np.ndarray, relations: np.ndarray, tails: np.ndarray
) -> np.ndarray:
    """Scores for parallel triple id arrays, grouped by relation for the kernel."""
    heads = np.asarray(heads, dtype=np.int64)
    relations = np.asarray(relations, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    out = np.empty(heads.shape[0], dtype=np.float64)
    ent = model.entity_emb
    for rel_id in np.unique(relations):
        sel = relations == rel_id
        out[sel] = _pair_scores(model, ent[heads[sel]], model.relation_emb[rel_id], ent[tails[sel]])
    return out


def score_all(model: ModelParams, query: Query) -> np.ndarray:
    """Scores of materialize(query, e) for every entity e, as one length-|E| vector.

    Equals |E| independent `score` calls bitwise.
    """
    ent = model.entity_emb
    rel = model.relation_emb[query.relation]
    anchor = ent[query.anchor : query.anchor + 1]
    n = ent.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, _SCORE_BLOCK):
        block = ent[start : start + _SCORE_BLOCK]
        if query.direction is Direction.TAIL:
            out[start : start + _SCORE_BLOCK] = _pair_scores(model, anchor, rel, block)
        else:
            out[start : start + _SCORE_BLOCK] = _pair_scores(model, block, rel, anchor)
    return out


@dataclass
class TripleGradient:
    """Partials of the score w.r.t. the three embedding rows of one triple.

    Blocks are reported per slot; when head == tail the caller accumulates
    both entity blocks into the same row.
    """

    d_head: np.ndarray
    d_relation: np.ndarray
    d_tail: np.ndarray


def batch_gradients(
    model: ModelParams, heads: np.ndarray, relations: np.ndarray, tails: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score gradients for m triples given as parallel id arrays.

    Returns (d_head, d_relation, d_tail) with shapes (m, entity_width),
    (m, relation_width), (m, entity_width). L1 kinks use the sign(0)=0
    subgradient; zero-distance L2 points get a zero gradient.
    """
    kind = model.kind
    h = model.entity_emb[heads]
    t = model.entity_emb[tails]
    r = model.relation_emb[relations]
    if kind is ModelKind.TRANSE:
        u = (h + r) - t
        if model.norm_p == 1:
            g = np.sign(u)
        else:
            nrm = np.sqrt((u * u).sum(axis=1, keepdims=True))
            with np.errstate(invalid="ignore", divide="ignore"):
                g = np.where(nrm > 0.0, u / nrm, 0.0)
        return -g, -g, g.copy()
    if kind is ModelKind.ROTATE:
        c, s = np.cos(r), np.sin(r)
        h_re, h_im = _re(h), _im(h)
        w_re = h_re * c - h_im * s
        w_im = h_re * s + h_im * c
        u_re = w_re - _re(t)
        u_im = w_im - _im(t)
        sq = u_re * u_re + u_im * u_im
        if model.norm_p == 1:
            mod = np.sqrt(sq)
        else:
            mod = np.sqrt(sq.sum(axis=1, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            inv = np.where(mod > 0.0, 1.0 / mod, 0.0)
        a = u_re * inv
        b = u_im * inv
        d_head = np.empty_like(h)
        d_head[:, 0::2] = -(a * c + b * s)
        d_head[:, 1::2] = a * s - b * c
        d_rel = a * w_im - b * w_re
        d_tail = np.empty_like(t)
        d_tail[:, 0::2] = a
        d_tail[:, 1::2] = b
        return d_head, d_rel, d_tail
    if kind is ModelKind.RESCAL:
        d = model.dim
        m = r.reshape(-1, d, d)
        d_head = np.einsum("mjk,mk->mj", m, t)
        d_tail = np.einsum("mj,mjk->mk", h, m)
        d_rel = (h[:, :, None] * t[:, None, :]).reshape(-1, d * d)
        return d_head, d_rel, d_tail
    if kind is ModelKind.DISTMULT:
        return t * r, h * t, h * r
    if kind is ModelKind.COMPLEX:
        h_re, h_im = _re(h), _im(h)
        r_re, r_im = _re(r), _im(r)
        t_re, t_im = _re(t), _im(t)
        d_head = np.empty_like(h)
        d_head[:, 0::2] = r_re * t_re + r_im * t_im
        d_head[:, 1::2] = r_re * t_im - r_im * t_re
        d_rel = np.empty_like(r)
        d_rel[:, 0::2] = h_re * t_re + h_im * t_im
        d_rel[:, 1::2] = h_re * t_im - h_im * t_re
        d_tail = np.empty_like(t)
        d_tail[:, 0::2] = h_re * r_re - h_im * r_im
        d_tail[:, 1::2] = h_re * r_im + h_im * r_re
        return d_head, d_rel, d_tail
    raise AssertionError(f"unhandled kind {kind}")


def grad(model: ModelParams, triple: Triple) -> TripleGradient:
    """Analytic score gradient of a single triple."""
    idx = np.array([triple.head]), np.array([triple.relation]), np.array([triple.tail])
    d_head, d_rel, d_tail = batch_gradients(model, *idx)
    return TripleGradient(d_head[0], d_rel[0], d_tail[0])
