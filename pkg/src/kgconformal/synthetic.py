"""Synthetic knowledge graphs with an i.i.d. triple population.

A planted bilinear (diagonal) model defines a ground-truth distribution:
(head, relation) pairs are uniform and the tail is drawn from the softmax of
the planted scores. Draws are i.i.d., so calibration and test examples are
exchangeable, which is what the coverage guarantee assumes.
"""

from __future__ import annotations

import numpy as np

from .kg import KnowledgeGraph, Triple
from .validation import check_positive_int


def generate_synthetic_kg(
    n_entities: int,
    n_relations: int,
    dim: int = 64,
    n_train: int = 5000,
    n_valid: int = 1000,
    n_test: int = 2000,
    seed: int = 0,
    logit_sd: float = 1.0,
    n_clusters: int | None = None,
    cluster_noise: float = 0.1,
) -> KnowledgeGraph:
    """Sample train/valid/test splits from one planted triple distribution.

    Splits are drawn i.i.d. and then deduplicated across splits, keeping a
    duplicate in the earliest split it appeared in (duplicates within a
    split are retained).

    Without clusters, planted embeddings are dense Gaussians and `logit_sd`
    sets the spread of the planted score distribution. With `n_clusters`,
    entities sit near one-hot cluster indicators (jittered by
    `cluster_noise`) and relations carry per-cluster affinities around
    `logit_sd`, so a query's tail softmax concentrates on one whole cluster
    while the rest stays near-flat. That shape keeps every individual
    triple's probability small (cross-split deduplication then removes
    little mass and splits stay close to exchangeable) yet the cluster
    structure is learnable from few triples and leaves a heavy tail of
    hard, near-uniformly ranked answers.

    Deterministic given `seed`.
    """
    check_positive_int(n_entities, "n_entities")
    check_positive_int(n_relations, "n_relations")
    check_positive_int(dim, "dim")
    for name, value in (("n_train", n_train), ("n_valid", n_valid), ("n_test", n_test)):
        check_positive_int(value, name)

    rng = np.random.default_rng(seed)
    if n_clusters is None:
        # per-coordinate scale s with sqrt(dim) * s^3 ~= logit_sd
        scale = (logit_sd / np.sqrt(dim)) ** (1.0 / 3.0)
        ent = rng.normal(0.0, scale, size=(n_entities, dim))
        rel = rng.normal(0.0, scale, size=(n_relations, dim))
    else:
        check_positive_int(n_clusters, "n_clusters")
        assignment = rng.integers(0, n_clusters, size=n_entities)
        ent = np.zeros((n_entities, n_clusters))
        ent[np.arange(n_entities), assignment] = 1.0
        # a minority of entities straddle a second cluster; queries anchored
        # there spread their answer mass wider, giving a difficulty gradient.
        # Secondary weights stay below 0.5 so two straddlers meeting in both
        # clusters get no outsized multiplicative bonus.
        mixed = rng.random(n_entities) < 0.4
        secondary = rng.integers(0, n_clusters, size=n_entities)
        weights = rng.uniform(0.3, 0.5, size=n_entities)
        rows = np.flatnonzero(mixed & (secondary != assignment))
        ent[rows, secondary[rows]] = weights[rows]
        ent += cluster_noise * rng.standard_normal((n_entities, n_clusters))
        # same-cluster log-odds advantage; the per-(relation, cluster) spread
        # creates confident and diffuse queries side by side
        rel = logit_sd + rng.uniform(-1.0, 1.0, size=(n_relations, n_clusters))

    total = n_train + n_valid + n_test
    heads = rng.integers(0, n_entities, size=total)
    rels = rng.integers(0, n_relations, size=total)
    logits = (ent[heads] * rel[rels]) @ ent.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(total)
    tails = (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)

    draws = [Triple(int(h), int(r), int(t)) for h, r, t in zip(heads, rels, tails)]
    train = draws[:n_train]
    seen = set(train)
    valid = [tr for tr in draws[n_train : n_train + n_valid] if tr not in seen]
    seen |= set(valid)
    test = [tr for tr in draws[n_train + n_valid :] if tr not in seen]

    return KnowledgeGraph(
        entity_names=tuple(f"e{i}" for i in range(n_entities)),
        relation_names=tuple(f"r{i}" for i in range(n_relations)),
        train=tuple(train),
        valid=tuple(valid),
        test=tuple(test),
    )
