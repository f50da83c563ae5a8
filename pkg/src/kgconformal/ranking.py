"""Rank of a true answer within a (possibly filtered) candidate scoring."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .kg import FilterIndex, QueryExample
from .models import ModelParams, score_all
from .conformal import candidate_mask


def rank_from_scores(scores: np.ndarray, answer: int, mask: np.ndarray | None = None) -> float:
    """1-based rank of `answer` in descending score order among candidates.

    Ties share their mean rank, so the result may be half-integral. `mask`
    selects the candidates and must keep the answer itself.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cand = scores if mask is None else scores[mask]
    s_true = scores[answer]
    greater = int((cand > s_true).sum())
    ties_other = int((cand == s_true).sum()) - 1
    return 1.0 + greater + 0.5 * ties_other


def example_ranks(
    model: ModelParams,
    examples: Sequence[QueryExample],
    filter_index: FilterIndex | None = None,
) -> np.ndarray:
    """Filtered rank of each example's true answer (own answer kept)."""
    ranks = np.empty(len(examples), dtype=np.float64)
    for i, ex in enumerate(examples):
        scores = score_all(model, ex.query)
        mask = candidate_mask(filter_index, ex.query, model.n_entities, exempt_answer=ex.answer)
        ranks[i] = rank_from_scores(scores, ex.answer, mask)
    return ranks
