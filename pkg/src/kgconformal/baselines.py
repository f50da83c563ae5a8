"""Non-conformal set predictors: naive accumulation, Platt scaling, top-K."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.exceptions import NotFittedError

from .conformal import AnswerSet, SetPredictor, candidate_mask, quantile_index
from .kg import FilterIndex, Query, QueryExample
from .models import ModelParams, score_all
from .ranking import example_ranks
from .validation import check_epsilon, check_positive_int, check_temperature

# Running probability sums closer than this to the 1-eps boundary are
# re-decided in exact arithmetic (float cumsum error is ~1e-13 at worst).
_BOUNDARY_BAND = 1e-9


@dataclass(frozen=True)
class Temperature:
    """Fitted softmax temperature and the objective value it achieved."""

    value: float
    fit_nll: float

    def __post_init__(self):
        check_temperature(self.value)


@dataclass(frozen=True)
class TopKChoice:
    """Set size fitted so top-K covers 1-eps of the validation answers."""

    k: int
    validation_coverage: float


def prefix_include_count(ordered_probs: np.ndarray, epsilon: float) -> int:
    """How many leading candidates keep the running mass strictly below 1-eps.

    The running sum is checked after each addition, so the candidate that
    reaches the boundary is excluded. Sums landing within float noise of the
    boundary are re-evaluated in exact rational arithmetic; the uniform-score
    case sits exactly on the boundary and would otherwise flip on rounding.
    """
    csum = np.cumsum(ordered_probs)
    target = 1.0 - epsilon
    include = csum < target
    ambiguous = np.abs(csum - target) <= _BOUNDARY_BAND
    if ambiguous.any():
        exact_target = 1 - Fraction(epsilon)
        acc = Fraction(0)
        for i in range(int(np.flatnonzero(ambiguous).max()) + 1):
            acc += Fraction(float(ordered_probs[i]))
            if ambiguous[i]:
                include[i] = acc < exact_target
    return int(include.sum())


def predict_set_naive(
    model: ModelParams,
    query: Query,
    epsilon: float,
    temperature: float = 1.0,
    filter_index: FilterIndex | None = None,
    exempt_answer: int | None = None,
) -> AnswerSet:
    """Accumulate softmax mass over candidates from most to least probable.

    A candidate enters the set only while the post-addition running mass is
    still strictly below 1-eps, so the boundary entity is excluded. Softmax
    normalizes over the full unfiltered vector; probability ties are broken
    by ascending entity id.
    """
    epsilon = check_epsilon(epsilon)
    probs = softmax(score_all(model, query) / check_temperature(temperature))
    mask = candidate_mask(filter_index, query, model.n_entities, exempt_answer)
    cand = np.flatnonzero(mask)
    ordered = cand[np.argsort(-probs[cand], kind="stable")]
    count = prefix_include_count(probs[ordered], epsilon)
    return AnswerSet(
        query=query,
        entities=ordered[:count],
        epsilon=epsilon,
        filtered=filter_index is not None,
    )


def fit_temperature_from_scores(score_matrix: np.ndarray, answers: np.ndarray) -> Temperature:
    """Golden-section search for the temperature minimizing mean softmax NLL.

    Searches log10(T) on [-2, 2] for 40 iterations; when scaling cannot beat
    T=1 (e.g. a flat objective), T=1 is returned.
    """
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    answers = np.asarray(answers, dtype=np.int64)
    rows = np.arange(score_matrix.shape[0])

    def nll(log10_t: float) -> float:
        z = score_matrix / (10.0**log10_t)
        return float(np.mean(logsumexp(z, axis=1) - z[rows, answers]))

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = -2.0, 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = nll(c), nll(d)
    for _ in range(40):
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = nll(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = nll(d)
    log10_best = (lo + hi) / 2.0
    best_nll = nll(log10_best)
    unit_nll = nll(0.0)
    if unit_nll <= best_nll:
        return Temperature(1.0, unit_nll)
    return Temperature(10.0**log10_best, best_nll)


def fit_temperature(model: ModelParams, validation: Sequence[QueryExample]) -> Temperature:
    """Fit a softmax temperature on validation examples by NLL minimization."""
    if not len(validation):
        raise ValueError("temperature fitting requires at least one example")
    scores = np.stack([score_all(model, ex.query) for ex in validation])
    answers = np.array([ex.answer for ex in validation])
    return fit_temperature_from_scores(scores, answers)


def select_topk_from_ranks(ranks: np.ndarray, epsilon: float) -> TopKChoice:
    """Smallest K whose top-K sets cover at least 1-eps of the given ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    j = quantile_index(ranks.size, epsilon)
    k = max(1, math.ceil(float(np.sort(ranks)[j - 1])))
    return TopKChoice(k=int(k), validation_coverage=float((ranks <= k).mean()))


def select_topk(
    model: ModelParams,
    validation: Sequence[QueryExample],
    epsilon: float,
    filter_index: FilterIndex | None = None,
) -> TopKChoice:
    """Fit K from the filtered ranks of the validation true answers."""
    if not len(validation):
        raise ValueError("top-K selection requires at least one example")
    check_epsilon(epsilon)
    return select_topk_from_ranks(example_ranks(model, validation, filter_index), epsilon)


def predict_set_topk(
    model: ModelParams,
    query: Query,
    k: int,
    filter_index: FilterIndex | None = None,
    exempt_answer: int | None = None,
    epsilon: float | None = None,
) -> AnswerSet:
    """The K highest-scoring candidates after filtering (ties by ascending id)."""
    k = check_positive_int(k, "k")
    scores = score_all(model, query)
    mask = candidate_mask(filter_index, query, model.n_entities, exempt_answer)
    cand = np.flatnonzero(mask)
    ordered = cand[np.argsort(-scores[cand], kind="stable")]
    return AnswerSet(
        query=query,
        entities=ordered[: min(k, ordered.size)],
        epsilon=epsilon,
        filtered=filter_index is not None,
    )


def predict_set_fixed(
    model: ModelParams,
    query: Query,
    k: int,
    filter_index: FilterIndex | None = None,
    exempt_answer: int | None = None,
) -> AnswerSet:
    """Fixed-size variant of the top-K set (K chosen manually, e.g. 1/3/10/100)."""
    return predict_set_topk(model, query, k, filter_index, exempt_answer, epsilon=None)


class NaiveSetPredictor(SetPredictor):
    """Stateless probability-accumulation predictor (no calibration step)."""

    def __init__(
        self,
        model: ModelParams,
        epsilon: float = 0.1,
        temperature: float = 1.0,
        filter_index: FilterIndex | None = None,
    ):
        self.model = model
        self.epsilon = epsilon
        self.temperature = temperature
        self.filter_index = filter_index

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        return predict_set_naive(
            self.model,
            query,
            self.epsilon,
            temperature=self.temperature,
            filter_index=self.filter_index,
            exempt_answer=exempt_answer,
        )


class PlattSetPredictor(SetPredictor):
    """Naive predictor with a temperature fitted on validation examples."""

    def __init__(
        self,
        model: ModelParams,
        epsilon: float = 0.1,
        filter_index: FilterIndex | None = None,
    ):
        self.model = model
        self.epsilon = epsilon
        self.filter_index = filter_index

    def fit(self, examples: Sequence[QueryExample]) -> "PlattSetPredictor":
        self.temperature_ = fit_temperature(self.model, examples)
        return self

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        if not hasattr(self, "temperature_"):
            raise NotFittedError("call fit() with validation examples first")
        return predict_set_naive(
            self.model,
            query,
            self.epsilon,
            temperature=self.temperature_.value,
            filter_index=self.filter_index,
            exempt_answer=exempt_answer,
        )


class TopKSetPredictor(SetPredictor):
    """Top-K predictor with K fitted to reach 1-eps validation coverage."""

    def __init__(
        self,
        model: ModelParams,
        epsilon: float = 0.1,
        filter_index: FilterIndex | None = None,
    ):
        self.model = model
        self.epsilon = epsilon
        self.filter_index = filter_index

    def fit(self, examples: Sequence[QueryExample]) -> "TopKSetPredictor":
        self.choice_ = select_topk(self.model, examples, self.epsilon, self.filter_index)
        return self

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        if not hasattr(self, "choice_"):
            raise NotFittedError("call fit() with validation examples first")
        return predict_set_topk(
            self.model,
            query,
            self.choice_.k,
            filter_index=self.filter_index,
            exempt_answer=exempt_answer,
            epsilon=self.epsilon,
        )


class FixedSizeSetPredictor(SetPredictor):
    """Always returns the top `k` candidates, regardless of error rate."""

    def __init__(self, model: ModelParams, k: int = 10, filter_index: FilterIndex | None = None):
        self.model = model
        self.k = k
        self.filter_index = filter_index

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        return predict_set_fixed(
            self.model, query, self.k, filter_index=self.filter_index, exempt_answer=exempt_answer
        )
