"""Nonconformity measures, calibration profiles, and conformal answer sets.

Membership uses the quantile threshold rule: an entity enters the answer set
when its nonconformity alpha satisfies alpha <= tau, where tau is the
ceil((n+1)(1-eps))-th smallest calibration score (ties counted as
greater-or-equal). This is exactly equivalent to the rank-counting inclusion
rule (|{i: alpha_i >= alpha}| + 1) / (n+1) > eps, with the quantile index
computed in exact rational arithmetic so float rounding never shifts it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import softmax as _softmax
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .kg import FilterIndex, Query, QueryExample
from .models import ModelParams, score_all
from .validation import check_epsilon, check_temperature


class NonconformityKind(Enum):
    NEGSCORE = "negscore"
    MINMAX = "minmax"
    SOFTMAX = "softmax"
    CALIBRATED_SOFTMAX = "calibrated_softmax"
    RANK = "rank"


def _as_kind(kind: NonconformityKind | str) -> NonconformityKind:
    return kind if isinstance(kind, NonconformityKind) else NonconformityKind(kind)


def nonconformity_from_scores(
    scores: np.ndarray, kind: NonconformityKind | str, temperature: float | None = None
) -> np.ndarray:
    """Nonconformity of every candidate given a query's full score vector.

    All normalizing measures (minmax, softmax, rank) use the full unfiltered
    vector; filtering only ever restricts set membership downstream.
    """
    kind = _as_kind(kind)
    scores = np.asarray(scores, dtype=np.float64)
    if kind is NonconformityKind.NEGSCORE:
        return -scores
    if kind is NonconformityKind.MINMAX:
        lo, hi = scores.min(), scores.max()
        if hi == lo:
            raise ValueError("degenerate score vector: min-max scaling undefined")
        return -((scores - lo) / (hi - lo))
    if kind is NonconformityKind.SOFTMAX:
        return 1.0 - _softmax(scores)
    if kind is NonconformityKind.CALIBRATED_SOFTMAX:
        if temperature is None:
            raise ValueError("calibrated_softmax requires a temperature")
        return 1.0 - _softmax(scores / check_temperature(temperature))
    if kind is NonconformityKind.RANK:
        # 1-based rank in descending score order, ties resolved to mean rank
        return rankdata(-scores, method="average")
    raise AssertionError(f"unhandled kind {kind}")


def nonconformity(
    model: ModelParams,
    query: Query,
    entity: int,
    kind: NonconformityKind | str,
    temperature: float | None = None,
) -> float:
    """Nonconformity of one (query, candidate) pair."""
    return float(nonconformity_from_scores(score_all(model, query), kind, temperature)[entity])


@dataclass(frozen=True)
class CalibrationProfile:
    """Sorted nonconformity scores of a calibration set under one measure."""

    kind: NonconformityKind
    scores: np.ndarray
    temperature: float | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise ValueError("calibration scores must be a nonempty 1-D array")
        if not np.isfinite(scores).all():
            raise ValueError("calibration scores must be finite")
        if np.any(np.diff(scores) < 0):
            scores = np.sort(scores)
        object.__setattr__(self, "scores", scores)
        if self.kind is NonconformityKind.CALIBRATED_SOFTMAX and self.temperature is None:
            raise ValueError("calibrated_softmax profile requires a temperature")

    @property
    def n_cal(self) -> int:
        return int(self.scores.size)

    def to_json_dict(self) -> dict:
        payload = {
            "kind": self.kind.value,
            "n_cal": self.n_cal,
            "scores": self.scores.tolist(),
        }
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        return payload

    @classmethod
    def from_json_dict(cls, payload: dict) -> "CalibrationProfile":
        profile = cls(
            kind=NonconformityKind(payload["kind"]),
            scores=np.asarray(payload["scores"], dtype=np.float64),
            temperature=payload.get("temperature"),
        )
        if payload.get("n_cal") is not None and payload["n_cal"] != profile.n_cal:
            raise ValueError("n_cal does not match the number of stored scores")
        return profile


def calibrate(
    model: ModelParams,
    examples: Sequence[QueryExample],
    kind: NonconformityKind | str,
    temperature: float | None = None,
) -> CalibrationProfile:
    """Nonconformity of each example's true answer, sorted ascending."""
    if not len(examples):
        raise ValueError("calibration requires at least one example")
    kind = _as_kind(kind)
    alphas = np.empty(len(examples), dtype=np.float64)
    for i, ex in enumerate(examples):
        try:
            vec = nonconformity_from_scores(score_all(model, ex.query), kind, temperature)
        except ValueError as err:
            raise ValueError(f"calibration example {i} ({ex.query}): {err}") from err
        alphas[i] = vec[ex.answer]
    return CalibrationProfile(kind=kind, scores=np.sort(alphas), temperature=temperature)


def quantile_index(count: int, epsilon: float) -> int:
    """ceil(count * (1 - epsilon)) in exact rational arithmetic.

    Float rounding of (1 - epsilon) would occasionally shift the ceiling by
    one; Fraction(epsilon) keeps the index exact for any float epsilon.
    """
    epsilon = check_epsilon(epsilon)
    return math.ceil(count * (1 - Fraction(epsilon)))


def threshold(profile: CalibrationProfile, epsilon: float) -> float:
    """Inclusion threshold tau; +inf when the quantile falls past the sample."""
    j = quantile_index(profile.n_cal + 1, epsilon)
    if j > profile.n_cal:
        return math.inf
    return float(profile.scores[j - 1])


@dataclass(frozen=True)
class AnswerSet:
    """Predicted entity set for one query.

    `epsilon` is None for predictors without an error-rate knob (fixed-size).
    """

    query: Query
    entities: np.ndarray
    epsilon: float | None
    filtered: bool

    def __post_init__(self):
        if self.epsilon is not None:
            check_epsilon(self.epsilon)
        object.__setattr__(
            self, "entities", np.sort(np.asarray(self.entities, dtype=np.int64))
        )

    @property
    def size(self) -> int:
        return int(self.entities.size)

    def __contains__(self, entity: int) -> bool:
        i = np.searchsorted(self.entities, entity)
        return bool(i < self.entities.size and self.entities[i] == entity)


def candidate_mask(
    filter_index: FilterIndex | None,
    query: Query,
    n_entities: int,
    exempt_answer: int | None = None,
) -> np.ndarray:
    """Candidates left after removing known-true answers (minus the exemption)."""
    if filter_index is None:
        return np.ones(n_entities, dtype=bool)
    return filter_index.candidate_mask(query, n_entities, keep=exempt_answer)


def predict_set(
    model: ModelParams,
    query: Query,
    profile: CalibrationProfile,
    epsilon: float,
    filter_index: FilterIndex | None = None,
    exempt_answer: int | None = None,
) -> AnswerSet:
    """Conformal answer set: candidates whose nonconformity is <= tau.

    Normalization always runs over the full unfiltered score vector;
    `filter_index` only removes known-true competitors from membership, and
    `exempt_answer` (the evaluation example's own answer) is never removed.
    """
    epsilon = check_epsilon(epsilon)
    scores = score_all(model, query)
    alphas = nonconformity_from_scores(scores, profile.kind, profile.temperature)
    include = alphas <= threshold(profile, epsilon)
    include &= candidate_mask(filter_index, query, model.n_entities, exempt_answer)
    return AnswerSet(
        query=query,
        entities=np.flatnonzero(include),
        epsilon=epsilon,
        filtered=filter_index is not None,
    )


class SetPredictor(BaseEstimator):
    """Base class for answer-set predictors with a fit/predict surface."""

    def fit(self, examples: Sequence[QueryExample] | None = None) -> "SetPredictor":
        return self

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        raise NotImplementedError

    def predict(self, queries: Sequence[Query]) -> list[AnswerSet]:
        return [self.predict_set(q) for q in queries]


class ConformalSetPredictor(SetPredictor):
    """Split-conformal set predictor over a trained embedding model.

    Parameters
    ----------
    model : ModelParams
        Trained (frozen) embedding model.
    kind : str or NonconformityKind
        Nonconformity measure.
    epsilon : float
        Tolerated miss probability.
    temperature : float, optional
        Softmax temperature, required for the calibrated_softmax measure.
    filter_index : FilterIndex, optional
        Known-true answers to exclude from predicted sets.

    After :meth:`fit`, ``profile_`` holds the sorted calibration scores.
    """

    def __init__(
        self,
        model: ModelParams,
        kind: str | NonconformityKind = "negscore",
        epsilon: float = 0.1,
        temperature: float | None = None,
        filter_index: FilterIndex | None = None,
    ):
        self.model = model
        self.kind = kind
        self.epsilon = epsilon
        self.temperature = temperature
        self.filter_index = filter_index

    def fit(self, examples: Sequence[QueryExample]) -> "ConformalSetPredictor":
        self.profile_ = calibrate(self.model, examples, self.kind, self.temperature)
        return self

    def predict_set(self, query: Query, exempt_answer: int | None = None) -> AnswerSet:
        if not hasattr(self, "profile_"):
            raise NotFittedError("call fit() with calibration examples first")
        return predict_set(
            self.model,
            query,
            self.profile_,
            self.epsilon,
            filter_index=self.filter_index,
            exempt_answer=exempt_answer,
        )
