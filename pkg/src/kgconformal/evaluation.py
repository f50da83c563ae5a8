"""Coverage/size evaluation, adaptiveness stratification, sweeps, and reports.

Repeated-trial protocols run on precomputed score matrices: score vectors,
nonconformity matrices, and ranks of a fixed (model, example set) pair are
computed once and shared across trials, predictors, and error rates. Custom
predictor objects fall back to a per-query path through `predict_set`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import softmax
from sklearn.base import clone

from .baselines import (
    FixedSizeSetPredictor,
    NaiveSetPredictor,
    PlattSetPredictor,
    TopKSetPredictor,
    prefix_include_count,
    fit_temperature_from_scores,
    select_topk_from_ranks,
)
from .conformal import (
    CalibrationProfile,
    ConformalSetPredictor,
    NonconformityKind,
    SetPredictor,
    nonconformity_from_scores,
    threshold,
)
from .kg import FilterIndex, QueryExample
from .models import ModelParams, score_all
from .ranking import rank_from_scores
from .validation import check_epsilon, check_positive_int

_FAMILIES = ("conformal", "naive", "platt", "topk", "fixed")


@dataclass(frozen=True)
class PredictorSpec:
    """Declarative description of one set predictor.

    family: conformal | naive | platt | topk | fixed
    kind:   nonconformity measure (conformal only)
    k:      set size (fixed only)
    """

    family: str
    kind: str | None = None
    k: int | None = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        if self.family == "conformal":
            if self.kind is None:
                raise ValueError("conformal predictor spec needs a kind")
            NonconformityKind(self.kind)
        elif self.kind is not None:
            raise ValueError(f"kind is only valid for conformal specs, got family {self.family!r}")
        if self.family == "fixed":
            if self.k is None or self.k < 1:
                raise ValueError("fixed predictor spec needs k >= 1")
        elif self.k is not None:
            raise ValueError(f"k is only valid for fixed specs, got family {self.family!r}")

    @property
    def name(self) -> str:
        if self.family == "conformal":
            return self.kind
        if self.family == "fixed":
            return f"top{self.k}"
        return self.family

    @classmethod
    def from_dict(cls, payload: dict) -> "PredictorSpec":
        unknown = set(payload) - {"family", "kind", "k"}
        if unknown:
            raise ValueError(f"unknown predictor spec fields: {sorted(unknown)}")
        return cls(payload.get("family", ""), payload.get("kind"), payload.get("k"))


def build_predictor(
    spec: PredictorSpec,
    model: ModelParams,
    epsilon: float,
    filter_index: FilterIndex | None = None,
    temperature: float | None = None,
) -> SetPredictor:
    """Instantiate the (unfitted) predictor described by a spec."""
    if spec.family == "conformal":
        return ConformalSetPredictor(
            model,
            kind=spec.kind,
            epsilon=epsilon,
            temperature=temperature,
            filter_index=filter_index,
        )
    if spec.family == "naive":
        return NaiveSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
    if spec.family == "platt":
        return PlattSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
    if spec.family == "topk":
        return TopKSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
    return FixedSizeSetPredictor(model, k=spec.k, filter_index=filter_index)


class ExampleCache:
    """Precomputed per-example score vectors, candidate masks, and ranks."""

    def __init__(
        self,
        model: ModelParams,
        examples: Sequence[QueryExample],
        filter_index: FilterIndex | None = None,
    ):
        self.model = model
        self.examples = list(examples)
        self.filter_index = filter_index
        n, n_ent = len(self.examples), model.n_entities
        self.answers = np.array([ex.answer for ex in self.examples], dtype=np.int64)
        self.scores = np.empty((n, n_ent), dtype=np.float64)
        self.masks = np.empty((n, n_ent), dtype=bool)
        for i, ex in enumerate(self.examples):
            self.scores[i] = score_all(model, ex.query)
            if filter_index is None:
                self.masks[i] = True
            else:
                self.masks[i] = filter_index.candidate_mask(ex.query, n_ent, keep=ex.answer)
        self._alphas: dict[tuple, np.ndarray] = {}
        self._ranks: np.ndarray | None = None
        self._topk_positions: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)

    def alphas(self, kind: NonconformityKind | str, temperature: float | None = None) -> np.ndarray:
        kind = NonconformityKind(kind) if isinstance(kind, str) else kind
        key = (kind, temperature)
        if key not in self._alphas:
            out = np.empty_like(self.scores)
            for i in range(self.scores.shape[0]):
                out[i] = nonconformity_from_scores(self.scores[i], kind, temperature)
            self._alphas[key] = out
        return self._alphas[key]

    def alpha_true(self, kind, temperature: float | None = None) -> np.ndarray:
        a = self.alphas(kind, temperature)
        return a[np.arange(a.shape[0]), self.answers]

    def ranks(self) -> np.ndarray:
        """Filtered mean-tie rank of every true answer."""
        if self._ranks is None:
            self._ranks = np.array(
                [
                    rank_from_scores(self.scores[i], int(self.answers[i]), self.masks[i])
                    for i in range(len(self.examples))
                ]
            )
        return self._ranks

    def topk_positions(self) -> np.ndarray:
        """0-based position of each true answer in the (-score, id) candidate order."""
        if self._topk_positions is None:
            pos = np.empty(len(self.examples), dtype=np.int64)
            ids = np.arange(self.model.n_entities)
            for i in range(len(self.examples)):
                s, m, a = self.scores[i], self.masks[i], int(self.answers[i])
                s_true = s[a]
                pos[i] = ((s > s_true) & m).sum() + ((s == s_true) & m & (ids < a)).sum()
            self._topk_positions = pos
        return self._topk_positions

    def candidate_counts(self) -> np.ndarray:
        return self.masks.sum(axis=1)


@dataclass(frozen=True)
class RankingMetrics:
    mr: float
    hits: dict[int, float]


def ranking_metrics(
    model: ModelParams,
    test: Sequence[QueryExample],
    filter_index: FilterIndex | None = None,
    ks: Sequence[int] = (1, 3, 10, 100),
) -> RankingMetrics:
    """Mean filtered rank and Hits@K of the true answers, mean-tie convention."""
    if not len(test):
        raise ValueError("ranking metrics need at least one example")
    cache = ExampleCache(model, test, filter_index)
    ranks = cache.ranks()
    return RankingMetrics(
        mr=float(ranks.mean()),
        hits={int(k): float((ranks <= k).mean()) for k in ks},
    )


@dataclass
class ReportRow:
    predictor: str
    kind: str | None
    epsilon: float
    coverage_mean: float
    coverage_sd: float | None
    size_mean: float
    size_sd: float | None
    mr: float | None
    trials: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    epsilon: float
    trials: int
    filtered: bool
    mr: float | None = None


def sample_sd(values: np.ndarray) -> float | None:
    """Unbiased (ddof=1) standard deviation; None for a single observation."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return None
    return float(np.std(values, ddof=1))


def _trial_rngs(seed: int, trials: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(trials)]


def _subsample(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    m = max(1, int(round(fraction * n)))
    return rng.choice(n, size=m, replace=False)


def _naive_coverage_size(
    cache: ExampleCache, epsilon: float, temperature: float
) -> tuple[float, float]:
    covered = np.empty(len(cache), dtype=bool)
    sizes = np.empty(len(cache), dtype=np.int64)
    for i in range(len(cache)):
        probs = softmax(cache.scores[i] / temperature)
        cand = np.flatnonzero(cache.masks[i])
        ordered = cand[np.argsort(-probs[cand], kind="stable")]
        count = prefix_include_count(probs[ordered], epsilon)
        sizes[i] = count
        position = int(np.nonzero(ordered == cache.answers[i])[0][0])
        covered[i] = position < count
    return float(covered.mean()), float(sizes.mean())


def _conformal_coverage_size(
    cache: ExampleCache,
    cal_alphas: np.ndarray,
    kind,
    temperature: float | None,
    epsilon: float,
) -> tuple[float, float]:
    profile = CalibrationProfile(
        NonconformityKind(kind) if isinstance(kind, str) else kind,
        np.sort(cal_alphas),
        temperature=temperature,
    )
    tau = threshold(profile, epsilon)
    covered = cache.alpha_true(profile.kind, temperature) <= tau
    sizes = ((cache.alphas(profile.kind, temperature) <= tau) & cache.masks).sum(axis=1)
    return float(covered.mean()), float(sizes.mean())


def _topk_coverage_size(cache: ExampleCache, k: int) -> tuple[float, float]:
    covered = cache.topk_positions() < k
    sizes = np.minimum(k, cache.candidate_counts())
    return float(covered.mean()), float(sizes.mean())


def _spec_trial(
    spec: PredictorSpec,
    test_cache: ExampleCache,
    cal_cache: ExampleCache,
    cal_idx: np.ndarray,
    epsilon: float,
    temperature: float | None,
) -> tuple[float, float]:
    if spec.family == "conformal":
        kind = NonconformityKind(spec.kind)
        temp = temperature if kind is NonconformityKind.CALIBRATED_SOFTMAX else None
        cal_alphas = cal_cache.alpha_true(kind, temp)[cal_idx]
        return _conformal_coverage_size(test_cache, cal_alphas, kind, temp, epsilon)
    if spec.family == "naive":
        return _naive_coverage_size(test_cache, epsilon, 1.0)
    if spec.family == "platt":
        fitted = fit_temperature_from_scores(
            cal_cache.scores[cal_idx], cal_cache.answers[cal_idx]
        )
        return _naive_coverage_size(test_cache, epsilon, fitted.value)
    if spec.family == "topk":
        choice = select_topk_from_ranks(cal_cache.ranks()[cal_idx], epsilon)
        return _topk_coverage_size(test_cache, choice.k)
    return _topk_coverage_size(test_cache, spec.k)


def evaluate_predictor(
    predictor: PredictorSpec | SetPredictor,
    model: ModelParams,
    calibration: Sequence[QueryExample],
    test: Sequence[QueryExample],
    epsilon: float,
    trials: int = 1,
    seed: int = 0,
    filter_index: FilterIndex | None = None,
    calibration_fraction: float = 0.8,
    caches: tuple[ExampleCache, ExampleCache] | None = None,
    temperature: float | None = None,
) -> ReportRow:
    """Coverage and mean set size of one predictor, aggregated over trials.

    With trials == 1 the full calibration pool is used; with more trials,
    each trial refits the predictor on a fresh uniform subsample
    (`calibration_fraction` of the pool). Stateless predictors are evaluated
    once, since re-running them cannot change the outcome.
    """
    if not len(test):
        raise ValueError("test examples must be nonempty")
    epsilon = check_epsilon(epsilon)
    check_positive_int(trials, "trials")
    if caches is not None:
        test_cache, cal_cache = caches
    else:
        test_cache = ExampleCache(model, test, filter_index)
        cal_cache = ExampleCache(model, calibration, filter_index)

    is_spec = isinstance(predictor, PredictorSpec)
    stateless = is_spec and predictor.family in ("naive", "fixed")
    rngs = _trial_rngs(seed, trials)
    coverages, sizes = [], []
    n_pool = len(cal_cache)
    for trial, rng in enumerate(rngs):
        if stateless and trial > 0:
            coverages.append(coverages[0])
            sizes.append(sizes[0])
            continue
        if trials == 1:
            idx = np.arange(n_pool)
        else:
            idx = _subsample(rng, n_pool, calibration_fraction)
        if is_spec:
            cov, size = _spec_trial(predictor, test_cache, cal_cache, idx, epsilon, temperature)
        else:
            fitted = clone(predictor).fit([cal_cache.examples[i] for i in idx])
            hit = 0
            total_size = 0
            for ex in test_cache.examples:
                answer_set = fitted.predict_set(ex.query, exempt_answer=ex.answer)
                hit += ex.answer in answer_set
                total_size += answer_set.size
            cov, size = hit / len(test_cache), total_size / len(test_cache)
        coverages.append(cov)
        sizes.append(size)
    coverages = np.array(coverages)
    sizes = np.array(sizes)
    name = predictor.name if is_spec else type(predictor).__name__
    kind = predictor.kind if is_spec else None
    return ReportRow(
        predictor=name,
        kind=kind,
        epsilon=epsilon,
        coverage_mean=float(coverages.mean()),
        coverage_sd=sample_sd(coverages),
        size_mean=float(sizes.mean()),
        size_sd=sample_sd(sizes),
        mr=None,
        trials=trials,
    )


def experiment_coverage(
    model: ModelParams,
    calibration: Sequence[QueryExample],
    test: Sequence[QueryExample],
    specs: Sequence[PredictorSpec],
    epsilon: float,
    trials: int = 15,
    seed: int = 0,
    filter_index: FilterIndex | None = None,
    calibration_fraction: float = 0.8,
    temperature: float | None = None,
) -> EvalReport:
    """Coverage/size table over several predictors sharing one protocol."""
    test_cache = ExampleCache(model, test, filter_index)
    cal_cache = ExampleCache(model, calibration, filter_index)
    mr = float(test_cache.ranks().mean())
    rows = []
    for spec in specs:
        row = evaluate_predictor(
            spec,
            model,
            calibration,
            test,
            epsilon,
            trials=trials,
            seed=seed,
            filter_index=filter_index,
            calibration_fraction=calibration_fraction,
            caches=(test_cache, cal_cache),
            temperature=temperature,
        )
        row.mr = mr
        rows.append(row)
    return EvalReport(
        rows=rows, epsilon=epsilon, trials=trials, filtered=filter_index is not None, mr=mr
    )


@dataclass(frozen=True)
class RankBin:
    rank_lo: int
    rank_hi: int
    count: int
    mean_size: float | None


@dataclass
class AdaptivenessProfile:
    """Mean set size stratified by the rank (difficulty) of the true answer."""

    bin_width: int
    max_rank: int
    bins: list[RankBin]
    overflow_count: int = 0
    overflow_mean_size: float | None = None


def _sizes_for_predictor(
    predictor: PredictorSpec | SetPredictor,
    cache: ExampleCache,
    cal_cache: ExampleCache | None,
    epsilon: float,
    temperature: float | None,
) -> np.ndarray:
    """Per-test-example answer-set sizes (own answer exempted from filtering)."""
    if isinstance(predictor, PredictorSpec):
        if predictor.family == "conformal":
            if cal_cache is None:
                raise ValueError("conformal specs need calibration examples")
            kind = NonconformityKind(predictor.kind)
            temp = temperature if kind is NonconformityKind.CALIBRATED_SOFTMAX else None
            profile = CalibrationProfile(kind, np.sort(cal_cache.alpha_true(kind, temp)), temp)
            tau = threshold(profile, epsilon)
            return ((cache.alphas(kind, temp) <= tau) & cache.masks).sum(axis=1)
        if predictor.family in ("naive", "platt"):
            t = 1.0
            if predictor.family == "platt":
                if cal_cache is None:
                    raise ValueError("platt specs need calibration examples")
                t = fit_temperature_from_scores(cal_cache.scores, cal_cache.answers).value
            sizes = np.empty(len(cache), dtype=np.int64)
            for i in range(len(cache)):
                probs = softmax(cache.scores[i] / t)
                cand = np.flatnonzero(cache.masks[i])
                ordered = cand[np.argsort(-probs[cand], kind="stable")]
                sizes[i] = prefix_include_count(probs[ordered], epsilon)
            return sizes
        if predictor.family == "topk":
            if cal_cache is None:
                raise ValueError("topk specs need calibration examples")
            k = select_topk_from_ranks(cal_cache.ranks(), epsilon).k
        else:
            k = predictor.k
        return np.minimum(k, cache.candidate_counts())
    return np.array(
        [
            predictor.predict_set(ex.query, exempt_answer=ex.answer).size
            for ex in cache.examples
        ]
    )


def adaptiveness(
    predictor: PredictorSpec | SetPredictor,
    model: ModelParams,
    test: Sequence[QueryExample],
    bin_width: int = 100,
    max_rank: int = 3000,
    filter_index: FilterIndex | None = None,
    calibration: Sequence[QueryExample] | None = None,
    epsilon: float = 0.1,
    temperature: float | None = None,
) -> AdaptivenessProfile:
    """Mean set size per rank bin; ranks beyond max_rank go to an overflow record.

    Bins use an inclusive upper edge: rank 100 lands in [1, 100], rank 101 in
    [101, 200]. Fractional tie-ranks are assigned by their ceiling.
    """
    check_positive_int(bin_width, "bin_width")
    check_positive_int(max_rank, "max_rank")
    cache = ExampleCache(model, test, filter_index)
    cal_cache = None
    if calibration is not None:
        cal_cache = ExampleCache(model, calibration, filter_index)
    sizes = _sizes_for_predictor(predictor, cache, cal_cache, epsilon, temperature)
    ranks = np.ceil(cache.ranks()).astype(np.int64)

    n_bins = -(-max_rank // bin_width)
    bins = []
    for b in range(n_bins):
        lo = b * bin_width + 1
        hi = min((b + 1) * bin_width, max_rank)
        in_bin = (ranks >= lo) & (ranks <= hi)
        count = int(in_bin.sum())
        bins.append(
            RankBin(lo, hi, count, float(sizes[in_bin].mean()) if count else None)
        )
    overflow = ranks > max_rank
    overflow_count = int(overflow.sum())
    return AdaptivenessProfile(
        bin_width=bin_width,
        max_rank=max_rank,
        bins=bins,
        overflow_count=overflow_count,
        overflow_mean_size=float(sizes[overflow].mean()) if overflow_count else None,
    )


@dataclass
class CalibrationSizeRow:
    n_cal: int | None  # None marks the entire-pool row
    coverage_mean: float
    coverage_sd: float | None
    size_mean: float
    size_sd: float | None
    trials: int


def calibration_size_sweep(
    model: ModelParams,
    validation: Sequence[QueryExample],
    sizes: Sequence[int],
    test: Sequence[QueryExample],
    epsilon: float,
    kind: str | NonconformityKind,
    trials: int = 20,
    seed: int = 0,
    filter_index: FilterIndex | None = None,
    temperature: float | None = None,
) -> list[CalibrationSizeRow]:
    """Coverage/size under calibration subsets of several sizes, plus the full pool."""
    epsilon = check_epsilon(epsilon)
    check_positive_int(trials, "trials")
    kind = NonconformityKind(kind) if isinstance(kind, str) else kind
    temp = temperature if kind is NonconformityKind.CALIBRATED_SOFTMAX else None
    cal_cache = ExampleCache(model, validation, filter_index)
    test_cache = ExampleCache(model, test, filter_index)
    n_pool = len(cal_cache)
    for size in sizes:
        if not 1 <= size <= n_pool:
            raise ValueError(f"calibration size {size} exceeds the pool of {n_pool} examples")

    pool_alphas = cal_cache.alpha_true(kind, temp)
    rows = []
    for size in sizes:
        coverages, mean_sizes = [], []
        for rng in _trial_rngs(seed, trials):
            idx = rng.choice(n_pool, size=size, replace=False)
            cov, mean_size = _conformal_coverage_size(
                test_cache, pool_alphas[idx], kind, temp, epsilon
            )
            coverages.append(cov)
            mean_sizes.append(mean_size)
        coverages, mean_sizes = np.array(coverages), np.array(mean_sizes)
        rows.append(
            CalibrationSizeRow(
                n_cal=int(size),
                coverage_mean=float(coverages.mean()),
                coverage_sd=sample_sd(coverages),
                size_mean=float(mean_sizes.mean()),
                size_sd=sample_sd(mean_sizes),
                trials=trials,
            )
        )
    cov, mean_size = _conformal_coverage_size(test_cache, pool_alphas, kind, temp, epsilon)
    rows.append(
        CalibrationSizeRow(
            n_cal=None,
            coverage_mean=cov,
            coverage_sd=None,
            size_mean=mean_size,
            size_sd=None,
            trials=1,
        )
    )
    return rows


def epsilon_sweep(
    specs: Sequence[PredictorSpec],
    model: ModelParams,
    calibration: Sequence[QueryExample],
    test: Sequence[QueryExample],
    epsilons: Sequence[float],
    filter_index: FilterIndex | None = None,
    temperature: float | None = None,
) -> list[ReportRow]:
    """Single-pass coverage/size per (predictor, error rate) over a grid."""
    for eps in epsilons:
        check_epsilon(eps)
    test_cache = ExampleCache(model, test, filter_index)
    cal_cache = ExampleCache(model, calibration, filter_index)
    idx = np.arange(len(cal_cache))
    rows = []
    for spec in specs:
        for eps in epsilons:
            cov, size = _spec_trial(spec, test_cache, cal_cache, idx, eps, temperature)
            rows.append(
                ReportRow(
                    predictor=spec.name,
                    kind=spec.kind,
                    epsilon=float(eps),
                    coverage_mean=cov,
                    coverage_sd=None,
                    size_mean=size,
                    size_sd=None,
                    mr=None,
                    trials=1,
                )
            )
    return rows


# --- report serialization ----------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


_REPORT_HEADER = [
    "predictor",
    "kind",
    "epsilon",
    "coverage_mean",
    "coverage_sd",
    "size_mean",
    "size_sd",
    "mr",
    "trials",
]


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_REPORT_HEADER)
    for row in rows:
        writer.writerow(
            [
                row.predictor,
                row.kind or "",
                _fmt(row.epsilon),
                _fmt(row.coverage_mean),
                _fmt(row.coverage_sd),
                _fmt(row.size_mean),
                _fmt(row.size_sd),
                _fmt(row.mr),
                row.trials,
            ]
        )
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    payload = {
        "epsilon": report.epsilon,
        "trials": report.trials,
        "filtered": report.filtered,
        "mr": report.mr,
        "rows": [
            {
                "predictor": r.predictor,
                "kind": r.kind,
                "epsilon": r.epsilon,
                "coverage_mean": r.coverage_mean,
                "coverage_sd": r.coverage_sd,
                "size_mean": r.size_mean,
                "size_sd": r.size_sd,
                "mr": r.mr,
                "trials": r.trials,
            }
            for r in report.rows
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def adaptiveness_csv(profile: AdaptivenessProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rank_lo", "rank_hi", "count", "mean_size"])
    for b in profile.bins:
        writer.writerow([b.rank_lo, b.rank_hi, b.count, _fmt(b.mean_size)])
    return buf.getvalue()


def calibration_sweep_csv(rows: Sequence[CalibrationSizeRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n_cal", "coverage_mean", "coverage_sd", "size_mean", "size_sd", "trials"])
    for row in rows:
        writer.writerow(
            [
                "all" if row.n_cal is None else row.n_cal,
                _fmt(row.coverage_mean),
                _fmt(row.coverage_sd),
                _fmt(row.size_mean),
                _fmt(row.size_sd),
                row.trials,
            ]
        )
    return buf.getvalue()


def write_text(content: str, path: str | Path) -> None:
    Path(path).write_text(content, encoding="utf-8", newline="\n")
