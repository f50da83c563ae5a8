"""Answer-set prediction for knowledge-graph queries with coverage guarantees.

Shallow embedding models (translation, rotation, and bilinear families) are
trained on triple data and wrapped in set predictors: split-conformal
predictors with distribution-free coverage, plus naive, Platt-scaled,
top-K, and fixed-size baselines.
"""

from .kg import (
    Direction,
    Dictionaries,
    FilterIndex,
    KnowledgeGraph,
    Query,
    QueryExample,
    Triple,
    TripleParseError,
    build_filter_index,
    dictionary_json,
    dump_dictionaries,
    filter_by_direction,
    load_kg,
    make_query_examples,
    materialize,
    parse_triples,
)
from .models import (
    ModelKind,
    ModelParams,
    TripleGradient,
    batch_gradients,
    grad,
    init_model,
    score,
    score_all,
    triple_scores,
)
from .training import (
    Checkpoint,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    TrainConfig,
    TrainResult,
    TrainingDivergenceError,
    default_dim,
    load_checkpoint,
    sample_negatives,
    save_checkpoint,
    train,
)
from .conformal import (
    AnswerSet,
    CalibrationProfile,
    ConformalSetPredictor,
    NonconformityKind,
    SetPredictor,
    calibrate,
    candidate_mask,
    nonconformity,
    nonconformity_from_scores,
    predict_set,
    quantile_index,
    threshold,
)
from .baselines import (
    FixedSizeSetPredictor,
    NaiveSetPredictor,
    PlattSetPredictor,
    Temperature,
    TopKChoice,
    TopKSetPredictor,
    fit_temperature,
    predict_set_fixed,
    predict_set_naive,
    predict_set_topk,
    select_topk,
)
from .ranking import example_ranks, rank_from_scores
from .evaluation import (
    AdaptivenessProfile,
    EvalReport,
    ExampleCache,
    PredictorSpec,
    RankingMetrics,
    ReportRow,
    adaptiveness,
    calibration_size_sweep,
    epsilon_sweep,
    evaluate_predictor,
    experiment_coverage,
    ranking_metrics,
    report_csv,
    report_json,
)
from .synthetic import generate_synthetic_kg

__version__ = "0.1.0"
