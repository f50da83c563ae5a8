"""Command-line interface: train, calibrate, predict, evaluate, experiment.

Exit codes: 0 success, 2 config/usage violation, 3 training divergence,
4 empty calibration split, 5 unresolvable entity/relation name, 1 other
errors. Diagnostics go to stderr; stdout carries data only.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import Temperature, TopKChoice, fit_temperature, select_topk
from .config import ConfigError, RunConfig, load_config
from .conformal import (
    CalibrationProfile,
    ConformalSetPredictor,
    NonconformityKind,
    SetPredictor,
    calibrate,
)
from .baselines import (
    FixedSizeSetPredictor,
    NaiveSetPredictor,
    PlattSetPredictor,
    TopKSetPredictor,
)
from .evaluation import (
    PredictorSpec,
    adaptiveness,
    adaptiveness_csv,
    calibration_size_sweep,
    calibration_sweep_csv,
    epsilon_sweep,
    experiment_coverage,
    report_csv,
    report_json,
    write_text,
)
from .kg import (
    Direction,
    FilterIndex,
    KnowledgeGraph,
    Query,
    TripleParseError,
    build_filter_index,
    dump_dictionaries,
    make_query_examples,
)
from .training import (
    CheckpointError,
    TrainingDivergenceError,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_EMPTY_CALIBRATION = 4
EXIT_UNKNOWN_NAME = 5


class EmptyCalibrationError(ValueError):
    pass


class UnknownNameError(ValueError):
    def __init__(self, name: str, role: str, suggestions: list[str]):
        hint = f"; closest matches: {', '.join(suggestions)}" if suggestions else ""
        super().__init__(f"unknown {role} name {name!r}{hint}")
        self.name = name
        self.suggestions = suggestions


def _load_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.model.train.seed = args.seed
        cfg.eval.seed = args.seed
    if getattr(args, "output_dir", None) is not None:
        cfg.output_dir = args.output_dir
    if getattr(args, "epsilon", None) is not None:
        if not 0.0 < args.epsilon < 1.0:
            raise ConfigError("eval.epsilon", "must be in (0, 1)")
        cfg.eval.epsilon = args.epsilon
    if getattr(args, "filtered", None) is not None:
        cfg.eval.filtered = args.filtered
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _filter_index(cfg: RunConfig, kg: KnowledgeGraph) -> FilterIndex | None:
    if not cfg.eval.filtered:
        return None
    return build_filter_index(kg, cfg.eval.filter_splits)


def _check_checkpoint_matches(cfg: RunConfig, model) -> None:
    if model.kind is not cfg.model.kind:
        raise ConfigError(
            "model.kind",
            f"checkpoint holds a {model.kind.value} model, config says {cfg.model.kind.value}",
        )
    if cfg.model.dim is not None and cfg.model.dim != model.dim:
        raise ConfigError("model.dim", f"checkpoint dim {model.dim} != configured {cfg.model.dim}")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    kg = cfg.build_kg()
    out = _out_dir(cfg)
    result = train(kg, cfg.model.kind, cfg.model.train, dim=cfg.model.dim, norm_p=cfg.model.norm_p)
    meta = {
        "entities": list(kg.entity_names),
        "relations": list(kg.relation_names),
        "config": {
            "kind": cfg.model.kind.value,
            "dim": result.model.dim,
            "norm_p": cfg.model.norm_p,
            "train": cfg.model.train.to_dict(),
        },
        "final_loss": result.loss_trace[-1],
    }
    ckpt_path = out / "model.ckpt"
    save_checkpoint(result.model, meta, ckpt_path)
    trace = "epoch,loss\n" + "".join(
        f"{epoch},{loss!r}\n" for epoch, loss in enumerate(result.loss_trace)
    )
    write_text(trace, out / "loss_trace.csv")
    dump_dictionaries(kg, out / "dictionaries.json")
    print(ckpt_path)
    return EXIT_OK


def _conformal_kinds(cfg: RunConfig) -> list[NonconformityKind]:
    kinds = [NonconformityKind(s.kind) for s in cfg.predictors if s.family == "conformal"]
    return list(dict.fromkeys(kinds))


def _needs_temperature(cfg: RunConfig) -> bool:
    return any(s.family == "platt" for s in cfg.predictors) or any(
        k is NonconformityKind.CALIBRATED_SOFTMAX for k in _conformal_kinds(cfg)
    )


def _calibration_payload(cfg: RunConfig, kg: KnowledgeGraph, model) -> dict:
    if not kg.valid:
        raise EmptyCalibrationError("the calibration (validation) split is empty")
    examples = make_query_examples(kg.valid)
    filter_index = _filter_index(cfg, kg)
    temperature = fit_temperature(model, examples) if _needs_temperature(cfg) else None
    profiles = {}
    for kind in _conformal_kinds(cfg):
        temp = temperature.value if kind is NonconformityKind.CALIBRATED_SOFTMAX else None
        profiles[kind.value] = calibrate(model, examples, kind, temp).to_json_dict()
    payload: dict = {
        "epsilon": cfg.eval.epsilon,
        "n_cal": len(examples),
        "profiles": profiles,
        "temperature": None,
        "topk": None,
    }
    if temperature is not None:
        payload["temperature"] = {"value": temperature.value, "fit_nll": temperature.fit_nll}
    if any(s.family == "topk" for s in cfg.predictors):
        choice = select_topk(model, examples, cfg.eval.epsilon, filter_index)
        payload["topk"] = {
            "k": choice.k,
            "validation_coverage": choice.validation_coverage,
            "epsilon": cfg.eval.epsilon,
        }
    return payload


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    checkpoint = load_checkpoint(ckpt_path)
    _check_checkpoint_matches(cfg, checkpoint.model)
    kg = cfg.build_kg()
    payload = _calibration_payload(cfg, kg, checkpoint.model)
    cal_path = out / "calibration.json"
    write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", cal_path)
    print(cal_path)
    return EXIT_OK


def _resolve_name(name: str, names: tuple[str, ...], role: str) -> int:
    try:
        return names.index(name)
    except ValueError:
        suggestions = difflib.get_close_matches(name, names, n=3)
        raise UnknownNameError(name, role, suggestions) from None


def _parse_query(text: str, entities: tuple[str, ...], relations: tuple[str, ...]) -> Query:
    tokens = text.split("\t") if "\t" in text else text.split()
    if len(tokens) != 3:
        raise ConfigError("query", f"expected 3 tokens 'h r ?' or '? r t', got {len(tokens)}")
    head, rel_name, tail = tokens
    if (head == "?") == (tail == "?"):
        raise ConfigError("query", "exactly one of head/tail must be '?'")
    relation = _resolve_name(rel_name, relations, "relation")
    if tail == "?":
        return Query(Direction.TAIL, _resolve_name(head, entities, "entity"), relation)
    return Query(Direction.HEAD, _resolve_name(tail, entities, "entity"), relation)


def _predictor_for_name(
    name: str,
    model,
    epsilon: float,
    filter_index: FilterIndex | None,
    payload: dict,
) -> SetPredictor:
    profiles = payload.get("profiles", {})
    if name in profiles:
        profile = CalibrationProfile.from_json_dict(profiles[name])
        predictor = ConformalSetPredictor(
            model,
            kind=name,
            epsilon=epsilon,
            temperature=profile.temperature,
            filter_index=filter_index,
        )
        predictor.profile_ = profile
        return predictor
    if name == "naive":
        return NaiveSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
    if name == "platt":
        temp = payload.get("temperature")
        if not temp:
            raise ConfigError("predictor", "calibration file holds no fitted temperature")
        predictor = PlattSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
        predictor.temperature_ = Temperature(temp["value"], temp["fit_nll"])
        return predictor
    if name == "topk":
        choice = payload.get("topk")
        if not choice:
            raise ConfigError("predictor", "calibration file holds no fitted top-K choice")
        predictor = TopKSetPredictor(model, epsilon=epsilon, filter_index=filter_index)
        predictor.choice_ = TopKChoice(choice["k"], choice["validation_coverage"])
        return predictor
    if name.startswith("top") and name[3:].isdigit():
        return FixedSizeSetPredictor(model, k=int(name[3:]), filter_index=filter_index)
    raise ConfigError("predictor", f"unknown predictor {name!r}")


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    cal_path = Path(args.calibration) if args.calibration else out / "calibration.json"
    checkpoint = load_checkpoint(ckpt_path)
    model = checkpoint.model
    entities = tuple(checkpoint.meta.get("entities", ()))
    relations = tuple(checkpoint.meta.get("relations", ()))
    payload = json.loads(cal_path.read_text(encoding="utf-8"))

    query = _parse_query(args.query, entities, relations)
    filter_index = None
    if cfg.eval.filtered:
        filter_index = _filter_index(cfg, cfg.build_kg())
    name = args.predictor or (cfg.predictors[0].name if cfg.predictors else "naive")
    predictor = _predictor_for_name(name, model, cfg.eval.epsilon, filter_index, payload)
    answer_set = predictor.predict_set(query)
    for entity in sorted(entities[i] for i in answer_set.entities):
        print(entity)
    print(f"size={answer_set.size} epsilon={cfg.eval.epsilon!r} predictor={name}")
    return EXIT_OK


def _ensure_artifacts(cfg: RunConfig, args) -> tuple[KnowledgeGraph, object, dict]:
    """Load checkpoint and calibration from the output dir, building them if absent."""
    out = _out_dir(cfg)
    ckpt_path = out / "model.ckpt"
    if not ckpt_path.exists():
        cmd_train(args)
    checkpoint = load_checkpoint(ckpt_path)
    _check_checkpoint_matches(cfg, checkpoint.model)
    kg = cfg.build_kg()
    cal_path = out / "calibration.json"
    if cal_path.exists():
        payload = json.loads(cal_path.read_text(encoding="utf-8"))
    else:
        payload = _calibration_payload(cfg, kg, checkpoint.model)
        write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", cal_path)
    return kg, checkpoint.model, payload


def _temperature_value(payload: dict) -> float | None:
    temp = payload.get("temperature")
    return temp["value"] if temp else None


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    kg, model, payload = _ensure_artifacts(cfg, args)
    out = _out_dir(cfg)
    if not kg.valid:
        raise EmptyCalibrationError("the calibration (validation) split is empty")
    if not kg.test:
        raise ValueError("the test split is empty")
    filter_index = _filter_index(cfg, kg)
    report = experiment_coverage(
        model,
        make_query_examples(kg.valid),
        make_query_examples(kg.test),
        cfg.predictors,
        cfg.eval.epsilon,
        trials=1,
        seed=cfg.eval.seed,
        filter_index=filter_index,
        temperature=_temperature_value(payload),
    )
    write_text(report_csv(report.rows), out / "evaluation.csv")
    write_text(report_json(report) + "\n", out / "evaluation.json")
    print(out / "evaluation.csv")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    kg, model, payload = _ensure_artifacts(cfg, args)
    out = _out_dir(cfg)
    if not kg.valid:
        raise EmptyCalibrationError("the calibration (validation) split is empty")
    filter_index = _filter_index(cfg, kg)
    validation = make_query_examples(kg.valid)
    test = make_query_examples(kg.test)
    temperature = _temperature_value(payload)
    eval_cfg = cfg.eval
    produced: list[Path] = []

    if args.which == 1:
        report = experiment_coverage(
            model,
            validation,
            test,
            cfg.predictors,
            eval_cfg.epsilon,
            trials=eval_cfg.trials,
            seed=eval_cfg.seed,
            filter_index=filter_index,
            calibration_fraction=eval_cfg.calibration_fraction,
            temperature=temperature,
        )
        write_text(report_csv(report.rows), out / "coverage_size.csv")
        write_text(report_json(report) + "\n", out / "coverage_size.json")
        produced += [out / "coverage_size.csv", out / "coverage_size.json"]
    elif args.which == 2:
        for spec in cfg.predictors:
            profile = adaptiveness(
                spec,
                model,
                test,
                bin_width=eval_cfg.bin_width,
                max_rank=eval_cfg.max_rank,
                filter_index=filter_index,
                calibration=validation,
                epsilon=eval_cfg.epsilon,
                temperature=temperature,
            )
            path = out / f"adaptiveness_{spec.name}.csv"
            write_text(adaptiveness_csv(profile), path)
            produced.append(path)
    elif args.which == 3:
        for kind in _conformal_kinds(cfg):
            rows = calibration_size_sweep(
                model,
                validation,
                eval_cfg.calibration_sizes,
                test,
                eval_cfg.epsilon,
                kind,
                trials=20,
                seed=eval_cfg.seed,
                filter_index=filter_index,
                temperature=temperature,
            )
            path = out / f"calibration_size_{kind.value}.csv"
            write_text(calibration_sweep_csv(rows), path)
            produced.append(path)
    elif args.which == 4:
        rows = epsilon_sweep(
            cfg.predictors,
            model,
            validation,
            test,
            eval_cfg.sweep_epsilons,
            filter_index=filter_index,
            temperature=temperature,
        )
        path = out / "epsilon_sweep.csv"
        write_text(report_csv(rows), path)
        produced.append(path)
    else:
        raise ConfigError("which", f"experiment must be 1..4, got {args.which}")
    for path in produced:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="override training/eval seeds")
    common.add_argument("--output-dir", default=None, help="override the output directory")
    common.add_argument("--epsilon", type=float, default=None, help="override the error rate")
    filt = common.add_mutually_exclusive_group()
    filt.add_argument("--filtered", dest="filtered", action="store_const", const=True, default=None)
    filt.add_argument("--unfiltered", dest="filtered", action="store_const", const=False)

    parser = argparse.ArgumentParser(
        prog="kgconformal",
        description="Train embedding models and predict answer sets with coverage guarantees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="train a model, write a checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_cal = sub.add_parser("calibrate", parents=[common], help="build calibration profiles")
    p_cal.add_argument("--checkpoint", default=None, help="checkpoint path (default: output dir)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_pred = sub.add_parser("predict", parents=[common], help="answer set for one query")
    p_pred.add_argument("--checkpoint", default=None)
    p_pred.add_argument("--calibration", default=None)
    p_pred.add_argument("--query", required=True, help="'h r ?' or '? r t' (names)")
    p_pred.add_argument("--predictor", default=None, help="e.g. negscore, naive, platt, topk, top10")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", parents=[common], help="single-pass coverage/size report")
    p_eval.set_defaults(func=cmd_evaluate)

    p_exp = sub.add_parser("experiment", parents=[common], help="run experiment 1..4")
    p_exp.add_argument("--which", type=int, required=True, choices=(1, 2, 3, 4))
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except EmptyCalibrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_EMPTY_CALIBRATION
    except UnknownNameError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNKNOWN_NAME
    except (CheckpointError, TripleParseError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


def entrypoint() -> None:
    sys.exit(main())
