import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import orjson
from pydantic import ValidationError

# Add project root to path so imports work correctly
project_root = str(Path(__file__).parent.parent)
sys.path.insert(0, project_root)

from src.guard.bench import bench, format_latency_table
from src.guard.config import PROFILES, EngineConfig, TrainConfig, resolve_engine_config, setup_environment
from src.guard.engine import SafetyEngine
from src.guard.errors import EXIT_INTERNAL, EXIT_IO, EXIT_USAGE, GuardError
from src.guard.evaluation import (
    confusion_matrix,
    error_analysis,
    evaluate_scores,
    format_confusion_matrix,
    format_cv_table,
    format_metrics_table,
    format_sweep_table,
    select_threshold,
    stratified_split,
    threshold_sweep,
    write_records,
)
from src.guard.head import init_head, load_head, predict_proba, save_head
from src.guard.service import serve
from src.guard.trainer import run_cross_validation, train_final, train_head, write_history
from utils.binary_formats import read_dataset, write_dataset
from utils.splitmix import SplitMix64
from utils.synthetic import two_gaussian_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
TRAIN_VAL_RATIOS = (0.85, 0.15, 0.0)


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, stream=sys.stderr, force=True)


def _print_json(record: Dict[str, Any]) -> None:
    print(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY).decode())


# --- argument parsing ---

def _engine_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--threshold", type=float, help="Decision threshold in (0, 1)")
    parent.add_argument("--profile", choices=sorted(PROFILES), help="Deployment profile threshold")
    parent.add_argument("--backend", choices=["stub", "external"], help="Encoder backend")
    parent.add_argument("--model", help="Encoder model file for the external backend")
    parent.add_argument("--head", help="Head parameter file (VSHP1)")
    parent.add_argument("--seed", type=int, help="Stub projection seed")
    parent.add_argument("--audit-log", help="Audit log path (JSONL)")
    parent.add_argument("--port", type=int, help="Service port")
    parent.add_argument("--transcribe", action="store_true", default=None,
                        help="Request a transcript when the backend supports it")
    return parent


def _train_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=0, help="Training seed")
    parent.add_argument("--max-steps", type=int, help="Optimizer updates")
    parent.add_argument("--warmup-steps", type=int, help="Linear warmup updates")
    parent.add_argument("--lr", type=float, help="Peak learning rate")
    parent.add_argument("--batch-size", type=int, help="Effective batch size")
    parent.add_argument("--micro-batch-size", type=int, help="Micro-batch size for gradient accumulation")
    parent.add_argument("--eval-every", type=int, help="Validation interval in steps")
    parent.add_argument("--dropout", type=float, help="Dropout probability")
    parent.add_argument("--progress", action="store_true", help="Show a progress bar")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voice-guard", description="Voice safety classification engine")
    parser.add_argument("--config", type=Path, help="Flat JSON configuration file")
    parser.add_argument("--log-level", help="Logging level (default from config, INFO)")
    sub = parser.add_subparsers(dest="command", required=True)
    engine, train = _engine_flags(), _train_flags()

    p = sub.add_parser("classify", parents=[engine], help="Classify WAV files")
    p.add_argument("paths", nargs="+", type=Path)

    sub.add_parser("serve", parents=[engine], help="Run the HTTP classification service")

    p = sub.add_parser("bench", parents=[engine], help="Latency of classification path and full pipeline")
    p.add_argument("paths", nargs="+", type=Path)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)

    p = sub.add_parser("train-head", parents=[train], help="Train a head on a VSED1 dataset")
    p.add_argument("--train", type=Path, required=True, help="Training dataset")
    p.add_argument("--val", type=Path, help="Validation dataset; split from --train when omitted")
    p.add_argument("--out", type=Path, required=True, help="Output head file")
    p.add_argument("--history", type=Path, help="Write the training history as JSONL")
    p.add_argument("--final", action="store_true",
                   help="Retrain on train + validation up to the best step")

    for name, text in (("eval", "Metrics of a head on a dataset"), ("sweep", "Threshold sweep")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--head", type=Path, required=True)
        p.add_argument("--dataset", type=Path, required=True)
        p.add_argument("--jsonl", type=Path, help="Line-delimited export")
        if name == "eval":
            p.add_argument("--threshold", type=float, default=0.2)
            p.add_argument("--errors", type=int, default=0, help="List the N errors closest to the threshold")

    p = sub.add_parser("cv", parents=[train], help="Stratified k-fold cross-validation")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--jsonl", type=Path, help="Per-fold results as JSONL")

    p = sub.add_parser("make-dataset", help="Write a synthetic two-Gaussian VSED1 dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init-head", help="Write a seeded, untrained head")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def engine_config_from_args(args: argparse.Namespace) -> EngineConfig:
    """CLI flags on top of config file and VSG_ environment"""
    threshold = args.threshold
    if threshold is None and args.profile:
        threshold = PROFILES[args.profile]
    overrides = {
        "threshold": threshold,
        "backend": args.backend,
        "model_path": args.model,
        "head_path": args.head,
        "seed": args.seed,
        "audit_log_path": args.audit_log,
        "service_port": args.port,
        "transcribe": args.transcribe,
        "log_level": args.log_level,
    }
    cfg = resolve_engine_config(args.config, overrides)
    configure_logging(cfg.log_level)
    return cfg


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    flags = {
        "seed": args.seed,
        "max_steps": args.max_steps,
        "warmup_steps": args.warmup_steps,
        "lr_max": args.lr,
        "batch_size": args.batch_size,
        "micro_batch_size": args.micro_batch_size,
        "eval_every": args.eval_every,
        "dropout_p": args.dropout,
    }
    return TrainConfig(**{k: v for k, v in flags.items() if v is not None})


# --- subcommands ---

def cmd_classify(args: argparse.Namespace) -> int:
    cfg = engine_config_from_args(args)
    with SafetyEngine(cfg) as engine:
        for path in args.paths:
            result = engine.classify_file(path)
            _print_json({"path": str(path), **result.to_dict()})
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    serve(engine_config_from_args(args))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = engine_config_from_args(args)
    report = bench(args.paths, args.repetitions, cfg, warmup=args.warmup)
    print(format_latency_table(report))
    return 0


def cmd_train_head(args: argparse.Namespace) -> int:
    cfg = train_config_from_args(args)
    ds = read_dataset(args.train)
    if args.val:
        ds_train, ds_val = ds, read_dataset(args.val)
    else:
        train_idx, val_idx, _ = stratified_split(ds.labels, TRAIN_VAL_RATIOS, cfg.seed)
        ds_train, ds_val = ds.subset(train_idx), ds.subset(val_idx)

    params, history = train_head(ds_train, ds_val, cfg, progress=args.progress)
    print(f"class weights: safe {history.class_weights[0]:.4f}, malicious {history.class_weights[1]:.4f}")
    print(f"best validation F1 {history.best_val_f1:.4f} at step {history.best_step}")
    if args.history:
        write_history(history, args.history)
    if args.final:
        params = train_final(ds_train, ds_val, cfg, stop_step=history.best_step, progress=args.progress)
        print(f"final head retrained on {len(ds_train) + len(ds_val)} samples for {history.best_step} steps")
    save_head(params, args.out)
    return 0


def _scores(args: argparse.Namespace):
    params = load_head(args.head, expected_count=None)
    ds = read_dataset(args.dataset)
    return predict_proba(ds.embeddings, params), ds.labels


def cmd_eval(args: argparse.Namespace) -> int:
    scores, labels = _scores(args)
    report = evaluate_scores(scores, labels, args.threshold)
    print(format_metrics_table(report))
    print()
    print(format_confusion_matrix(confusion_matrix(scores, labels, args.threshold)))
    if report.degenerate:
        print(f"undefined ratios reported as 0: {', '.join(report.degenerate)}")
    if args.errors:
        false_negatives, false_positives = error_analysis(scores, labels, args.threshold)
        for name, indices in (("false negatives", false_negatives), ("false positives", false_positives)):
            shown = ", ".join(f"{i} (p={scores[i]:.3f})" for i in indices[:args.errors])
            print(f"{name}: {shown or 'none'}")
    if args.jsonl:
        write_records([report], args.jsonl)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    scores, labels = _scores(args)
    rows = threshold_sweep(scores, labels)
    print(format_sweep_table(rows))
    print(f"selected threshold {select_threshold(scores, labels):.2f}")
    if args.jsonl:
        write_records(rows, args.jsonl)
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    cfg = train_config_from_args(args)
    ds = read_dataset(args.dataset)
    report = run_cross_validation(ds, args.k, cfg, workers=args.workers, progress=args.progress)
    print(format_cv_table(report))
    if args.jsonl:
        write_records(report.folds, args.jsonl)
    return 0


def cmd_make_dataset(args: argparse.Namespace) -> int:
    ds = two_gaussian_dataset(args.n_per_class, args.dim, args.sigma, args.separation, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {ds} to {args.out}")
    return 0


def cmd_init_head(args: argparse.Namespace) -> int:
    save_head(init_head(SplitMix64(args.seed)), args.out)
    return 0


COMMANDS = {
    "classify": cmd_classify,
    "serve": cmd_serve,
    "bench": cmd_bench,
    "train-head": cmd_train_head,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "cv": cmd_cv,
    "make-dataset": cmd_make_dataset,
    "init-head": cmd_init_head,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application

    Returns:
        Process exit code: 0 on success, 1 internal, 2 usage, 3 I/O, 4 model/backend,
        5 data format
    """
    setup_environment()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    configure_logging(args.log_level or "INFO")
    try:
        return COMMANDS[args.command](args)
    except GuardError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except ValidationError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        logger.error("Invalid value: %s", e)
        return EXIT_USAGE
    except MemoryError:
        logger.error("Out of memory")
        return EXIT_INTERNAL
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
