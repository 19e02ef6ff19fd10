"""Command-line interface.

Subcommands: synth (generate benchmark splits), parse (captions to label
records), train, eval, and gradcheck. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.

Run configuration comes from an optional key-value text file (one
`key = value` per line, `#` comments) overridden by command-line flags;
unknown keys and unknown flags are hard errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import gradcheck, scorenet, synthbench, trainer
from .synthbench import DataError, SynthConfig
from .textgraph import (
    AttributeRegistry,
    ParseStats,
    Vocabulary,
    default_registry,
    default_vocabulary,
    extract_labels,
    load_labels,
    save_labels,
)
from .trainer import NumericalError, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); our contract says 1
        raise UsageError(message)


def read_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}: line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in TrainConfig.field_types():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if "lambda2" in values and "loss_mode" in values:
        pass  # both given; TrainConfig validates their consistency
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _add_train_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value config file; flags override it")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--lambda1", type=float, dest="lambda1")
    p.add_argument("--lambda2", type=float, dest="lambda2")
    p.add_argument("--loss-mode", choices=trainer.LOSS_MODES, dest="loss_mode")
    p.add_argument("--num-heads", type=int, dest="num_heads")
    p.add_argument("--tau", type=float, dest="tau")
    p.add_argument("--nms-threshold", type=float, dest="nms_threshold")
    p.add_argument("--score-floor", type=float, dest="score_floor")


def _load_vocab_registry(args: argparse.Namespace) -> tuple[Vocabulary | None, AttributeRegistry]:
    vocab = None
    if getattr(args, "vocab", None):
        try:
            vocab = Vocabulary.from_file(args.vocab)
        except (OSError, ValueError, json.JSONDecodeError) as e:
            raise DataError(f"bad vocabulary file {args.vocab}: {e}") from None
    if getattr(args, "registry", None):
        try:
            registry = AttributeRegistry.from_file(args.registry)
        except (OSError, ValueError, json.JSONDecodeError) as e:
            raise DataError(f"bad registry file {args.registry}: {e}") from None
    else:
        registry = default_registry()
    return vocab, registry


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    if not out_dir.exists():
        out_dir.mkdir(parents=True)
    _, registry = _load_vocab_registry(args)
    config = SynthConfig(
        feature_dim=args.feature_dim,
        noise_sigma=args.noise_sigma,
        cooccur_prob=args.cooccur_prob,
        attr_mention_prob=args.attr_mention_prob,
    )
    universe = synthbench.make_universe(config, registry, seed=args.seed)
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    for split_index, (split, size) in enumerate(sizes.items()):
        if size < 1:
            raise UsageError(f"--{split} must be positive, got {size}")
        path = out_dir / f"{split}.jsonl"
        # each split draws from a disjoint stream keyed by (seed, split)
        synthbench.gen_dataset(universe, size, [args.seed, split_index], path, id_prefix=split)
        print(f"wrote {size} scenes to {path}")
    return EXIT_OK


def cmd_parse(args: argparse.Namespace) -> int:
    vocab, registry = _load_vocab_registry(args)
    if vocab is None:
        vocab = default_vocabulary()
    try:
        records = load_labels(args.captions)
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from None
    stats = ParseStats()
    out_records = []
    for i, record in enumerate(records, start=1):
        if "image_id" not in record or "captions" not in record:
            raise DataError(f"{args.captions}: record {i}: needs image_id and captions")
        try:
            labels = extract_labels(record["captions"], vocab, registry, stats)
        except ValueError as e:
            raise DataError(f"{args.captions}: record {i}: {e}") from None
        out_records.append(labels.to_record(record["image_id"]))
    save_labels(args.out, out_records)
    print(
        f"parsed {len(out_records)} caption sets -> {args.out} "
        f"({stats.unknown_modifiers} unknown adjectives dropped)"
    )
    return EXIT_OK


def _load_scenes(path: str) -> list[synthbench.SyntheticScene]:
    try:
        scenes = synthbench.load_dataset(path)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None
    if not scenes:
        raise DataError(f"dataset {path} is empty")
    return scenes


def cmd_train(args: argparse.Namespace) -> int:
    config = build_train_config(args)
    scenes = _load_scenes(args.data)
    header = synthbench.read_dataset_header(args.data)
    vocab, registry = _load_vocab_registry(args)
    if vocab is None:
        vocab = Vocabulary(header["class_names"])
    log_file = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        sink = None
        if log_file is not None:
            sink = lambda record: log_file.write(json.dumps(record, sort_keys=True) + "\n")
        params = trainer.train(scenes, vocab, registry, config, log_sink=sink)
    finally:
        if log_file is not None:
            log_file.close()
    scorenet.save_checkpoint(params, args.out)
    print(f"trained {config.steps} steps ({config.loss_mode}) -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_train_config(args)
    scenes = _load_scenes(args.data)
    try:
        params = scorenet.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise DataError(f"bad checkpoint {args.checkpoint}: {e}") from None
    metrics = trainer.evaluate(params, scenes, config)
    report = trainer.metrics_report(metrics, config)
    trainer.write_metrics(args.out, report)
    print(f"map={metrics['map']:.4f} corloc={metrics['corloc']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    result = gradcheck.run_gradient_check(
        trials=args.trials, seed=args.seed, coords_per_trial=args.coords, step=args.step
    )
    status = "PASS" if result.max_rel_error < args.tolerance else "FAIL"
    print(
        f"{status}: {result.trials} configs, {result.coords_checked} coordinates, "
        f"max relative error {result.max_rel_error:.3e} "
        f"(worst: trial {result.worst_trial}, {result.worst_coord}) "
        f"in {result.elapsed_seconds:.1f}s"
    )
    if status == "FAIL":
        raise NumericalError(
            f"gradient check failed: {result.max_rel_error:.3e} >= {args.tolerance:.1e}"
        )
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="capdet", description="caption-supervised detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate benchmark splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=500)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--cooccur-prob", type=float, default=0.9)
    p.add_argument("--attr-mention-prob", type=float, default=0.7)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("parse", help="extract label records from captions")
    p.add_argument("--captions", required=True, help="line-delimited {image_id, captions} records")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step loss log (line-delimited records)")
    p.add_argument("--vocab")
    p.add_argument("--registry")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics report path")
    p.add_argument("--vocab")
    p.add_argument("--registry")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=20240601)
    p.add_argument("--coords", type=int, default=80, help="coordinates sampled per trial")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        # bad parameter combinations surface here (DataError was caught above)
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
