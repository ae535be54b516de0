"""Command-line surface: synth, train, register, evaluate.

Configuration comes from an optional plain-text key-value file (one
``key = value`` per line, ``#`` comments, tuples comma-separated) with
individual flags overriding file values. Exit codes: 0 success, 1
validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .errors import LapregError, ValidationError
from .synth import generate_dataset, generate_translation_pair, save_dataset
from .train import TrainConfig, evaluate, register, train

__all__ = ["main"]


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(name: str, text: str, target_type):
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is tuple:
            return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(","))
        return text
    except ValueError as exc:
        raise ValidationError(f"config key {name}: cannot parse {text!r}") from exc


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Merge defaults, config file, and CLI flag overrides into a TrainConfig."""
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    type_map = {"int": int, "float": float, "tuple": tuple, "str": str}
    values: dict = {}
    if getattr(args, "config", None):
        for key, text in parse_config_file(args.config).items():
            if key not in field_types:
                raise ValidationError(f"unknown config key: {key}")
            values[key] = _coerce(key, text, type_map.get(str(field_types[key]).split("[")[0], str))
    overrides = {
        "seed": args.seed,
        "alpha": args.alpha,
        "beta": args.beta,
        "steps": args.steps,
        "heads": args.heads,
        "ckpt_path": getattr(args, "ckpt", None),
        "log_path": getattr(args, "log", None),
        "widths": getattr(args, "widths", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "batch_size": getattr(args, "batch_size", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    return TrainConfig(**values)


def _heads_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _size_tuple(text: str) -> tuple:
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    return tuple(parts)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="smoothness weight")
    p.add_argument("--beta", type=float, default=None, help="orthogonality weight")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--heads", type=_heads_tuple, default=None,
                   help="attention heads per level, deepest first, e.g. 8,4,2,1,1")
    p.add_argument("--widths", type=_heads_tuple, default=None,
                   help="encoder channels per level, finest first, e.g. 4,8,16,16,16")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--ckpt", default=None, help="checkpoint output path")
    p.add_argument("--log", default=None, help="line-delimited JSON loss log path")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lapreg",
        description="Unsupervised deformable 3D registration with local-attention pyramids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--count", type=int, default=20)
    p_synth.add_argument("--size", type=_size_tuple, default=(32, 32, 32),
                         help="grid size, e.g. 32 or 32,32,32 (divisible by 16)")
    p_synth.add_argument("--labels", type=int, default=4, dest="n_labels")
    p_synth.add_argument("--max-disp", type=float, default=3.0, dest="max_disp")
    p_synth.add_argument("--translation-probe", action="store_true",
                         help="append one constant-translation probe pair")
    p_synth.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train on a dataset directory")
    p_train.add_argument("--data", required=True, help="dataset dir or manifest.json")
    _add_train_flags(p_train)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_reg = sub.add_parser("register", help="register one moving/fixed pair")
    p_reg.add_argument("--moving", required=True)
    p_reg.add_argument("--fixed", required=True)
    p_reg.add_argument("--moving-labels", default=None, dest="moving_labels")
    p_reg.add_argument("--ckpt", required=True)
    p_reg.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("evaluate", help="register and score a whole dataset")
    p_eval.add_argument("--data", required=True, help="dataset dir or manifest.json")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--out", default=None, help="report file (stdout otherwise)")
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "synth":
        pairs, manifest = generate_dataset(
            args.seed, args.count, size=args.size, n_labels=args.n_labels,
            max_disp=args.max_disp,
        )
        if args.translation_probe:
            pairs.append(generate_translation_pair(args.seed + args.count, size=args.size,
                                                   n_labels=args.n_labels))
            manifest["translation_probe"] = True
        path = save_dataset(pairs, manifest, args.out)
        print(f"wrote {len(pairs)} pairs to {path.parent}")
        return 0

    if args.command == "train":
        from .io import load_checkpoint
        from .synth import load_dataset

        config = build_config(args)
        pairs, _manifest = load_dataset(args.data)
        resume = load_checkpoint(args.resume) if args.resume else None
        _model, trace = train(config, pairs, resume=resume, progress=True)
        if trace:
            last = trace[-1]
            print(f"finished at step {last['step']}: total {last['total']:+.4f}")
        return 0

    if args.command == "register":
        register(args.moving, args.fixed, args.ckpt, args.out,
                 moving_labels_path=args.moving_labels)
        return 0

    if args.command == "evaluate":
        text, _reports, status = evaluate(args.data, args.ckpt, out_path=args.out)
        print(text, end="")
        return status

    raise ValidationError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LapregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
