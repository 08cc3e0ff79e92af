"""Command-line interface: gen / train / eval / infer.

Exit codes: 0 success, 1 usage error, 2 data or parse error.
"""

from __future__ import annotations

import argparse
import sys

from .dataio import DataFormatError

USAGE_ERROR = 1
DATA_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise _UsageError(message)


def _parse_mix(text: str) -> dict[str, float]:
    mix: dict[str, float] = {}
    for part in text.split(","):
        if ":" not in part:
            raise _UsageError(f"bad mix entry {part!r}; expected scenario:fraction")
        name, value = part.split(":", 1)
        try:
            mix[name.strip()] = float(value)
        except ValueError as exc:
            raise _UsageError(f"bad mix fraction {value!r}") from exc
    return mix


def _build_parser() -> _Parser:
    parser = _Parser(prog="xmodal",
                     description="RGB + thermal cross-modal depth estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--mix", default="day:0.4,night:0.4,rain:0.2")

    tr = sub.add_parser("train", help="train on a generated corpus")
    tr.add_argument("--config", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--config", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", required=True)

    inf = sub.add_parser("infer", help="fused depth for one RGB/thermal pair")
    inf.add_argument("--rgb", required=True)
    inf.add_argument("--thr", required=True)
    inf.add_argument("--calib", required=True)
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--emit-confidence", action="store_true")

    return parser


def _run(args) -> int:
    from . import pipeline, scenes

    if args.command == "gen":
        mix = _parse_mix(args.mix)
        index = scenes.generate_corpus(args.n, (0.8, 0.1, 0.1), args.seed, mix, args.out)
        counts = {s: len(ids) for s, ids in index.splits.items()}
        print(f"wrote {sum(counts.values())} samples to {args.out} "
              f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
        return 0

    if args.command == "train":
        config = pipeline.parse_config(args.config)
        result = pipeline.train(config)
        print(f"final checkpoint: {result.final_checkpoint}")
        print(f"loss log: {result.log_path}")
        return 0

    if args.command == "eval":
        config = pipeline.parse_config(args.config)
        results = pipeline.evaluate(config, args.ckpt, args.split)
        for (method, scenario), record in sorted(results.items()):
            print(f"{method:>5s} {scenario:>6s}  abs_rel={record.abs_rel:.4f} "
                  f"rmse={record.rmse:.3f} d1={record.delta1:.3f}")
        return 0

    if args.command == "infer":
        out = pipeline.infer(args.rgb, args.thr, args.calib, args.ckpt, args.out,
                             emit_confidence=args.emit_confidence)
        print(f"wrote {out}")
        return 0

    raise _UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
