"""Trainer command line: `nesycd-trainer train ...` and `nesycd-trainer serve ...`."""

from __future__ import annotations

import argparse
import sys

from .data import SchemaError
from .model import ModelConfig
from .train import Hyperparameters, JobError, TrainerJob, read_training_log, stage_defaults, train


def cmd_train(args: argparse.Namespace) -> int:
    defaults = stage_defaults(args.stage)
    hp = Hyperparameters(
        learning_rate=args.learning_rate if args.learning_rate is not None else defaults.learning_rate,
        epochs=args.epochs if args.epochs is not None else defaults.epochs,
        batch_size=args.batch_size if args.batch_size is not None else defaults.batch_size,
        adapter_rank=args.rank if args.rank is not None else defaults.adapter_rank,
    )
    job = TrainerJob(
        stage=args.stage,
        training_file=args.file,
        output_dir=args.out,
        base_checkpoint=args.base_checkpoint,
        model=ModelConfig(dim=args.dim, n_layers=args.layers, max_len=args.max_len),
        hyperparameters=hp,
        seed=args.seed,
    )
    out_dir = train(job)
    log = read_training_log(out_dir)
    print(
        f"train: {args.stage} over {args.file} -> {out_dir} "
        f"({len(log)} logged steps, loss {log[0]['loss']:.4f} -> {log[-1]['loss']:.4f})"
    )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .serve import CheckpointServer

    server = CheckpointServer(args.checkpoint, host=args.host, port=args.port)
    print(f"serving {args.checkpoint} on {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nesycd-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune on an emitted training file")
    p.set_defaults(fn=cmd_train)
    p.add_argument("--stage", choices=["primary_learning", "enhanced_learning"],
                   default="primary_learning")
    p.add_argument("--file", required=True, help="training JSONL from the pipeline builder")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--base-checkpoint", help="primary-learning checkpoint (required for S_E)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--rank", type=int, help="adapter rank")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="serve a checkpoint over chat completions")
    p.set_defaults(fn=cmd_serve)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8960)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, JobError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
