"""Command-line entry points: train a model, then decode candidates.

train:    arithtrainer train --train T.jsonl --val V.jsonl --out model.pt
generate: arithtrainer generate --model model.pt --tasks TEST.jsonl \
              --out candidates.jsonl
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import load_tasks
from .generate import (
    DEFAULT_N_CANDIDATES,
    DEFAULT_TEMPERATURE,
    generate_candidates,
    write_candidate_file,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, train
from .vocab import Vocab


def _cmd_train(args) -> int:
    train_tasks = load_tasks(args.train)
    val_tasks = load_tasks(args.val)
    vocab = Vocab.default()
    model_cfg = ModelConfig(
        vocab_size=vocab.size,
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_layers=args.n_layers,
        d_ff=4 * args.d_model,
        n_pairs=args.n_pairs,
        max_len=args.max_len,
    )
    train_cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
    )
    try:
        result = train(train_tasks, val_tasks, model_cfg, train_cfg, vocab)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    extra = {
        "epochs": result.epochs,
        "steps": result.steps,
        "tokens": result.tokens,
        "best_val_loss": result.best_val_loss,
        "flops": result.flops,
        "model_id": args.model_id,
    }
    save_checkpoint(args.out, result.model, vocab, extra)
    print(json.dumps(extra, indent=2, sort_keys=True))
    return 0


def _cmd_generate(args) -> int:
    model, vocab, extra = load_checkpoint(args.model)
    tasks = load_tasks(args.tasks)
    rows = generate_candidates(
        model, vocab, tasks, n=args.n, temperature=args.temperature, seed=args.seed
    )
    write_candidate_file(
        args.out, rows, args.temperature, args.seed,
        str(extra.get("model_id", "")), float(extra.get("flops", 0.0)),
    )
    print(json.dumps({"tasks": len(rows), "n": args.n, "out": args.out}))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = argparse.ArgumentParser(prog="arithtrainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an exported split")
    p.add_argument("--train", required=True, help="train task JSONL")
    p.add_argument("--val", required=True, help="validation task JSONL")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=3)
    p.add_argument("--n-pairs", type=int, default=64)
    p.add_argument("--max-len", type=int, default=48)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-id", default="arithtrainer")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="decode candidates for a task file")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--tasks", required=True, help="task JSONL to solve")
    p.add_argument("--out", required=True, help="candidate JSONL output")
    p.add_argument("--n", type=int, default=DEFAULT_N_CANDIDATES)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
