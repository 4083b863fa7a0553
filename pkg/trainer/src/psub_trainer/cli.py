"""Trainer CLI: synthesize datasets, train recipes, emit goldens."""

from __future__ import annotations

import argparse
import sys

from .glyphs import synth_dataset
from .goldens import emit_goldens
from .idxio import write_idx
from .netdef import ToyModelRecipe
from .psb import write_model
from .train import AccuracyBandMissed, train_toy_model


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psub-trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic glyph dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--out-images", required=True)
    p.add_argument("--out-labels", required=True)

    p = sub.add_parser("train", help="train a recipe and export PSB1 weights")
    p.add_argument("--recipe", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the recipe's seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("goldens", help="emit golden fixtures for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    images, labels = synth_dataset(args.count, args.seed, args.noise)
    write_idx(images, labels, args.out_images, args.out_labels)
    print(f"wrote {args.count} images to {args.out_images}")
    return 0


def cmd_train(args) -> int:
    recipe = ToyModelRecipe.load(args.recipe)
    if args.seed is not None:
        recipe.seed = args.seed
    try:
        net, report = train_toy_model(recipe)
    except AccuracyBandMissed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    docs, tensors = net.export_docs()
    write_model(args.out, docs, tensors,
                input_shape=(1, recipe.input_size, recipe.input_size),
                num_classes=recipe.num_classes, head_index=net.head_index)
    acc = report.get("test_acc")
    acc_text = f"{acc:.2f}%" if acc is not None else "unchecked (0 epochs)"
    print(f"seed {recipe.seed}: test accuracy {acc_text}; wrote {args.out}")
    return 0


def cmd_goldens(args) -> int:
    n = emit_goldens(args.model, args.images, args.labels, args.count,
                     args.out, seed=args.seed)
    print(f"wrote {n} fixtures to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"synth-data": cmd_synth, "train": cmd_train,
            "goldens": cmd_goldens}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
