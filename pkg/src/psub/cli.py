"""Command-line harness: budget sweeps, golden verification, training.

Subcommands::

    psub infer      single-image prediction, JSON to stdout
    psub eval       budget-sweep evaluation, CSV report
    psub verify     check golden fixtures against the engine
    psub train-agg  train the attention aggregator, write a params file

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
format error. All outputs are byte-reproducible for a fixed seed; the CSV
timing column is measured wall time unless disabled with ``--timing off``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import modelio
from .aggregate import load_aggregator, save_aggregator
from .forward import Selection, forward_with_selection
from .infer import evaluate_dataset, predict_tta, tta_views
from .modelio import ModelFormatError, ModelValidationError, load_golden, load_idx, load_model
from .search import BudgetConfig
from .train import TrainHyper, train_aggregator

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(ValueError):
    pass


def _parse_budgets(raw: str) -> list[int]:
    try:
        budgets = [int(b) for b in raw.split(",") if b]
    except ValueError:
        raise UsageError(f"--budgets must be comma-separated integers, got '{raw}'")
    if not budgets or any(b < 1 for b in budgets):
        raise UsageError(f"budgets must be positive, got {budgets}")
    if budgets != sorted(budgets):
        raise UsageError(f"budgets must be sorted ascending, got {budgets}")
    return budgets


def _parse_window(raw: str | None) -> tuple[int, int] | None:
    if raw is None:
        return None
    try:
        lo, hi = raw.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise UsageError(f"--layer-window must look like 'a..b', got '{raw}'")


def _load_params(path: str | None):
    return load_aggregator(path) if path else None


def _budget_config(args, budget: int) -> BudgetConfig:
    return BudgetConfig(b_ours=budget,
                        layer_window=_parse_window(args.layer_window),
                        criterion_kind=args.criterion)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="PSB1 model file")
    p.add_argument("--criterion", default="entropy",
                   choices=["entropy", "learned", "random", "offset"])
    p.add_argument("--aggregate", default="entropy",
                   choices=["avg", "entropy", "attention"])
    p.add_argument("--agg-params", default=None, help="PSB1 aggregator params")
    p.add_argument("--layer-window", default=None, metavar="a..b",
                   help="inclusive searchable-layer range (default 2..L-1)")
    p.add_argument("--tta", default="none", choices=["none", "hflip"])
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psub",
        description="Test-time phase search over subsampling layers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="predict one image")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")

    p = sub.add_parser("eval", help="budget-sweep evaluation")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--budgets", default="1,4,8")
    p.add_argument("--out", default=None, help="write CSV here (default stdout)")
    p.add_argument("--timing", default="real", choices=["real", "off"],
                   help="'off' zeroes wall_ms for byte-reproducible output")
    p.add_argument("--limit", type=int, default=0,
                   help="evaluate only the first N images (0 = all)")

    p = sub.add_parser("verify", help="check golden fixtures")
    p.add_argument("--model", required=True)
    p.add_argument("--golden", required=True)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"],
                   help="arithmetic precision for the forward pass")

    p = sub.add_parser("train-agg", help="train the attention aggregator")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--limit", type=int, default=0,
                   help="train on only the first N images (0 = all)")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--out", required=True, help="output PSB1 params file")
    return parser


def cmd_infer(args) -> int:
    graph = load_model(args.model)
    if args.labels:
        dataset = load_idx(args.images, args.labels)
        x, label = dataset[args.index]
    else:
        dataset = _images_only(args.images)
        x, label = dataset[args.index], None
    cfg = _budget_config(args, args.budget)
    params = _load_params(args.agg_params)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, args.index]))
    logits = predict_tta(graph, x, cfg, args.aggregate, args.tta, params, rng)
    b_total = len(tta_views(x, args.tta)) * args.budget
    doc = {
        "index": args.index,
        "prediction": int(np.argmax(logits)),
        "label": label,
        "logits": [float(f"{v:.6g}") for v in np.asarray(logits, dtype=np.float64)],
        "budget_total": b_total,
    }
    text = json.dumps(doc, sort_keys=True)
    _emit(text + "\n", args.out)
    return EXIT_OK


def _images_only(path):
    raw = Path(path).read_bytes()
    count, rows, cols = modelio._read_idx_header(
        raw, path, modelio.IDX_IMAGE_MAGIC, 3)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    return pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0


def cmd_eval(args) -> int:
    graph = load_model(args.model)
    dataset = load_idx(args.images, args.labels)
    if args.limit:
        dataset = modelio.IdxDataset(images=dataset.images[:args.limit],
                                     labels=dataset.labels[:args.limit])
    budgets = _parse_budgets(args.budgets)
    params = _load_params(args.agg_params)
    if args.aggregate == "attention" and params is None:
        raise UsageError("--aggregate attention requires --agg-params")
    if args.criterion == "learned" and params is None:
        raise UsageError("--criterion learned requires --agg-params")

    lines = ["budget,criterion,aggregate,tta,top1,images,wall_ms"]
    for budget in budgets:
        cfg = _budget_config(args, budget)
        t0 = time.perf_counter()
        result = evaluate_dataset(graph, dataset, cfg, mode=args.aggregate,
                                  tta=args.tta, params=params, seed=args.seed)
        wall_ms = int(round((time.perf_counter() - t0) * 1000))
        if args.timing == "off":
            wall_ms = 0
        lines.append(f"{result.forward_passes_per_image},{args.criterion},"
                     f"{args.aggregate},{args.tta},{result.top1:.2f},"
                     f"{result.images},{wall_ms}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    graph = load_model(args.model)
    fixtures = load_golden(args.golden, graph)
    dtype = np.float64 if args.dtype == "f64" else np.float32
    golden_dir = Path(args.golden).parent
    rates = tuple(graph.searchable_rates())

    image_cache: dict[str, np.ndarray] = {}
    failures = 0
    for i, fx in enumerate(fixtures):
        img_path = fx.images_path
        if not Path(img_path).is_absolute():
            img_path = str(golden_dir / img_path)
        if img_path not in image_cache:
            image_cache[img_path] = _images_only(img_path)
        images = image_cache[img_path]
        if not 0 <= fx.image_index < len(images):
            raise ModelValidationError(
                f"fixture {i}: image index {fx.image_index} out of range "
                f"for {len(images)} images")
        x = images[fx.image_index].astype(dtype)
        s = Selection(fx.selection, rates)
        _, logits = forward_with_selection(graph, x, s)
        dev = float(np.max(np.abs(np.asarray(logits, dtype=np.float64) - fx.logits)))
        status = "ok" if dev <= fx.tol else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"fixture {i:3d} image {fx.image_index} selection "
              f"{list(fx.selection)} max_abs_dev {dev:.3e} tol {fx.tol:g} {status}")
    print(f"{len(fixtures) - failures}/{len(fixtures)} fixtures passed")
    return EXIT_OK if failures == 0 else EXIT_VERIFY_FAILED


def cmd_train_agg(args) -> int:
    graph = load_model(args.model)
    dataset = load_idx(args.images, args.labels)
    n = len(dataset)
    if args.limit:
        n = min(n, args.limit)
    n_val = int(n * args.val_frac)
    n_train = n - n_val
    train_set = modelio.IdxDataset(images=dataset.images[:n_train],
                                   labels=dataset.labels[:n_train])
    val_set = None
    if n_val > 0:
        val_set = modelio.IdxDataset(images=dataset.images[n_train:n],
                                     labels=dataset.labels[n_train:n])

    cfg = _budget_config(args, args.budget)
    hyper = TrainHyper(lr=args.lr, epochs=args.epochs, batch=args.batch,
                       seed=args.seed, temperature=args.temperature,
                       weight_decay=args.weight_decay)
    params, report = train_aggregator(graph, train_set, cfg, hyper, val_set)
    save_aggregator(params, args.out)
    print(f"train nll {report.initial_train_nll:.6f} -> {report.final_train_nll:.6f}")
    if report.initial_val_nll is not None:
        print(f"val   nll {report.initial_val_nll:.6f} -> {report.final_val_nll:.6f}")
    print(f"params written to {args.out}")
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"infer": cmd_infer, "eval": cmd_eval,
                "verify": cmd_verify, "train-agg": cmd_train_agg}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, ModelValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
