"""End-to-end prediction: search, align, aggregate, classify.

The pipeline per image is search → aligned feature set → aggregation →
classifier head. Optional test-time augmentation runs the whole pipeline on
each augmented view (identity and horizontal flip) and averages the logits;
the total per-image forward budget is then B_tta × B_ours.

Dataset evaluation parallelizes across images but merges results in dataset
order, so outputs are independent of scheduling. The PSUB_THREADS
environment variable caps the worker count (0 or unset = auto).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aggregate import (AggregatorParams, aggregate_attention,
                        aggregate_avg, aggregate_entropy)
from .forward import run_head
from .modelio import ModelGraph
from .search import BudgetConfig, search

AGGREGATE_MODES = ("avg", "entropy", "attention")
TTA_MODES = ("none", "hflip")


def hflip(x: np.ndarray) -> np.ndarray:
    """Mirror a C×H×W tensor along its width axis."""
    return np.ascontiguousarray(np.asarray(x)[:, :, ::-1])


def predict(graph: ModelGraph, x: np.ndarray, cfg: BudgetConfig,
            mode: str = "entropy", params: AggregatorParams | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict logits for one image under the given budget and aggregator."""
    if mode not in AGGREGATE_MODES:
        raise ValueError(f"aggregate mode '{mode}' not one of {AGGREGATE_MODES}")
    if mode == "attention" and params is None:
        raise ValueError("attention aggregation requires aggregator params")
    records = search(graph, x, cfg, agg_params=params, rng=rng)
    if mode == "avg":
        feature = aggregate_avg([r.aligned_feature for r in records])
    elif mode == "entropy":
        feature = aggregate_entropy(records, graph.num_classes)
    else:
        feature = aggregate_attention(records, params)
    return run_head(graph, feature)


def tta_combine(logit_sets: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-view logits."""
    if not logit_sets:
        raise ValueError("tta_combine: no logits to combine")
    k = np.asarray(logit_sets[0]).shape
    for lg in logit_sets:
        if np.asarray(lg).shape != k:
            raise ValueError(
                f"tta_combine: logits shape {np.asarray(lg).shape} != {k}")
    out = np.zeros(k, dtype=np.float64)
    for lg in logit_sets:
        out += lg
    return (out / len(logit_sets)).astype(np.asarray(logit_sets[0]).dtype)


def tta_views(x: np.ndarray, tta: str) -> list[np.ndarray]:
    if tta not in TTA_MODES:
        raise ValueError(f"tta mode '{tta}' not one of {TTA_MODES}")
    if tta == "hflip":
        return [x, hflip(x)]
    return [x]


def predict_tta(graph: ModelGraph, x: np.ndarray, cfg: BudgetConfig,
                mode: str, tta: str, params: AggregatorParams | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    views = tta_views(x, tta)
    return tta_combine([predict(graph, v, cfg, mode, params, rng) for v in views])


def worker_count() -> int:
    raw = os.environ.get("PSUB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PSUB_THREADS must be an integer, got '{raw}'")
    if n < 0:
        raise ValueError(f"PSUB_THREADS must be >= 0, got {n}")
    if n == 0:
        return min(os.cpu_count() or 1, 8)
    return n


@dataclass
class EvalResult:
    predictions: np.ndarray
    correct: int
    images: int
    forward_passes_per_image: int

    @property
    def top1(self) -> float:
        return 100.0 * self.correct / max(self.images, 1)


def evaluate_dataset(graph: ModelGraph, dataset, cfg: BudgetConfig,
                     mode: str = "entropy", tta: str = "none",
                     params: AggregatorParams | None = None,
                     seed: int = 0) -> EvalResult:
    """Top-1 accuracy of the pipeline over a dataset.

    Per-image RNG streams derive from (seed, image index), so results do not
    depend on worker scheduling; per-image outputs merge in dataset order.
    """
    n = len(dataset)

    def one(i: int) -> int:
        x, _ = dataset[i]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        logits = predict_tta(graph, x, cfg, mode, tta, params, rng)
        return int(np.argmax(logits))

    workers = worker_count()
    if workers <= 1 or n <= 1:
        preds = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, range(n)))

    preds_arr = np.asarray(preds, dtype=np.int64)
    labels = np.asarray([dataset[i][1] for i in range(n)], dtype=np.int64)
    if tta not in TTA_MODES:
        raise ValueError(f"tta mode '{tta}' not one of {TTA_MODES}")
    b_tta = 2 if tta == "hflip" else 1
    return EvalResult(predictions=preds_arr,
                      correct=int((preds_arr == labels).sum()),
                      images=n,
                      forward_passes_per_image=b_tta * cfg.b_ours)
