"""Cross-module invariants that need the committed toy corpus."""

import numpy as np

from psub.aggregate import FeatureRecord, aggregate_entropy
from psub.forward import apply_layer, forward_with_selection
from psub.infer import evaluate_dataset
from psub.modelio import load_idx, load_model, propagate_shapes
from psub.search import BudgetConfig, search
from psub.tensor import nearest_resize

from conftest import make_conv_net

SEEDS = (0, 1, 2, 3, 4)


def test_shape_propagation_matches_runtime(fixtures_dir):
    """Symbolic shapes agree with executed shapes on every corpus layer."""
    rng = np.random.default_rng(0)
    graphs = [load_model(fixtures_dir / f"model_seed{s}.psb") for s in SEEDS]
    graphs.append(make_conv_net(rng, with_maxpool=True))
    graphs.append(make_conv_net(rng, channels=(3, 4), rates=((2, 2), (3, 3)),
                                input_hw=12))
    for g in graphs:
        predicted = propagate_shapes(g)
        x = rng.uniform(0, 1, g.input_shape).astype(np.float32)
        out = x
        for layer, expect in zip(g.layers, predicted):
            out = apply_layer(layer, out)
            assert out.shape == expect, f"{layer.name}: {out.shape} != {expect}"


def test_alignment_never_clearly_worse_than_resize_only(fixtures_dir):
    """Shifted alignment stays within 0.5 top-1 points of resize-only.

    Resize-only aggregation drops the per-state shift; with spatially
    aggregated features the shifted registration must not lose more than
    half a point averaged over the five toy models.
    """
    ds = load_idx(fixtures_dir / "test-images.idx",
                  fixtures_dir / "test-labels.idx")
    n = 400
    cfg = BudgetConfig(b_ours=4, layer_window=(1, 3))
    gaps = []
    for seed in SEEDS:
        g = load_model(fixtures_dir / f"model_seed{seed}.psb")
        aligned_hits = resize_hits = 0
        _, in_h, in_w = g.input_shape
        from psub.forward import run_head
        for i in range(n):
            x, y = ds[i]
            records = search(g, x, cfg)
            aligned = aggregate_entropy(records, g.num_classes)
            aligned_hits += int(np.argmax(run_head(g, aligned)) == y)
            resized = []
            for r in records:
                raw, _ = forward_with_selection(g, x, r.selection)
                resized.append(FeatureRecord(
                    r.selection, nearest_resize(raw, in_h, in_w),
                    r.logits, r.entropy, r.criterion))
            blended = aggregate_entropy(resized, g.num_classes)
            resize_hits += int(np.argmax(run_head(g, blended)) == y)
        gaps.append(100.0 * (aligned_hits - resize_hits) / n)
    assert float(np.mean(gaps)) >= -0.5, gaps
