"""Shared builders for toy model graphs and committed fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from psub.modelio import LayerSpec, ModelGraph

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def make_conv_net(rng: np.random.Generator, channels=(4, 6), rates=((2, 2), (2, 2)),
                  input_hw: int = 8, num_classes: int = 3, kernel: int = 3,
                  with_maxpool: bool = False) -> ModelGraph:
    """Random small conv net with one subsample per conv stage and a GAP head."""
    layers = []
    in_ch = 1
    pad = kernel // 2
    for i, (out_ch, (rh, rw)) in enumerate(zip(channels, rates)):
        weight = rng.normal(0.0, 0.4, (out_ch, in_ch, kernel, kernel)).astype(np.float32)
        bias = rng.normal(0.0, 0.1, out_ch).astype(np.float32)
        layers.append(LayerSpec(f"conv{i}", "conv2d", {"pad": pad}, weight, bias))
        if with_maxpool and i == 0:
            layers.append(LayerSpec("pool0", "sliding_max", {"k": 2}))
        layers.append(LayerSpec(f"sub{i}", "subsample", {"rate_h": rh, "rate_w": rw}))
        layers.append(LayerSpec(f"relu{i}", "relu"))
        in_ch = out_ch
    head_index = len(layers)
    layers.append(LayerSpec("gap", "global_avg_pool"))
    fc_w = rng.normal(0.0, 0.5, (num_classes, in_ch)).astype(np.float32)
    fc_b = np.zeros(num_classes, dtype=np.float32)
    layers.append(LayerSpec("fc", "dense", {}, fc_w, fc_b))
    return ModelGraph(tuple(layers), head_index, (1, input_hw, input_hw), num_classes)


def make_identity_net(rates, input_hw: int, num_classes: int = 2) -> ModelGraph:
    """Stack of 1×1 identity convs and subsample layers (alignment oracle)."""
    layers = []
    for i, (rh, rw) in enumerate(rates):
        layers.append(LayerSpec(f"conv{i}", "conv2d", {"pad": 0},
                                np.ones((1, 1, 1, 1), np.float32),
                                np.zeros(1, np.float32)))
        layers.append(LayerSpec(f"sub{i}", "subsample",
                                {"rate_h": rh, "rate_w": rw}))
    head_index = len(layers)
    layers.append(LayerSpec("gap", "global_avg_pool"))
    layers.append(LayerSpec("fc", "dense", {},
                            np.ones((num_classes, 1), np.float32),
                            np.zeros(num_classes, np.float32)))
    return ModelGraph(tuple(layers), head_index, (1, input_hw, input_hw),
                      num_classes)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    if not FIXTURES.is_dir():
        pytest.skip("committed fixtures directory missing")
    return FIXTURES
