"""Golden fixture emission: per-selection logits pinned to JSON.

Selections cover the default state, every single-layer phase perturbation,
and five seeded deep states (two or more nonzero layers). The default state
gets the tight 1e-6 tolerance; other states get 1e-4, absorbing 32-bit
accumulation-order differences between implementations.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .idxio import read_idx
from .psb import read_model
from .refforward import forward_selection, image_to_input

DEFAULT_TOL = 1e-4
DEFAULT_STATE_TOL = 1e-6


def backbone_rates(header: dict) -> list[tuple[int, int]]:
    head_index = header["meta"]["head_index"]
    return [(d["params"]["rate_h"], d["params"]["rate_w"])
            for d in header["layers"][:head_index] if d["kind"] == "subsample"]


def fixture_selections(rates: list[tuple[int, int]], seed: int = 0,
                       deep_states: int = 5) -> list[list[list[int]]]:
    selections = [[[0, 0] for _ in rates]]
    for layer, (rh, rw) in enumerate(rates):
        for sh in range(rh):
            for sw in range(rw):
                if (sh, sw) == (0, 0):
                    continue
                sel = [[0, 0] for _ in rates]
                sel[layer] = [sh, sw]
                selections.append(sel)
    rng = np.random.default_rng(seed)
    seen = {tuple(map(tuple, s)) for s in selections}
    while deep_states > 0:
        sel = [[int(rng.integers(0, rh)), int(rng.integers(0, rw))]
               for rh, rw in rates]
        nonzero = sum(1 for p in sel if p != [0, 0])
        key = tuple(map(tuple, sel))
        if nonzero >= 2 and key not in seen:
            seen.add(key)
            selections.append(sel)
            deep_states -= 1
    return selections


def emit_goldens(model_path, images_path, labels_path, count: int,
                 out_path, seed: int = 0) -> int:
    """Write fixtures for the first ``count`` images; returns fixture count."""
    header, tensors = read_model(model_path)
    rates = backbone_rates(header)
    head_index = header["meta"]["head_index"]
    images, _ = read_idx(images_path, labels_path)
    count = min(count, len(images))
    selections = fixture_selections(rates, seed=seed)

    rel_images = os.path.relpath(images_path, start=Path(out_path).parent)
    fixtures = []
    for index in range(count):
        x = image_to_input(images[index])
        for sel in selections:
            logits = forward_selection(header["layers"], tensors, x,
                                       [tuple(p) for p in sel], head_index)
            is_default = all(p == [0, 0] for p in sel)
            fixtures.append({
                "input": f"{rel_images}#{index}",
                "selection": sel,
                "logits": [float(v) for v in logits],
                "tol": DEFAULT_STATE_TOL if is_default else DEFAULT_TOL,
            })
    Path(out_path).write_text(
        json.dumps(fixtures, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return len(fixtures)
