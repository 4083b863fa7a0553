"""Forward passes parameterized by a phase-selection vector, plus alignment.

A ``Selection`` assigns one (s_h, s_w) phase to each searchable subsample
layer (the subsample layers in the backbone, in network order). The all-zero
selection reproduces the conventional strided forward pass; nonzero phases
recover activations the default pass discards.

`neighbor_batch` evaluates all sibling phases of one layer from a single
shared prefix computation (the stride-1 activation before that layer is
computed once and every phase is gathered from it), which is numerically
identical to independent per-state forwards.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .modelio import LayerSpec, ModelGraph


@dataclass(frozen=True)
class Selection:
    """One state of the search space: a phase per searchable subsample layer."""

    phases: tuple[tuple[int, int], ...]
    rates: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.phases) != len(self.rates):
            raise ValueError(
                f"selection has {len(self.phases)} phases for "
                f"{len(self.rates)} subsample layers")
        for (sh, sw), (rh, rw) in zip(self.phases, self.rates):
            if not (0 <= sh < rh and 0 <= sw < rw):
                raise ValueError(
                    f"phase ({sh}, {sw}) out of range for rates ({rh}, {rw})")

    @property
    def is_default(self) -> bool:
        return all(p == (0, 0) for p in self.phases)

    def replaced(self, layer: int, phase: tuple[int, int]) -> "Selection":
        """Copy with the 1-based layer's phase replaced."""
        phases = list(self.phases)
        phases[layer - 1] = phase
        return Selection(tuple(phases), self.rates)


def default_selection(graph: ModelGraph) -> Selection:
    rates = tuple(graph.searchable_rates())
    return Selection(tuple((0, 0) for _ in rates), rates)


def selection_space(graph: ModelGraph) -> list[Selection]:
    """Every state, ordered lexicographically by phase tuples."""
    rates = tuple(graph.searchable_rates())
    axes = [[(sh, sw) for sh in range(rh) for sw in range(rw)]
            for rh, rw in rates]
    return [Selection(tuple(combo), rates) for combo in itertools.product(*axes)]


def space_size(graph: ModelGraph) -> int:
    n = 1
    for rh, rw in graph.searchable_rates():
        n *= rh * rw
    return n


def apply_layer(layer: LayerSpec, x: np.ndarray,
                phase: tuple[int, int] | None = None) -> np.ndarray:
    """Apply one layer; subsample layers take an explicit phase (default 0)."""
    if layer.kind == "conv2d":
        return T.conv2d_s1(x, layer.weight, layer.bias, layer.params.get("pad", 0))
    if layer.kind == "sliding_max":
        return T.sliding_max(x, layer.params["k"])
    if layer.kind == "relu":
        return T.relu(x)
    if layer.kind == "subsample":
        sh, sw = phase if phase is not None else (0, 0)
        return T.subsample_phase(x, T.PhaseIndex(
            sh, sw, layer.params["rate_h"], layer.params["rate_w"]))
    if layer.kind == "global_avg_pool":
        return T.global_avg_pool(x)
    if layer.kind == "flatten":
        return np.ascontiguousarray(x.reshape(-1))
    if layer.kind == "dense":
        return T.dense_head(x, layer.weight, layer.bias)
    raise ValueError(f"layer '{layer.name}': unhandled kind '{layer.kind}'")


def _check_input(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != graph.input_shape:
        raise ValueError(
            f"input shape {x.shape} does not match model input "
            f"{graph.input_shape}")
    return x


def _run_layers(layers, x: np.ndarray, phases) -> np.ndarray:
    """Run a layer slice; ``phases`` feeds subsample layers in order."""
    it = iter(phases)
    for layer in layers:
        if layer.kind == "subsample":
            x = apply_layer(layer, x, next(it, (0, 0)))
        else:
            x = apply_layer(layer, x)
    return x


def run_head(graph: ModelGraph, feature: np.ndarray) -> np.ndarray:
    """Apply the classifier head (layers at and after head_index)."""
    return _run_layers(graph.head(), feature, ())


def forward_with_selection(graph: ModelGraph, x: np.ndarray,
                           s: Selection) -> tuple[np.ndarray, np.ndarray]:
    """Run the backbone under selection ``s`` and the head on its output.

    Returns the raw (unaligned) backbone output and the logits. Subsample
    layers inside the head, if any, stay at phase zero.
    """
    x = _check_input(graph, x)
    rates = tuple(graph.searchable_rates())
    if s.rates != rates:
        raise ValueError(f"selection rates {s.rates} do not match model {rates}")
    feature = _run_layers(graph.backbone(), x, s.phases)
    logits = run_head(graph, feature)
    return feature, logits


def neighbor_batch(graph: ModelGraph, x: np.ndarray, s: Selection, l: int,
                   skip: frozenset | set = frozenset()
                   ) -> list[tuple[Selection, np.ndarray, np.ndarray]]:
    """All states differing from ``s`` only at layer ``l`` by a nonzero phase.

    ``l`` is 1-based in searchable-layer order and must currently sit at
    phase (0, 0) in ``s``. The activation feeding layer ``l`` is computed
    once and every phase is gathered from it, so results match independent
    `forward_with_selection` calls exactly. Selections in ``skip`` are not
    evaluated (used by the search to avoid repeated work).
    """
    x = _check_input(graph, x)
    rates = graph.searchable_rates()
    n = len(rates)
    if not 1 <= l <= n:
        raise ValueError(f"layer index {l} out of range 1..{n}")
    if s.phases[l - 1] != (0, 0):
        raise ValueError(
            f"layer {l} already holds nonzero phase {s.phases[l - 1]}; "
            "expansion only perturbs a default phase")

    backbone = graph.backbone()
    sub_positions = [i for i, layer in enumerate(backbone)
                     if layer.kind == "subsample"]
    split = sub_positions[l - 1]

    prefix = _run_layers(backbone[:split], x, s.phases[:l - 1])
    sub = backbone[split]
    suffix = backbone[split + 1:]
    rh, rw = rates[l - 1]

    out = []
    for sh in range(rh):
        for sw in range(rw):
            if (sh, sw) == (0, 0):
                continue
            ns = s.replaced(l, (sh, sw))
            if ns in skip:
                continue
            branch = apply_layer(sub, prefix, (sh, sw))
            feature = _run_layers(suffix, branch, s.phases[l:])
            logits = run_head(graph, feature)
            out.append((ns, feature, logits))
    return out


def offset(s: Selection) -> tuple[int, int]:
    """Cumulative input-resolution displacement of a selection, per axis.

    Δ = s₁ + s₂·R⁽¹⁾ + s₃·R⁽¹⁾R⁽²⁾ + …, evaluated independently for height
    and width: each layer's phase steps the sampling lattice by the product
    of all preceding rates.
    """
    dy = dx = 0
    scale_h = scale_w = 1
    for (sh, sw), (rh, rw) in zip(s.phases, s.rates):
        dy += sh * scale_h
        dx += sw * scale_w
        scale_h *= rh
        scale_w *= rw
    return dy, dx


def align_feature(graph: ModelGraph, raw: np.ndarray, s: Selection) -> np.ndarray:
    """Register a state's backbone output with the default state's grid.

    The raw map is nearest-resized to the model input resolution, then its
    content is moved down/right by the selection's offset so that the sample
    drawn from input location p occupies the block starting at p — exactly
    where the default state's upsampled map places its own samples. (An
    impulse fed through an identity-kernel stack lands at its true input
    location for every state; see the alignment tests.)
    """
    _, in_h, in_w = graph.input_shape
    up = T.nearest_resize(raw, in_h, in_w)
    dy, dx = offset(s)
    if dy == 0 and dx == 0:
        return up
    return T.translate_clamp(up, -dy, -dx)
