"""Greedy best-first search over the phase-selection state space.

States are selection vectors; the search grows a visited set from the
default state under a forward-pass budget. A min-priority queue (FIFO on
ties for determinism) orders states by a pluggable criterion — lower means
more promising:

* ``entropy`` — Shannon entropy of the state's predicted class distribution;
* ``learned`` — reciprocal of the attention mass the state receives in the
  aggregation module's attention matrix over the visited set;
* ``random`` — a seeded uniform draw (ablation baseline);
* ``offset``  — the state's cumulative displacement Δ_h + Δ_w (ablation
  baseline).

Expanding a state at layer l evaluates every sibling phase of that layer in
one batch (shared prefix). Layers are expanded top-down (smallest eligible
layer index first); a dictionary of expanded layers per state prevents
re-expansion, and states are memoized so no selection is evaluated twice.
A popped state with no eligible layer left is skipped. The search finally
returns the ``b_ours`` visited states with the lowest criterion, with the
default state force-included so a budget of one reduces to standard
inference.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregate import AggregatorParams, FeatureRecord, attention_matrix_from_pooled
from .forward import (Selection, align_feature, apply_layer,
                      default_selection, forward_with_selection,
                      neighbor_batch, offset, run_head, selection_space,
                      space_size)
from .modelio import ModelGraph

CRITERIA = ("entropy", "learned", "random", "offset")

EXHAUSTIVE_LIMIT = 4096


@dataclass(frozen=True)
class BudgetConfig:
    """Search budget, layer window, and criterion choice.

    ``layer_window`` is an inclusive 1-based range of searchable layer
    positions. ``None`` selects the default window 2..L−1 (first and last
    layers omitted), degrading to the full range when fewer than three
    searchable layers exist.
    """

    b_ours: int = 8
    layer_window: tuple[int, int] | None = None
    criterion_kind: str = "entropy"

    def __post_init__(self) -> None:
        if self.b_ours < 1:
            raise ValueError(f"budget must be >= 1, got {self.b_ours}")
        if self.criterion_kind not in CRITERIA:
            raise ValueError(
                f"criterion '{self.criterion_kind}' not one of {CRITERIA}")

    def resolve_window(self, num_layers: int) -> range:
        if self.layer_window is None:
            if num_layers >= 3:
                return range(2, num_layers)
            return range(1, num_layers + 1)
        lo, hi = self.layer_window
        if not (1 <= lo <= hi <= num_layers):
            raise ValueError(
                f"layer window {lo}..{hi} not within 1..{num_layers}")
        return range(lo, hi + 1)


@dataclass
class SearchFrontier:
    """Bookkeeping of one search: visited records, queue, expansion map."""

    records: list[FeatureRecord] = field(default_factory=list)
    index: dict[Selection, int] = field(default_factory=dict)
    expanded: dict[Selection, set[int]] = field(default_factory=dict)
    expansion_log: list[tuple[Selection, int]] = field(default_factory=list)

    def add(self, record: FeatureRecord) -> None:
        self.index[record.selection] = len(self.records)
        self.records.append(record)


def criterion_entropy(logits: np.ndarray) -> float:
    """Shannon entropy, in nats, of softmax(logits); lower = more confident."""
    p = T.softmax(np.asarray(logits, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return float(-plogp.sum())


def criterion_learned(w: np.ndarray, index_of_s: int) -> float:
    """Reciprocal of the attention mass state ``index_of_s`` receives.

    ``w`` is the row-stochastic attention matrix over the current visited
    set; the column sum is the total attention paid *to* the state (row sums
    are identically one and carry no information). Zero mass maps to +inf,
    deprioritizing the state.
    """
    colsum = float(np.asarray(w)[:, index_of_s].sum())
    if colsum <= 0.0:
        return float("inf")
    return 1.0 / colsum


def _pool(feature: np.ndarray) -> np.ndarray:
    return T.global_avg_pool(feature.astype(np.float64))


class _Scorer:
    """Assigns criterion values to newly visited records."""

    def __init__(self, cfg: BudgetConfig, agg_params: AggregatorParams | None,
                 rng: np.random.Generator | None):
        self.kind = cfg.criterion_kind
        self.params = agg_params
        self.rng = rng
        self.pooled: list[np.ndarray] = []
        if self.kind == "learned" and agg_params is None:
            raise ValueError("learned criterion requires aggregator params")
        if self.kind == "random" and rng is None:
            self.rng = np.random.default_rng(0)

    def score_batch(self, frontier: SearchFrontier,
                    new_records: list[FeatureRecord]) -> list[float]:
        if self.kind == "entropy":
            return [r.entropy for r in new_records]
        if self.kind == "offset":
            return [float(sum(offset(r.selection))) for r in new_records]
        if self.kind == "random":
            return [float(self.rng.random()) for _ in new_records]
        # learned: attention matrix over the whole visited set, then the
        # reciprocal received-mass of each new state.
        for r in new_records:
            self.pooled.append(_pool(r.aligned_feature))
        w = attention_matrix_from_pooled(np.stack(self.pooled), self.params)
        start = len(frontier.records) - len(new_records)
        return [criterion_learned(w, start + i) for i in range(len(new_records))]


def _make_record(graph: ModelGraph, s: Selection, feature: np.ndarray,
                 logits: np.ndarray) -> FeatureRecord:
    return FeatureRecord(
        selection=s,
        aligned_feature=align_feature(graph, feature, s),
        logits=logits,
        entropy=criterion_entropy(logits),
        criterion=0.0,
    )


def _finalize(rec: FeatureRecord, criterion: float) -> FeatureRecord:
    return FeatureRecord(selection=rec.selection,
                         aligned_feature=rec.aligned_feature,
                         logits=rec.logits, entropy=rec.entropy,
                         criterion=float(criterion))


def search_frontier(graph: ModelGraph, x: np.ndarray, cfg: BudgetConfig,
                    agg_params: AggregatorParams | None = None,
                    rng: np.random.Generator | None = None,
                    ) -> tuple[list[FeatureRecord], SearchFrontier]:
    """Run the budgeted greedy search; return (selected records, frontier)."""
    rates = graph.searchable_rates()
    window = cfg.resolve_window(len(rates))
    scorer = _Scorer(cfg, agg_params, rng)
    frontier = SearchFrontier()

    s0 = default_selection(graph)
    feature, logits = forward_with_selection(graph, x, s0)
    rec0 = _make_record(graph, s0, feature, logits)
    frontier.add(rec0)
    rec0 = _finalize(rec0, scorer.score_batch(frontier, [rec0])[0])
    frontier.records[0] = rec0

    # Heap entries are (criterion, insertion sequence, selection); the
    # sequence number makes ties FIFO. The default state enters at priority
    # zero so it is always expanded first.
    heap: list[tuple[float, int, Selection]] = [(0.0, 0, s0)]
    seq = itertools.count(1)

    def eligible(s: Selection) -> list[int]:
        done = frontier.expanded.setdefault(s, set())
        return [l for l in window
                if l not in done
                and s.phases[l - 1] == (0, 0)
                and rates[l - 1] != (1, 1)]

    while len(frontier.records) <= cfg.b_ours and heap:
        _, _, s = heapq.heappop(heap)
        layers = eligible(s)
        if not layers:
            continue
        l = layers[0]
        frontier.expanded[s].add(l)
        frontier.expansion_log.append((s, l))

        batch = neighbor_batch(graph, x, s, l, skip=frontier.index.keys())
        new_records = []
        for ns, feat, lg in batch:
            rec = _make_record(graph, ns, feat, lg)
            frontier.add(rec)
            new_records.append(rec)
        if new_records:
            scores = scorer.score_batch(frontier, new_records)
            for rec, score in zip(new_records, scores):
                final = _finalize(rec, score)
                frontier.records[frontier.index[rec.selection]] = final
                heapq.heappush(heap, (final.criterion, next(seq), final.selection))
        # A state with eligible layers left goes back on the queue at its
        # own criterion so deeper layers can be expanded later.
        if eligible(s):
            own = frontier.records[frontier.index[s]]
            heapq.heappush(heap, (own.criterion, next(seq), s))

    return _select_lowest(frontier, cfg.b_ours), frontier


def _select_lowest(frontier: SearchFrontier, budget: int) -> list[FeatureRecord]:
    """Lowest-budget records by (criterion, insertion order), default included."""
    order = sorted(range(len(frontier.records)),
                   key=lambda i: (frontier.records[i].criterion, i))
    chosen = order[:budget]
    if 0 not in chosen:
        chosen = [0] + chosen[:budget - 1]
    chosen.sort(key=lambda i: (frontier.records[i].criterion, i))
    return [frontier.records[i] for i in chosen]


def search(graph: ModelGraph, x: np.ndarray, cfg: BudgetConfig,
           agg_params: AggregatorParams | None = None,
           rng: np.random.Generator | None = None) -> list[FeatureRecord]:
    """Budgeted greedy search; returns the selected feature records."""
    records, _ = search_frontier(graph, x, cfg, agg_params, rng)
    return records


def exhaustive_search(graph: ModelGraph, x: np.ndarray,
                      cfg: BudgetConfig | None = None,
                      agg_params: AggregatorParams | None = None,
                      rng: np.random.Generator | None = None,
                      ) -> list[FeatureRecord]:
    """Evaluate and score every state in the space (test oracle).

    Shares computation across states by branching at each subsample layer.
    Results are ordered by (criterion, lexicographic selection). Rejected
    when the state space exceeds ``EXHAUSTIVE_LIMIT``.
    """
    n = space_size(graph)
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"state space has {n} states, exceeding the exhaustive limit "
            f"of {EXHAUSTIVE_LIMIT}")
    cfg = cfg or BudgetConfig(b_ours=n)
    scorer = _Scorer(cfg, agg_params, rng)

    backbone = graph.backbone()
    rates = graph.searchable_rates()
    results: dict[Selection, tuple[np.ndarray, np.ndarray]] = {}

    def walk(layer_idx: int, phase_prefix: tuple, act: np.ndarray) -> None:
        for i in range(layer_idx, len(backbone)):
            layer = backbone[i]
            if layer.kind == "subsample":
                rh, rw = rates[len(phase_prefix)]
                for sh in range(rh):
                    for sw in range(rw):
                        branch = apply_layer(layer, act, (sh, sw))
                        walk(i + 1, phase_prefix + ((sh, sw),), branch)
                return
            act = apply_layer(layer, act)
        s = Selection(phase_prefix, tuple(rates))
        results[s] = (act, run_head(graph, act))

    x = np.asarray(x)
    if x.shape != graph.input_shape:
        raise ValueError(
            f"input shape {x.shape} does not match model input {graph.input_shape}")
    walk(0, (), x)

    frontier = SearchFrontier()
    ordered_states = selection_space(graph)
    pending = []
    for s in ordered_states:
        feature, logits = results[s]
        rec = _make_record(graph, s, feature, logits)
        frontier.add(rec)
        pending.append(rec)
    scores = scorer.score_batch(frontier, pending)
    records = [_finalize(rec, sc) for rec, sc in zip(pending, scores)]
    return sorted(records, key=lambda r: (r.criterion, r.selection.phases))
