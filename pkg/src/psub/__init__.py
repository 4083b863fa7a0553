"""Test-time recovery of activations discarded by subsampling layers.

Strided layers are decomposed into stride-1 operations plus explicit
phase-indexed subsampling; a budgeted greedy search picks promising phase
selections per image, their feature maps are aligned back to the input
grid, and an aggregation function (average, entropy-weighted, or a trained
attention module) merges them into one improved prediction.
"""

from .aggregate import (AggregatorParams, FeatureRecord, WeightAssignment,
                        aggregate_attention, aggregate_avg, aggregate_entropy,
                        aggregate_perpixel, attention_matrix, entropy_weights,
                        load_aggregator, perpixel_entropy_weights,
                        save_aggregator)
from .forward import (Selection, align_feature, default_selection,
                      forward_with_selection, neighbor_batch, offset,
                      selection_space, space_size)
from .infer import evaluate_dataset, hflip, predict, predict_tta, tta_combine
from .modelio import (GoldenFixture, IdxDataset, LayerSpec, ModelFormatError,
                      ModelGraph, ModelValidationError, load_golden, load_idx,
                      load_model, propagate_shapes, save_idx, save_model)
from .search import (BudgetConfig, SearchFrontier, criterion_entropy,
                     criterion_learned, exhaustive_search, search,
                     search_frontier)
from .tensor import (PhaseIndex, conv2d_s1, dense_head, global_avg_pool,
                     nearest_resize, relu, sliding_max, softmax,
                     subsample_phase, translate_clamp)
from .train import TrainHyper, TrainReport, train_aggregator

__version__ = "0.1.0"
