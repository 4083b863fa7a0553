"""Combine a set of per-state features into one prediction.

Three aggregators over shape-identical aligned feature maps:

* average — plain elementwise mean;
* entropy — confidence weighting w ∝ (1 − H/ln K), normalized to sum 1;
* attention — a single-head set operator: scalar queries/keys projected from
  globally pooled features, values are the feature maps themselves, and a
  learned per-channel gain turns the attention readout into an offset from
  the average. With zero gain it reduces exactly to the average, so an
  untrained module never regresses the baseline.

The attention module has three trainable vectors (query projection, key
projection, output gain), each of backbone-channel length. It is a set
operator: parameters trained at one budget evaluate at any other budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import modelio
from . import tensor as T
from .forward import Selection


@dataclass(frozen=True)
class FeatureRecord:
    """One evaluated state: aligned feature map, logits, and its scores."""

    selection: Selection
    aligned_feature: np.ndarray
    logits: np.ndarray
    entropy: float
    criterion: float


@dataclass
class AggregatorParams:
    """Trainable tensors of the attention aggregation module."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_o: np.ndarray

    def __post_init__(self) -> None:
        # Kept in float64 so optimization steps and finite-difference probes
        # are not re-quantized; serialization narrows to float32.
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        self.w_o = np.asarray(self.w_o, dtype=np.float64)
        c = self.w_q.shape
        if self.w_k.shape != c or self.w_o.shape != c or self.w_q.ndim != 1:
            raise ValueError(
                f"aggregator params must be three equal-length vectors, got "
                f"{self.w_q.shape}, {self.w_k.shape}, {self.w_o.shape}")
        if not (np.isfinite(self.w_q).all() and np.isfinite(self.w_k).all()
                and np.isfinite(self.w_o).all()):
            raise ValueError("aggregator params must be finite")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def initial(cls, channels: int, seed: int = 0) -> "AggregatorParams":
        """Zero output gain (training starts at the averaging baseline)."""
        rng = np.random.default_rng(seed)
        return cls(w_q=rng.normal(0.0, 0.01, channels),
                   w_k=rng.normal(0.0, 0.01, channels),
                   w_o=np.zeros(channels))


def aggregate_avg(features: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of shape-identical feature maps."""
    if not features:
        raise ValueError("aggregate_avg: empty feature list")
    shape = features[0].shape
    for f in features:
        if f.shape != shape:
            raise ValueError(f"aggregate_avg: shape {f.shape} != {shape}")
    out = np.zeros(shape, dtype=np.float64)
    for f in features:
        out += f
    return (out / len(features)).astype(features[0].dtype)


@dataclass(frozen=True)
class WeightAssignment:
    """Normalized per-state weights plus the normalization constant."""

    weights: np.ndarray
    normalizer: float


def entropy_weights(records: list[FeatureRecord], num_classes: int) -> WeightAssignment:
    """Confidence weights w ∝ (1 − H/ln K), normalized to sum 1.

    When every state is maximally uncertain the pre-weights all vanish; the
    assignment then falls back to uniform instead of dividing by ~0.
    """
    if not records:
        raise ValueError("entropy_weights: empty record list")
    if num_classes < 2:
        raise ValueError(f"entropy_weights: need K >= 2, got {num_classes}")
    h = np.array([r.entropy for r in records], dtype=np.float64)
    pre = 1.0 - h / np.log(num_classes)
    z = pre.sum()
    if z <= 1e-9:
        n = len(records)
        return WeightAssignment(np.full(n, 1.0 / n), float(n))
    return WeightAssignment(pre / z, float(z))


def aggregate_entropy(records: list[FeatureRecord], num_classes: int) -> np.ndarray:
    """Entropy-weighted sum of the records' aligned features."""
    if not records:
        raise ValueError("aggregate_entropy: empty record list")
    w = entropy_weights(records, num_classes).weights
    out = np.zeros(records[0].aligned_feature.shape, dtype=np.float64)
    for wi, r in zip(w, records):
        out += wi * r.aligned_feature
    return out.astype(records[0].aligned_feature.dtype)


def pool_features(records: list[FeatureRecord]) -> np.ndarray:
    """Globally average-pool each record's aligned feature to a c-vector."""
    return np.stack([T.global_avg_pool(r.aligned_feature) for r in records])


def attention_matrix_from_pooled(pooled: np.ndarray,
                                 params: AggregatorParams) -> np.ndarray:
    """Row-stochastic B×B attention over pooled feature vectors.

    Scalar query q_i = w_q·pooled_i and key k_j = w_k·pooled_j; row i is the
    softmax of q_i·k_j over j.
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[1] != params.channels:
        raise ValueError(
            f"pooled features {pooled.shape} do not match {params.channels} "
            "aggregator channels")
    q = pooled @ params.w_q.astype(np.float64)
    k = pooled @ params.w_k.astype(np.float64)
    scores = np.outer(q, k)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def attention_matrix(records: list[FeatureRecord],
                     params: AggregatorParams) -> np.ndarray:
    if not records:
        raise ValueError("attention_matrix: empty record list")
    return attention_matrix_from_pooled(pool_features(records), params)


def aggregate_attention(records: list[FeatureRecord],
                        params: AggregatorParams) -> np.ndarray:
    """Attention aggregation: average plus a gained attention readout.

    A = (1/B) Σ_i (f_i + w_o ⊙ Σ_j W_ij f_j), the gain broadcast across
    spatial positions. Zero gain reproduces `aggregate_avg` exactly.
    """
    if not records:
        raise ValueError("aggregate_attention: empty record list")
    feats = [r.aligned_feature for r in records]
    c = feats[0].shape[0]
    if c != params.channels:
        raise ValueError(
            f"features have {c} channels, aggregator params have {params.channels}")
    avg = aggregate_avg(feats)
    w = attention_matrix(records, params)
    colsum = w.sum(axis=0)
    readout = np.zeros(feats[0].shape, dtype=np.float64)
    for cs, f in zip(colsum, feats):
        readout += cs * f
    readout /= len(records)
    gained = params.w_o.astype(np.float64)[:, None, None] * readout
    return (avg.astype(np.float64) + gained).astype(feats[0].dtype)


def perpixel_entropy_weights(records: list[FeatureRecord],
                             num_classes: int) -> np.ndarray:
    """Per-pixel confidence weights (B×H×W); each pixel's weights sum to 1."""
    if not records:
        raise ValueError("perpixel_entropy_weights: empty record list")
    if num_classes < 2:
        raise ValueError(f"perpixel_entropy_weights: need K >= 2, got {num_classes}")
    probs = np.stack([_pixel_probs(r.logits, num_classes) for r in records])
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    h = -plogp.sum(axis=1)
    pre = 1.0 - h / np.log(num_classes)
    z = pre.sum(axis=0)
    n = len(records)
    safe_z = np.where(z > 1e-9, z, 1.0)
    return np.where(z > 1e-9, pre / safe_z, 1.0 / n)


def _pixel_probs(logits: np.ndarray, num_classes: int) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] != num_classes:
        raise ValueError(
            f"per-pixel logits must be K×H×W with K={num_classes}, "
            f"got {logits.shape}")
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def aggregate_perpixel(records: list[FeatureRecord],
                       num_classes: int) -> np.ndarray:
    """Segmentation variant: weighted sum of per-pixel probability maps.

    Each record's ``logits`` is a K×H×W map. Entropy and weights are computed
    per pixel location; the returned K×H×W probability map's channel argmax
    is the aggregated label map.
    """
    if not records:
        raise ValueError("aggregate_perpixel: empty record list")
    shape = np.asarray(records[0].logits).shape
    for r in records:
        if np.asarray(r.logits).shape != shape:
            raise ValueError(
                f"aggregate_perpixel: logits shape {np.asarray(r.logits).shape} "
                f"!= {shape}")
    weights = perpixel_entropy_weights(records, num_classes)
    out = np.zeros(shape, dtype=np.float64)
    for b, r in enumerate(records):
        out += weights[b][None, :, :] * _pixel_probs(r.logits, num_classes)
    return out


def save_aggregator(params: AggregatorParams, path) -> None:
    """Serialize the three parameter vectors in a PSB1 container."""
    tensors = [("w_q", params.w_q), ("w_k", params.w_k), ("w_o", params.w_o)]
    offset = 0
    docs = []
    blobs = []
    for name, arr in tensors:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        docs.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
        offset += arr32.nbytes
    header = {"kind": "aggregator",
              "meta": {"channels": params.channels},
              "tensors": docs}
    modelio._write_container(path, header, b"".join(blobs))


def load_aggregator(path) -> AggregatorParams:
    header, blob = modelio.read_container(path)
    if header.get("kind") != "aggregator":
        raise modelio.ModelFormatError(
            f"{path}: container kind '{header.get('kind')}' is not 'aggregator'")
    arrays = {}
    for doc in header.get("tensors", []):
        arrays[doc["name"]] = modelio._read_blob(blob, doc, doc["name"], path)
    missing = {"w_q", "w_k", "w_o"} - set(arrays)
    if missing:
        raise modelio.ModelFormatError(f"{path}: missing tensors {sorted(missing)}")
    return AggregatorParams(w_q=arrays["w_q"], w_k=arrays["w_k"], w_o=arrays["w_o"])
