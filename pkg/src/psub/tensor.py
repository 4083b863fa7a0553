"""Dense tensor primitives for sequential CNNs with explicit phase-indexed subsampling.

Activations are C×H×W numpy arrays, float32 by default (float64 is used for
high-precision gradient checks). Every operation is a pure function that
allocates a fresh, C-contiguous output; inputs are never mutated, so tensors
can be shared freely across threads.

Strided layers never appear here: a strided convolution or pooling layer is
always expressed as its stride-1 counterpart followed by `subsample_phase`,
which keeps the retained grid phase an explicit, searchable parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class PhaseIndex:
    """Which phase of a decimated grid is retained by one subsampling layer.

    ``s_h``/``s_w`` select the starting row/column; ``rate_h``/``rate_w`` are
    the decimation factors. The framework-default behaviour is phase (0, 0).
    """

    s_h: int
    s_w: int
    rate_h: int
    rate_w: int

    def __post_init__(self) -> None:
        _require(self.rate_h >= 1 and self.rate_w >= 1,
                 f"subsampling rates must be >= 1, got ({self.rate_h}, {self.rate_w})")
        _require(0 <= self.s_h < self.rate_h and 0 <= self.s_w < self.rate_w,
                 f"phase ({self.s_h}, {self.s_w}) out of range for rates "
                 f"({self.rate_h}, {self.rate_w})")


def _as_chw(x: np.ndarray, op: str) -> np.ndarray:
    x = np.asarray(x)
    _require(x.ndim == 3, f"{op}: expected a C×H×W tensor, got shape {x.shape}")
    return x


def conv2d_s1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
              pad: int = 0) -> np.ndarray:
    """Stride-1 2-D cross-correlation with zero padding.

    ``x`` is C_in×H×W, ``weight`` is C_out×C_in×k×k, ``bias`` has length
    C_out. Output is C_out×(H+2·pad−k+1)×(W+2·pad−k+1).
    """
    x = _as_chw(x, "conv2d_s1")
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    _require(weight.ndim == 4,
             f"conv2d_s1: weight must be C_out×C_in×k×k, got shape {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    _require(x.shape[0] == c_in,
             f"conv2d_s1: input has {x.shape[0]} channels, weight expects {c_in}")
    _require(bias.shape == (c_out,),
             f"conv2d_s1: bias shape {bias.shape} does not match {c_out} output channels")
    _require(pad >= 0, f"conv2d_s1: pad must be >= 0, got {pad}")

    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = x.shape[1] - kh + 1
    out_w = x.shape[2] - kw + 1
    _require(out_h >= 1 and out_w >= 1,
             f"conv2d_s1: kernel {kh}×{kw} does not fit padded input "
             f"{x.shape[1]}×{x.shape[2]}")

    dtype = np.result_type(x.dtype, weight.dtype)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c_in * kh * kw)
    flat = cols.astype(dtype, copy=False) @ weight.reshape(c_out, -1).T.astype(dtype, copy=False)
    flat += bias.astype(dtype, copy=False)
    return np.ascontiguousarray(flat.T.reshape(c_out, out_h, out_w))


def sliding_max(x: np.ndarray, k: int) -> np.ndarray:
    """Size-preserving k×k max filter with edge-replication padding.

    Odd k centres the window; even k anchors it top-left (pad (k−1)//2 on the
    leading side, the remainder trailing). Replication matches −∞ padding for
    interior windows without introducing sentinel values.
    """
    x = _as_chw(x, "sliding_max")
    _require(k >= 1, f"sliding_max: window size must be >= 1, got {k}")
    _require(x.shape[1] >= 1 and x.shape[2] >= 1,
             f"sliding_max: empty spatial extent {x.shape}")
    lead = (k - 1) // 2
    trail = k - 1 - lead
    padded = np.pad(x, ((0, 0), (lead, trail), (lead, trail)), mode="edge")
    _require(k <= padded.shape[1] and k <= padded.shape[2],
             f"sliding_max: window {k} exceeds padded extent {padded.shape[1:]}")
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.ascontiguousarray(windows.max(axis=(3, 4)))


def subsample_phase(x: np.ndarray, phase: PhaseIndex) -> np.ndarray:
    """Keep every rate-th row/column starting at the phase offset.

    out[c, n, m] = x[c, rate_h·n + s_h, rate_w·m + s_w]. Output extents are
    floor(H/rate_h) × floor(W/rate_w) for *every* phase; source indices that
    overflow (possible when the extent is not divisible by the rate and the
    phase is nonzero) are clamped to the last valid row/column so that all
    phases yield shape-identical tensors.
    """
    x = _as_chw(x, "subsample_phase")
    _, h, w = x.shape
    out_h = h // phase.rate_h
    out_w = w // phase.rate_w
    _require(out_h >= 1 and out_w >= 1,
             f"subsample_phase: rates ({phase.rate_h}, {phase.rate_w}) leave no "
             f"output for extent {h}×{w}")
    rows = np.minimum(phase.rate_h * np.arange(out_h) + phase.s_h, h - 1)
    cols = np.minimum(phase.rate_w * np.arange(out_w) + phase.s_w, w - 1)
    return np.ascontiguousarray(x[:, rows[:, None], cols[None, :]])


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling; source index is floor(dst·src/dst extent)."""
    x = _as_chw(x, "nearest_resize")
    _require(out_h >= 1 and out_w >= 1,
             f"nearest_resize: target extents must be >= 1, got {out_h}×{out_w}")
    _, h, w = x.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return np.ascontiguousarray(x[:, rows[:, None], cols[None, :]])


def translate_clamp(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift a map by reading from clamped source indices.

    out[c, i, j] = x[c, clamp(i+dy, 0, H−1), clamp(j+dx, 0, W−1)], so a
    positive dy moves content *up* (rows read from further down). Shifts
    whose magnitude reaches the extent are rejected.
    """
    x = _as_chw(x, "translate_clamp")
    _, h, w = x.shape
    _require(abs(dy) < h and abs(dx) < w,
             f"translate_clamp: shift ({dy}, {dx}) out of range for extent {h}×{w}")
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    return np.ascontiguousarray(x[:, rows[:, None], cols[None, :]])


def dense_head(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of a feature vector to K logits: weight (K×d) · x + bias."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    _require(x.ndim == 1, f"dense_head: expected a vector input, got shape {x.shape}")
    _require(weight.ndim == 2 and weight.shape[1] == x.shape[0],
             f"dense_head: weight shape {weight.shape} does not match input length "
             f"{x.shape[0]}")
    _require(bias.shape == (weight.shape[0],),
             f"dense_head: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    dtype = np.result_type(x.dtype, weight.dtype)
    return weight.astype(dtype, copy=False) @ x.astype(dtype, copy=False) \
        + bias.astype(dtype, copy=False)


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax of a finite vector."""
    z = np.asarray(z)
    _require(z.ndim == 1, f"softmax: expected a vector, got shape {z.shape}")
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel. Accumulates in float64 for reproducible sums."""
    x = _as_chw(x, "global_avg_pool")
    _require(x.shape[1] >= 1 and x.shape[2] >= 1,
             f"global_avg_pool: empty spatial extent {x.shape}")
    return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)
