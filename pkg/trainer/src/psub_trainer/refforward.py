"""Float64 numpy forward pass over exported layer docs.

Used to compute golden logits with the exact stride-1 plus phase-gather
decomposition the fixtures are meant to pin. Pixels scale to [0, 1] in
float32 first (matching how consumers load IDX data) and are then promoted
to float64 for the arithmetic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def image_to_input(u8_image: np.ndarray) -> np.ndarray:
    x32 = u8_image.astype(np.float32) / 255.0
    return x32[None, :, :].astype(np.float64)


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
            pad: int) -> np.ndarray:
    c_out, c_in, kh, kw = weight.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = x.shape[1] - kh + 1
    out_w = x.shape[2] - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c_in * kh * kw)
    flat = cols @ weight.reshape(c_out, -1).T.astype(np.float64) \
        + bias.astype(np.float64)
    return flat.T.reshape(c_out, out_h, out_w)


def _sliding_max(x: np.ndarray, k: int) -> np.ndarray:
    lead = (k - 1) // 2
    trail = k - 1 - lead
    padded = np.pad(x, ((0, 0), (lead, trail), (lead, trail)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(1, 2))
    return win.max(axis=(3, 4))


def _subsample(x: np.ndarray, rh: int, rw: int, sh: int, sw: int) -> np.ndarray:
    h, w = x.shape[1], x.shape[2]
    rows = np.minimum(rh * np.arange(h // rh) + sh, h - 1)
    cols = np.minimum(rw * np.arange(w // rw) + sw, w - 1)
    return x[:, rows[:, None], cols[None, :]]


def forward_selection(layer_docs: list[dict], tensors: dict[str, np.ndarray],
                      x: np.ndarray, selection: list[tuple[int, int]],
                      head_index: int) -> np.ndarray:
    """Run the whole net with the given phase per backbone subsample layer."""
    phases = list(selection)
    out = x
    for i, doc in enumerate(layer_docs):
        kind = doc["kind"]
        params = doc.get("params", {})
        if kind == "conv2d":
            out = _conv2d(out, tensors[f"{doc['name']}.weight"].astype(np.float64),
                          tensors[f"{doc['name']}.bias"], params.get("pad", 0))
        elif kind == "sliding_max":
            out = _sliding_max(out, params["k"])
        elif kind == "subsample":
            sh, sw = phases.pop(0) if (i < head_index and phases) else (0, 0)
            out = _subsample(out, params["rate_h"], params["rate_w"], sh, sw)
        elif kind == "relu":
            out = np.maximum(out, 0.0)
        elif kind == "global_avg_pool":
            out = out.mean(axis=(1, 2))
        elif kind == "flatten":
            out = out.reshape(-1)
        elif kind == "dense":
            out = tensors[f"{doc['name']}.weight"].astype(np.float64) @ out \
                + tensors[f"{doc['name']}.bias"].astype(np.float64)
        else:
            raise ValueError(f"unhandled layer kind '{kind}'")
    return out
