"""PSB1 weight container writer (and a reader for self-tests).

Layout: magic b"PSB1", u32 LE version=1, u32 LE header length, UTF-8 JSON
header with sorted keys and no whitespace, then concatenated raw
little-endian float32 blobs at header-declared byte offsets (relative to
the blob section). Serialisation is deterministic so re-exports are
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSB1"
VERSION = 1


def write_model(path, layer_docs: list[dict], tensors: dict[str, np.ndarray],
                input_shape, num_classes: int, head_index: int) -> None:
    """Write layer docs plus named tensors keyed '<layer>.weight'/'.bias'.

    ``layer_docs`` entries carry name/kind/params; this function resolves
    each layer's tensors by name, assigns blob offsets in layer order, and
    emits the container.
    """
    if not layer_docs:
        raise ValueError("refusing to export a model with zero layers")
    if not any(d["kind"] == "subsample" for d in layer_docs[:head_index]):
        raise ValueError("model must contain a subsample layer before the head")

    blobs = []
    offset = 0
    docs_out = []
    for doc in layer_docs:
        out = {"name": doc["name"], "kind": doc["kind"]}
        if doc.get("params"):
            out["params"] = {k: int(v) for k, v in sorted(doc["params"].items())}
        for attr in ("weight", "bias"):
            key = f"{doc['name']}.{attr}"
            if key in tensors:
                arr = np.ascontiguousarray(tensors[key], dtype="<f4")
                out[attr] = {"offset": offset, "shape": list(arr.shape)}
                blobs.append(arr.tobytes())
                offset += arr.nbytes
        docs_out.append(out)

    header = {
        "kind": "model",
        "layers": docs_out,
        "meta": {
            "head_index": int(head_index),
            "input_shape": [int(d) for d in input_shape],
            "num_classes": int(num_classes),
        },
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hb)))
        f.write(hb)
        f.write(b"".join(blobs))


def read_model(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a PSB1 model back as (header, tensors-by-name). Self-test helper."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    blob = raw[12 + header_len:]
    tensors = {}
    for doc in header["layers"]:
        for attr in ("weight", "bias"):
            if attr in doc:
                ref = doc[attr]
                shape = tuple(ref["shape"])
                count = int(np.prod(shape))
                start = ref["offset"]
                tensors[f"{doc['name']}.{attr}"] = np.frombuffer(
                    blob[start:start + 4 * count], dtype="<f4").reshape(shape)
    return header, tensors
