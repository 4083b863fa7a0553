"""Bit-exact file formats: PSB1 weight containers, IDX datasets, golden fixtures.

PSB1 layout::

    bytes 0..3    magic b"PSB1"
    bytes 4..7    u32 little-endian version (currently 1)
    bytes 8..11   u32 little-endian header length in bytes
    ...           UTF-8 JSON header (sorted keys, no whitespace)
    ...           blob section: concatenated raw little-endian float32
                  tensors, row-major, at header-declared byte offsets

The header is either a ``"kind": "model"`` document (ordered layer list plus
``meta``) or a ``"kind": "aggregator"`` document (three named vectors). Blob
offsets are relative to the start of the blob section. Serialisation is
deterministic, so saving the same graph twice yields identical bytes.

IDX files follow the classic big-endian MNIST layout (magic 0x00000803 for
u8 image cubes, 0x00000801 for u8 label vectors).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PSB1"
VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

LAYER_KINDS = ("conv2d", "sliding_max", "relu", "subsample",
               "global_avg_pool", "flatten", "dense")


class ModelFormatError(ValueError):
    """Raised when a file is not a well-formed PSB1/IDX/golden document."""


class ModelValidationError(ValueError):
    """Raised when a structurally valid file describes an inconsistent model."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential graph.

    ``params`` holds the kind-specific integers (``pad`` for conv2d, ``k``
    for sliding_max, ``rate_h``/``rate_w`` for subsample). Convolutions are
    implicitly stride 1; any stride appears only as a following subsample
    layer, which is the only layer kind with a searchable phase.
    """

    name: str
    kind: str
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ModelValidationError(
                f"layer '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "subsample":
            rh = self.params.get("rate_h", 0)
            rw = self.params.get("rate_w", 0)
            if rh < 1 or rw < 1:
                raise ModelValidationError(
                    f"layer '{self.name}': subsample rates must be >= 1, "
                    f"got ({rh}, {rw})")


@dataclass(frozen=True)
class ModelGraph:
    """Sequential layer list split into backbone (< head_index) and head."""

    layers: tuple[LayerSpec, ...]
    head_index: int
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise ModelValidationError("model must contain at least one layer")
        if not 0 < self.head_index <= len(self.layers):
            raise ModelValidationError(
                f"head_index {self.head_index} out of range for "
                f"{len(self.layers)} layers")
        if not self.searchable_rates():
            raise ModelValidationError(
                "at least one subsample layer must precede the head")

    def backbone(self) -> tuple[LayerSpec, ...]:
        return self.layers[:self.head_index]

    def head(self) -> tuple[LayerSpec, ...]:
        return self.layers[self.head_index:]

    def searchable_rates(self) -> list[tuple[int, int]]:
        """Rates of the subsample layers in the backbone, in network order."""
        return [(l.params["rate_h"], l.params["rate_w"])
                for l in self.backbone() if l.kind == "subsample"]


@dataclass(frozen=True)
class GoldenFixture:
    """One (input, selection, expected logits) parity pin."""

    images_path: str
    image_index: int
    selection: tuple[tuple[int, int], ...]
    logits: np.ndarray
    tol: float = 1e-4


def propagate_shapes(graph: ModelGraph) -> list[tuple[int, ...]]:
    """Symbolically propagate the input shape through every layer.

    Returns the output shape after each layer and raises
    ``ModelValidationError`` naming the first inconsistent layer.
    """
    shape: tuple[int, ...] = graph.input_shape
    shapes = []
    for layer in graph.layers:
        shape = _layer_output_shape(layer, shape)
        shapes.append(shape)
    k = graph.num_classes
    if shapes[-1] != (k,):
        raise ModelValidationError(
            f"final layer '{graph.layers[-1].name}' produces shape "
            f"{shapes[-1]}, expected ({k},) logits")
    return shapes


def _layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    def fail(msg: str) -> ModelValidationError:
        return ModelValidationError(f"layer '{layer.name}' ({layer.kind}): {msg}")

    if layer.kind == "conv2d":
        if len(shape) != 3:
            raise fail(f"expects C×H×W input, got {shape}")
        if layer.weight is None or layer.bias is None:
            raise fail("missing weight or bias tensor")
        c_out, c_in, kh, kw = layer.weight.shape
        pad = layer.params.get("pad", 0)
        if shape[0] != c_in:
            raise fail(f"input has {shape[0]} channels, weight expects {c_in}")
        if layer.bias.shape != (c_out,):
            raise fail(f"bias shape {layer.bias.shape} != ({c_out},)")
        out_h = shape[1] + 2 * pad - kh + 1
        out_w = shape[2] + 2 * pad - kw + 1
        if out_h < 1 or out_w < 1:
            raise fail(f"kernel {kh}×{kw} does not fit input {shape[1]}×{shape[2]}")
        return (c_out, out_h, out_w)
    if layer.kind == "sliding_max":
        if len(shape) != 3:
            raise fail(f"expects C×H×W input, got {shape}")
        if layer.params.get("k", 0) < 1:
            raise fail(f"window size must be >= 1, got {layer.params.get('k')}")
        return shape
    if layer.kind == "relu":
        return shape
    if layer.kind == "subsample":
        if len(shape) != 3:
            raise fail(f"expects C×H×W input, got {shape}")
        rh, rw = layer.params["rate_h"], layer.params["rate_w"]
        out_h, out_w = shape[1] // rh, shape[2] // rw
        if out_h < 1 or out_w < 1:
            raise fail(f"rates ({rh}, {rw}) leave no output for {shape[1]}×{shape[2]}")
        return (shape[0], out_h, out_w)
    if layer.kind == "global_avg_pool":
        if len(shape) != 3:
            raise fail(f"expects C×H×W input, got {shape}")
        return (shape[0],)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dense":
        if layer.weight is None or layer.bias is None:
            raise fail("missing weight or bias tensor")
        k, d = layer.weight.shape
        if len(shape) != 1 or shape[0] != d:
            raise fail(f"weight shape {layer.weight.shape} does not match "
                       f"input shape {shape}")
        if layer.bias.shape != (k,):
            raise fail(f"bias shape {layer.bias.shape} != ({k},)")
        return (k,)
    raise fail("unhandled kind")


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_entries(layers: tuple[LayerSpec, ...]):
    """Yield (layer, attr, array) for every tensor in layer order."""
    for layer in layers:
        for attr in ("weight", "bias"):
            arr = getattr(layer, attr)
            if arr is not None:
                yield layer, attr, arr


def save_model(graph: ModelGraph, path: str | Path) -> None:
    """Write a ModelGraph as a PSB1 file with deterministic bytes."""
    propagate_shapes(graph)
    entries = []
    offset = 0
    blobs = []
    for layer, attr, arr in _tensor_entries(graph.layers):
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append((layer.name, attr,
                        {"offset": offset, "shape": list(arr.shape)}))
        blobs.append(arr32.tobytes())
        offset += arr32.nbytes

    refs: dict[tuple[str, str], dict] = {(n, a): r for n, a, r in entries}
    layer_docs = []
    for layer in graph.layers:
        doc: dict = {"name": layer.name, "kind": layer.kind}
        if layer.params:
            doc["params"] = {k: int(v) for k, v in sorted(layer.params.items())}
        for attr in ("weight", "bias"):
            if (layer.name, attr) in refs:
                doc[attr] = refs[(layer.name, attr)]
        layer_docs.append(doc)

    header = {
        "kind": "model",
        "layers": layer_docs,
        "meta": {
            "head_index": graph.head_index,
            "input_shape": list(graph.input_shape),
            "num_classes": graph.num_classes,
        },
    }
    _write_container(path, header, b"".join(blobs))


def _write_container(path: str | Path, header: dict, blob: bytes) -> None:
    hb = _header_bytes(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hb)))
        f.write(hb)
        f.write(blob)


def read_container(path: str | Path) -> tuple[dict, bytes]:
    """Read a PSB1 container and return (header dict, blob section bytes)."""
    try:
        raw = Path(path).read_bytes()
    except OSError:
        raise
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a PSB1 file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported PSB1 version {version}")
    if len(raw) < 12 + header_len:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed JSON header: {exc}") from exc
    return header, raw[12 + header_len:]


def _read_blob(blob: bytes, ref: dict, what: str, path) -> np.ndarray:
    shape = tuple(int(d) for d in ref["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = int(ref["offset"])
    end = start + 4 * count
    if start < 0 or end > len(blob):
        raise ModelFormatError(
            f"{path}: blob for {what} ({start}..{end}) lies outside the "
            f"{len(blob)}-byte blob section")
    arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise ModelValidationError(f"{path}: non-finite values in {what}")
    return np.ascontiguousarray(arr)


def load_model(path: str | Path) -> ModelGraph:
    """Load and fully validate a PSB1 model (shape-checked layer by layer)."""
    header, blob = read_container(path)
    if header.get("kind") != "model":
        raise ModelFormatError(
            f"{path}: container kind '{header.get('kind')}' is not 'model'")
    meta = header.get("meta", {})
    layers = []
    for doc in header.get("layers", []):
        name = doc.get("name", f"layer{len(layers)}")
        weight = _read_blob(blob, doc["weight"], f"{name}.weight", path) \
            if "weight" in doc else None
        bias = _read_blob(blob, doc["bias"], f"{name}.bias", path) \
            if "bias" in doc else None
        layers.append(LayerSpec(name=name, kind=doc.get("kind", ""),
                                params=dict(doc.get("params", {})),
                                weight=weight, bias=bias))
    graph = ModelGraph(layers=tuple(layers),
                       head_index=int(meta["head_index"]),
                       input_shape=tuple(int(d) for d in meta["input_shape"]),
                       num_classes=int(meta["num_classes"]))
    propagate_shapes(graph)
    return graph


@dataclass
class IdxDataset:
    """Images as N×1×rows×cols float32 in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _read_idx_header(raw: bytes, path, expected_magic: int, dims: int) -> tuple:
    need = 4 * (1 + dims)
    if len(raw) < need:
        raise ModelFormatError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + dims}I", raw[:need])
    if fields[0] != expected_magic:
        raise ModelFormatError(
            f"{path}: IDX magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
    return fields[1:]


def load_idx(images_path: str | Path, labels_path: str | Path) -> IdxDataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255 into [0, 1]."""
    img_raw = Path(images_path).read_bytes()
    count, rows, cols = _read_idx_header(img_raw, images_path, IDX_IMAGE_MAGIC, 3)
    pixel_bytes = count * rows * cols
    if len(img_raw) < 16 + pixel_bytes:
        raise ModelFormatError(f"{images_path}: truncated pixel data "
                               f"({len(img_raw) - 16} of {pixel_bytes} bytes)")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=pixel_bytes, offset=16)

    lbl_raw = Path(labels_path).read_bytes()
    (lbl_count,) = _read_idx_header(lbl_raw, labels_path, IDX_LABEL_MAGIC, 1)
    if lbl_count != count:
        raise ModelFormatError(
            f"label count {lbl_count} does not match image count {count}")
    if len(lbl_raw) < 8 + lbl_count:
        raise ModelFormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=lbl_count, offset=8)

    images = (pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0)
    return IdxDataset(images=images, labels=labels.copy())


def save_idx(images: np.ndarray, labels: np.ndarray,
             images_path: str | Path, labels_path: str | Path) -> None:
    """Write u8 images (N×rows×cols) and labels (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError(f"save_idx: got images {images.shape}, labels {labels.shape}")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels.tobytes())


def load_golden(path: str | Path, graph: ModelGraph | None = None) -> list[GoldenFixture]:
    """Parse golden fixtures; range-check selections against ``graph`` if given."""
    try:
        docs = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed golden JSON: {exc}") from exc
    if not isinstance(docs, list):
        raise ModelFormatError(f"{path}: golden file must hold a JSON array")

    rates = graph.searchable_rates() if graph is not None else None
    fixtures = []
    for i, doc in enumerate(docs):
        ref = doc["input"]
        if "#" not in ref:
            raise ModelFormatError(
                f"{path}[{i}]: input '{ref}' is not '<idx-file>#<index>'")
        images_path, _, index = ref.rpartition("#")
        selection = tuple((int(sh), int(sw)) for sh, sw in doc["selection"])
        if rates is not None:
            if len(selection) != len(rates):
                raise ModelValidationError(
                    f"{path}[{i}]: selection has {len(selection)} entries, "
                    f"model has {len(rates)} searchable subsample layers")
            for (sh, sw), (rh, rw) in zip(selection, rates):
                if not (0 <= sh < rh and 0 <= sw < rw):
                    raise ModelValidationError(
                        f"{path}[{i}]: phase ({sh}, {sw}) out of range for "
                        f"rates ({rh}, {rw})")
        fixtures.append(GoldenFixture(
            images_path=images_path,
            image_index=int(index),
            selection=selection,
            logits=np.asarray(doc["logits"], dtype=np.float64),
            tol=float(doc.get("tol", 1e-4)),
        ))
    return fixtures
