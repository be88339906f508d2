"""Model and dataset file formats.

Models are stored as a JSON manifest plus a raw weight blob. The blob is
little-endian IEEE-754 float32 with every array raveled first-index-fastest
(the package's tensor linearization); the manifest records per-array byte
offsets and a SHA-256 checksum of the blob. Saving a freshly loaded model
reproduces both files byte for byte.

Datasets use the IDX format: a big-endian magic (0x00000803 for 3-D
unsigned-byte image sets, 0x00000801 for 1-D label sets), one big-endian
uint32 per dimension, then the raw bytes. Pixels are scaled to [0, 1] on
load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .modelgraph import (
    CONV2D,
    FC,
    FLATTEN,
    GROUPED_CONV2D,
    MAXPOOL2D,
    RELU,
    SOFTMAX_XENT_HEAD,
    DecomposedGroup,
    LayerSpec,
    ModelGraph,
    infer_shapes,
)

__all__ = [
    "ManifestError",
    "save_model",
    "load_model",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "load_dataset",
    "gen_synthetic",
    "write_synthetic",
]

FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ManifestError(ValueError):
    """Raised for corrupt, inconsistent, or unreadable model files."""


# ---------------------------------------------------------------------------
# Model manifest + weight blob
# ---------------------------------------------------------------------------


def _blob_append(blob: bytearray, arr: np.ndarray) -> dict:
    data = np.asarray(arr, dtype="<f4").ravel(order="F").tobytes()
    entry = {"offset": len(blob), "length": len(data), "shape": list(arr.shape)}
    blob.extend(data)
    return entry


def _blob_read(blob: bytes, entry: dict) -> np.ndarray:
    offset, length = entry["offset"], entry["length"]
    shape = tuple(entry["shape"])
    if offset < 0 or offset + length > len(blob):
        raise ManifestError(f"blob slice [{offset}, {offset + length}) out of bounds")
    expected = int(np.prod(shape)) * 4 if shape else 4
    if length != expected:
        raise ManifestError(f"blob slice length {length} != {expected} for {shape}")
    flat = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset)
    return np.reshape(flat, shape, order="F").astype(np.float64)


def _layer_to_dict(layer: LayerSpec, blob: bytearray) -> dict:
    entry: dict = {"id": layer.id, "kind": layer.kind}
    if layer.kind in (CONV2D, GROUPED_CONV2D):
        entry.update(
            d=layer.d, stride=layer.stride, padding=layer.padding,
            c_in=layer.c_in, c_out=layer.c_out, groups=layer.groups,
        )
    elif layer.kind == FC:
        entry.update(l_in=layer.l_in, l_out=layer.l_out)
    elif layer.kind == MAXPOOL2D:
        entry.update(d=layer.d, stride=layer.stride)
    if layer.weights is not None:
        entry["weights"] = _blob_append(blob, layer.weights)
    if layer.bias is not None:
        entry["bias"] = _blob_append(blob, layer.bias)
    return entry


def _layer_from_dict(entry: dict, blob: bytes) -> LayerSpec:
    kind = entry["kind"]
    weights = _blob_read(blob, entry["weights"]) if "weights" in entry else None
    bias = _blob_read(blob, entry["bias"]) if "bias" in entry else None
    common = dict(id=entry["id"], weights=weights, bias=bias)
    if kind in (CONV2D, GROUPED_CONV2D):
        return LayerSpec(
            kind=kind, d=entry["d"], stride=entry["stride"], padding=entry["padding"],
            c_in=entry["c_in"], c_out=entry["c_out"], groups=entry["groups"], **common,
        )
    if kind == FC:
        return LayerSpec(kind=kind, l_in=entry["l_in"], l_out=entry["l_out"], **common)
    if kind == MAXPOOL2D:
        return LayerSpec(kind=kind, d=entry["d"], stride=entry["stride"], id=entry["id"])
    if kind in (RELU, FLATTEN, SOFTMAX_XENT_HEAD):
        return LayerSpec(kind=kind, id=entry["id"])
    raise ManifestError(f"unknown layer kind {kind!r}")


def _group_to_dict(group: DecomposedGroup) -> dict:
    return {
        "scheme": group.scheme,
        "member_ids": list(group.member_ids),
        "source_id": group.source_id,
        "ranks": list(group.ranks),
        "orthonormal": group.orthonormal,
        "source_kind": group.source_kind,
        "d": group.d,
        "stride": group.stride,
        "padding": group.padding,
        "c_in": group.c_in,
        "c_out": group.c_out,
        "l_in": group.l_in,
        "l_out": group.l_out,
    }


def _group_from_dict(entry: dict) -> DecomposedGroup:
    return DecomposedGroup(
        scheme=entry["scheme"],
        member_ids=tuple(entry["member_ids"]),
        source_id=entry["source_id"],
        ranks=tuple(entry["ranks"]),
        orthonormal=entry["orthonormal"],
        source_kind=entry["source_kind"],
        d=entry["d"],
        stride=entry["stride"],
        padding=entry["padding"],
        c_in=entry["c_in"],
        c_out=entry["c_out"],
        l_in=entry["l_in"],
        l_out=entry["l_out"],
    )


def save_model(g: ModelGraph, manifest_path: str | Path,
               weights_path: Optional[str | Path] = None) -> None:
    """Write a model as ``manifest_path`` (JSON) plus a weight blob."""
    manifest_path = Path(manifest_path)
    if weights_path is None:
        weights_path = manifest_path.with_suffix(".bin")
    weights_path = Path(weights_path)

    blob = bytearray()
    layers = [_layer_to_dict(layer, blob) for layer in g.layers]
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(g.input_shape),
        "next_id": g.next_id,
        "layers": layers,
        "groups": [_group_to_dict(gr) for gr in g.groups],
        "weights_file": weights_path.name,
        "checksum_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    weights_path.write_bytes(bytes(blob))
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(manifest_path: str | Path) -> ModelGraph:
    """Read a model saved by :func:`save_model`, validating the manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported format version {manifest.get('format_version')}")

    weights_path = manifest_path.parent / manifest["weights_file"]
    try:
        blob = weights_path.read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read weight blob {weights_path}: {exc}") from exc
    checksum = hashlib.sha256(blob).hexdigest()
    if checksum != manifest["checksum_sha256"]:
        raise ManifestError(
            f"weight blob checksum mismatch: manifest says "
            f"{manifest['checksum_sha256'][:12]}..., blob is {checksum[:12]}..."
        )

    spans = []
    for entry in manifest["layers"]:
        for key in ("weights", "bias"):
            if key in entry:
                spans.append((entry[key]["offset"], entry[key]["length"]))
    spans.sort()
    end = 0
    for offset, length in spans:
        if offset < end:
            raise ManifestError("overlapping weight blob slices in manifest")
        end = offset + length
    if end != len(blob):
        raise ManifestError(
            f"weight blob has {len(blob)} bytes but manifest accounts for {end}"
        )

    layers = tuple(_layer_from_dict(entry, blob) for entry in manifest["layers"])
    g = ModelGraph(
        layers=layers,
        input_shape=tuple(manifest["input_shape"]),
        groups=tuple(_group_from_dict(e) for e in manifest["groups"]),
        next_id=manifest["next_id"],
    )
    try:
        infer_shapes(g)
    except ValueError as exc:
        raise ManifestError(f"inconsistent layer shapes: {exc}") from exc
    return g


# ---------------------------------------------------------------------------
# IDX datasets
# ---------------------------------------------------------------------------


def load_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file.

    Image files (magic 0x00000803) come back as float64 ``(n, rows, cols)``
    scaled to [0, 1]; label files (magic 0x00000801) as int64 ``(n,)``.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header (only {len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ValueError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(data)}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (n, rows, cols), got {images.shape}")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must be a 1-D array of small non-negative ints")
    header = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0])
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def load_dataset(
    images_path: str | Path, labels_path: str | Path
) -> tuple[np.ndarray, np.ndarray]:
    """Load an image/label IDX pair as ``((n, H, W, 1) floats, (n,) ints)``."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path} is not a label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    return images[..., None], labels


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def gen_synthetic(
    classes: int,
    samples: int,
    size: int = 28,
    seed: int = 0,
    template_seed: int = 0,
    noise: float = 0.15,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional images: a frozen per-class template plus pixel noise.

    Templates depend only on ``template_seed`` and the class index, so
    separately generated splits (different ``seed``) share classes. Output is
    uint8 images ``(samples, size, size)`` and int labels.
    """
    templates = np.stack(
        [
            np.random.default_rng([template_seed, c]).uniform(0.0, 1.0, (size, size))
            for c in range(classes)
        ]
    )
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=samples)
    images = templates[labels] + rng.normal(0.0, noise, (samples, size, size))
    images = np.clip(images, 0.0, 1.0)
    return np.round(images * 255.0).astype(np.uint8), labels.astype(np.int64)


def write_synthetic(
    prefix: str | Path,
    classes: int,
    samples: int,
    size: int = 28,
    seed: int = 0,
    template_seed: int = 0,
    noise: float = 0.15,
) -> tuple[Path, Path]:
    """Generate a synthetic set and write it as an IDX pair."""
    images, labels = gen_synthetic(classes, samples, size, seed, template_seed, noise)
    prefix = Path(prefix)
    images_path = prefix.parent / (prefix.name + "-images.idx")
    labels_path = prefix.parent / (prefix.name + "-labels.idx")
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path
