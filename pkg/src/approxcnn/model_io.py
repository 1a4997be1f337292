"""Model persistence: a JSON manifest plus a little-endian float32 blob."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import LayerSpec, NetworkSpec
from .errors import FormatError, InvalidParam, ShapeError

FORMAT_NAME = "approxcnn-model"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class ModelFile:
    manifest: str
    blob: bytes


def to_model_file(net: NetworkSpec, blob_name: str = "model.bin") -> ModelFile:
    chunks, layers, offset = [], [], 0
    for layer in net.layers:
        entry: dict = {"kind": layer.kind}
        if layer.is_parametric:
            for name in ("weights", "biases"):
                data = np.ascontiguousarray(getattr(layer, name), dtype=_DTYPE).tobytes()
                entry[name] = {"shape": list(getattr(layer, name).shape), "offset": offset, "length": len(data)}
                chunks.append(data)
                offset += len(data)
        if layer.kind == "maxpool2d":
            entry["window"] = list(layer.window)
        layers.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "dtype": "float32",
        "name": net.name,
        "input_shape": list(net.input_shape),
        "layers": layers,
        "blob": blob_name,
        "blob_length": offset,
    }
    return ModelFile(json.dumps(manifest, indent=2, sort_keys=True) + "\n", b"".join(chunks))


def _tensor(blob: bytes, rec, expected_end: int):
    try:
        shape = tuple(int(d) for d in rec["shape"])
        offset, length = int(rec["offset"]), int(rec["length"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"malformed tensor record {rec!r}") from None
    if offset != expected_end:
        raise FormatError(f"tensor offset {offset} leaves a gap or overlap at {expected_end}")
    if min(shape, default=1) < 0 or length != int(np.prod(shape)) * _DTYPE.itemsize:
        raise FormatError(f"tensor length {length} does not match shape {shape}")
    if offset + length > len(blob):
        raise FormatError(f"tensor at {offset}+{length} overruns the {len(blob)}-byte blob")
    arr = np.frombuffer(blob, dtype=_DTYPE, count=length // _DTYPE.itemsize, offset=offset)
    return arr.reshape(shape).astype(np.float64), offset + length


def from_model_file(mf: ModelFile) -> NetworkSpec:
    """Rebuild a network, validating the manifest against the blob."""
    try:
        manifest = json.loads(mf.manifest)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError("not a model manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('format_version')!r}")
    if manifest.get("endianness") != "little" or manifest.get("dtype") != "float32":
        raise FormatError("only little-endian float32 blobs are supported")
    if manifest.get("blob_length") != len(mf.blob):
        raise FormatError(f"blob has {len(mf.blob)} bytes, manifest expects {manifest.get('blob_length')}")
    layers, end = [], 0
    try:
        for entry in manifest["layers"]:
            kind = entry["kind"]
            if kind in ("conv2d", "dense"):
                w, end = _tensor(mf.blob, entry["weights"], end)
                b, end = _tensor(mf.blob, entry["biases"], end)
                layers.append(LayerSpec(kind, weights=w, biases=b))
            elif kind == "maxpool2d":
                layers.append(LayerSpec(kind, window=tuple(entry["window"])))
            else:
                layers.append(LayerSpec(kind))
        if end != len(mf.blob):
            raise FormatError(f"{len(mf.blob) - end} trailing blob bytes not covered by the manifest")
        return NetworkSpec(tuple(manifest["input_shape"]), layers, manifest.get("name", "custom"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc!r}") from None
    except ShapeError as exc:
        raise FormatError(f"manifest layers do not chain: {exc}") from None


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_model(net: NetworkSpec, path) -> Path:
    """Write ``<path>`` (manifest) and ``<path stem>.bin`` (blob) atomically."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    if blob_path == path:
        raise InvalidParam(f"model manifest path {path} would collide with its .bin blob")
    mf = to_model_file(net, blob_path.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(blob_path, mf.blob)
    _atomic_write(path, mf.manifest.encode("utf-8"))
    return path


def load_model(path) -> NetworkSpec:
    path = Path(path)
    try:
        manifest = path.read_text(encoding="utf-8")
        blob_name = json.loads(manifest).get("blob", path.with_suffix(".bin").name)
        if not isinstance(blob_name, str) or Path(blob_name).name != blob_name or blob_name in ("", ".", ".."):
            raise FormatError(f"blob name {blob_name!r} must be a file next to the manifest")
        blob = (path.parent / blob_name).read_bytes()
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    except AttributeError:
        raise FormatError("not a model manifest") from None
    return from_model_file(ModelFile(manifest, blob))
