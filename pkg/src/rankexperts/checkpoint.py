"""Manifest + raw-blob checkpoint directories.

A checkpoint is a directory holding ``manifest.json`` and one little-endian,
row-major blob per tensor (``<tensor_id>.f32`` or ``<tensor_id>.f64``).  The
manifest is written with sorted keys so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "u32": "<u4"}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_blob(path: Path, array, kind: str) -> dict:
    arr = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[kind])
    path.write_bytes(arr.tobytes())
    return {"file": path.name, "dtype": kind, "shape": list(arr.shape)}


def read_blob(directory: Path, entry: dict) -> np.ndarray:
    data = (Path(directory) / entry["file"]).read_bytes()
    return np.frombuffer(data, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()


def save(directory, tensors: dict, dtypes: dict | str, meta: dict) -> Path:
    """Write ``tensors`` (name -> array) plus ``meta`` into ``directory``.

    ``dtypes`` maps each tensor name to ``"f32"``/``"f64"`` or gives one kind
    for all of them.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        kind = dtypes if isinstance(dtypes, str) else dtypes[name]
        entries[name] = write_blob(directory / f"{name}.{kind}", tensors[name], kind)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, **meta}
    (directory / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    return directory


def load(directory) -> tuple[dict, dict]:
    """Return ``(manifest, tensors)``."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    tensors = {name: read_blob(directory, e) for name, e in manifest["tensors"].items()}
    return manifest, tensors


def save_dense(model, directory, seeds: dict | None = None) -> Path:
    # trained in float32, so f32 blobs are lossless
    return save(directory, model.weights, "f32",
                {"kind": "dense", "dims": model.cfg.to_dict(), "seeds": seeds or {}})


def load_dense(directory):
    from .lm import ToyLM, ToyLMConfig

    manifest, tensors = load(directory)
    if manifest.get("kind") != "dense":
        raise ValueError(f"{directory} is not a dense checkpoint")
    return ToyLM(ToyLMConfig(**manifest["dims"]), tensors)
