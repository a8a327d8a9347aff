"""Versioned, self-describing JSON checkpoints.

See ``docs/checkpoint_format.md`` for the byte-level layout.  Every tensor is
stored as ``{"name", "shape", "data"}`` with ``data`` the row-major flattening;
Python's shortest-repr float formatting makes the round trip exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Scaler
from .errors import CheckpointError
from .model import DecoderLayer, EncoderLayer, Mixer, SpacetimeModel

FORMAT = "spacetime-robust"
VERSION = 1


def _tensor(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"name": name, "shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _untensor(entry):
    data = np.array(entry["data"], dtype=np.float64)
    shape = tuple(entry["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor {entry['name']!r}: payload size does not match shape {shape}")
    return data.reshape(shape)


def dump(kind: str, meta: dict, tensors: dict) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": [_tensor(k, v) for k, v in tensors.items()],
    }


def parse(doc: dict, kind=None):
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc["meta"], {e["name"]: _untensor(e) for e in doc["tensors"]}


def write(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


def read(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


# ------------------------------------------------------------ models

def model_to_doc(model: SpacetimeModel, scaler: Scaler = None) -> dict:
    meta = {
        "lookback": model.lookback,
        "horizon": model.horizon,
        "width": model.width,
        "encoder": [{"mixer": layer.mixer is not None, "skip": layer.skip} for layer in model.encoder],
        "scaler": scaler.to_dict() if scaler is not None else None,
        "info": model.meta,
    }
    return dump("spacetime_model", meta, dict(model.parameters()))


def model_from_doc(doc: dict):
    """Return ``(model, scaler_or_None)``."""
    meta, t = parse(doc, "spacetime_model")
    layers = []
    for i, spec in enumerate(meta["encoder"]):
        mixer = None
        if spec["mixer"]:
            mixer = Mixer(*(t[f"encoder.{i}.{k}"] for k in ("w1", "b1", "w2", "b2")))
        layers.append(EncoderLayer(t[f"encoder.{i}.a"], t[f"encoder.{i}.c"], mixer, bool(spec["skip"])))
    model = SpacetimeModel(t["embed.w"], t["embed.b"], layers,
                           DecoderLayer(t["decoder.a"], t["decoder.c"], t["decoder.k"]),
                           t["project.w"], t["project.b"], int(meta["lookback"]), int(meta["horizon"]),
                           dict(meta.get("info") or {}))
    scaler = Scaler.from_dict(meta["scaler"]) if meta.get("scaler") else None
    return model, scaler


def save_model(path, model: SpacetimeModel, scaler: Scaler = None) -> None:
    write(path, model_to_doc(model, scaler))


def load_model(path):
    return model_from_doc(read(path))
