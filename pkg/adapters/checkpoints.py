"""Model checkpoints as a JSON container of named tensors.

Layout::

    {
      "format": "lorafed-checkpoint",
      "version": 1,
      "psi": [1, 1],
      "tensors": {"layers.0.W0": {"shape": [32, 16], "data": [...]}, ...}
    }

``data`` is the row-major flattening; floats are written with Python's
shortest round-trip repr, so a save/load cycle is bit-exact.
"""
import json
import os
import tempfile
from typing import Dict, List, Tuple

import numpy as np

from adapters.models import LoraLinear, LoraMlp
from lorafed.exceptions import InputError

FORMAT = "lorafed-checkpoint"
VERSION = 1


def _encode(arr: np.ndarray) -> Dict:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def _decode(name: str, entry: Dict) -> np.ndarray:
    try:
        arr = np.array(entry["data"], dtype=np.float64)
        return arr.reshape(entry["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise InputError(f"checkpoint tensor {name} is malformed: {e}") from e


def save_checkpoint(model: LoraMlp, path: str):
    tensors = {**model.frozen(), **model.trainable()}
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "psi": model.psi,
        "tensors": {name: _encode(tensors[name]) for name in sorted(tensors)},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", newline="\n") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def _read(path: str) -> Dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: cannot read checkpoint ({e})") from e
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise InputError(f"{path}: not a version {VERSION} {FORMAT} file")
    return doc


def load_checkpoint(path: str) -> LoraMlp:
    doc = _read(path)
    tensors = {name: _decode(name, entry) for name, entry in doc["tensors"].items()}
    try:
        layers = []
        for i, psi in enumerate(doc["psi"]):
            layers.append(
                LoraLinear(
                    tensors[f"layers.{i}.W0"],
                    tensors[f"layers.{i}.bias"],
                    tensors[f"layers.{i}.A"],
                    tensors[f"layers.{i}.B"],
                    int(psi),
                )
            )
        return LoraMlp(layers, tensors["head.weight"], tensors["head.bias"])
    except KeyError as e:
        raise InputError(f"{path}: missing tensor {e}") from e


def load_base_weights(path: str) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Only the frozen (W0, bias) pairs, for seeding a new model."""
    model = load_checkpoint(path)
    return [(layer.w0, layer.bias) for layer in model.layers]
