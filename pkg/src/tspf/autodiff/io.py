"""JSON checkpoints for named parameter bundles.

Floats are written with Python's shortest round-trip repr (at most 17
significant digits), so a save/load cycle reproduces every value exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from tspf.autodiff.nn import MlpParams
from tspf.autodiff.tensor import Tensor
from tspf.errors import LoadError


def _encode_array(arr: np.ndarray) -> dict[str, Any]:
    return {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}


def _decode_array(obj: Mapping[str, Any]) -> np.ndarray:
    values = np.asarray(obj["values"], dtype=np.float64)
    shape = tuple(obj["shape"])
    if int(np.prod(shape)) != values.size:
        raise LoadError(f"checkpoint array has shape {shape} but {values.size} values")
    return values.reshape(shape)


def params_to_dict(params: MlpParams) -> dict[str, Any]:
    return {
        "activation": params.activation,
        "frozen": params.frozen,
        "layers": [{"weight": _encode_array(w.data), "bias": _encode_array(b.data)} for w, b in params.layers],
    }


def params_from_dict(obj: Mapping[str, Any], name: str = "") -> MlpParams:
    layers = [
        (Tensor(_decode_array(layer["weight"])), Tensor(_decode_array(layer["bias"])))
        for layer in obj["layers"]
    ]
    return MlpParams(layers, activation=obj["activation"], frozen=bool(obj["frozen"]), name=name)


def save_checkpoint(path: str | Path, modules: Mapping[str, MlpParams], manifest: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "manifest": dict(manifest or {}),
        "modules": {key: params_to_dict(p) for key, p in modules.items()},
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, MlpParams], dict[str, Any]]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from exc
    modules = {key: params_from_dict(obj, name=key) for key, obj in payload["modules"].items()}
    return modules, payload.get("manifest", {})
