"""Deterministic JSON encoding of float arrays and versioned checkpoint files."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1


def encode_array(arr) -> dict:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    return {"shape": list(arr.shape), "f64le": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["f64le"])
        return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed array record: {exc}") from None


def dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def write_checkpoint(path, kind: str, payload: dict) -> None:
    doc = {"format": "epep-checkpoint", "format_version": FORMAT_VERSION, "kind": kind, **payload}
    Path(path).write_text(dumps(doc))


def read_checkpoint(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != "epep-checkpoint":
        raise FormatError(f"{path}: not an epep checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: checkpoint format version {doc.get('format_version')!r},"
            f" this build reads version {FORMAT_VERSION}"
        )
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc
