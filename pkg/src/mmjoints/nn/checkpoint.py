"""Text checkpoints: JSON documents with metadata and base64 little-endian array blobs.

Arrays are stored as ``{"__ndarray__": {"dtype": "<f8", "shape": [...], "b64": ...}}``
so parameters round-trip bit-exactly. Whole fitted objects of this package are
stored by walking their attribute dictionaries; only classes defined under the
``mmjoints`` package are ever re-instantiated on load.
"""

from __future__ import annotations

import base64
import enum
import importlib
import json
import math
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1
_PACKAGE = "mmjoints"


class CheckpointError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.asarray(a)
    if a.dtype == object:
        raise CheckpointError("object arrays cannot be checkpointed")
    le = a.astype(a.dtype.newbyteorder("<"), copy=False) if a.dtype.byteorder == ">" else a
    return {"dtype": le.dtype.str, "shape": list(a.shape),
            "b64": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _qualname(cls):
    return f"{cls.__module__}:{cls.__qualname__}"


def _resolve(name):
    module, _, qual = name.partition(":")
    if module != _PACKAGE and not module.startswith(_PACKAGE + "."):
        raise CheckpointError(f"refusing to load class outside the package: {name}")
    obj = importlib.import_module(module)
    for part in qual.split("."):
        obj = getattr(obj, part)
    return obj


def encode_state(obj):
    """JSON-compatible tree for ``obj`` (arrays, containers, enums and package objects)."""
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, enum.Enum):
        return {"__enum__": _qualname(type(obj)), "name": obj.name}
    if isinstance(obj, int) and not isinstance(obj, bool):
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else {"__float__": repr(obj)}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": encode_array(obj)}
    if isinstance(obj, np.generic):
        return {"__npscalar__": encode_array(np.asarray(obj))}
    if isinstance(obj, tuple):
        return {"__tuple__": [encode_state(v) for v in obj]}
    if isinstance(obj, list):
        return [encode_state(v) for v in obj]
    if isinstance(obj, dict):
        if all(isinstance(k, str) and not k.startswith("__") for k in obj):
            return {k: encode_state(v) for k, v in obj.items()}
        return {"__items__": [[encode_state(k), encode_state(v)] for k, v in obj.items()]}
    module = type(obj).__module__
    if module == _PACKAGE or module.startswith(_PACKAGE + "."):
        return {"__object__": _qualname(type(obj)), "state": encode_state(vars(obj))}
    raise CheckpointError(f"cannot checkpoint object of type {type(obj).__name__}")


def decode_state(tree):
    if isinstance(tree, list):
        return [decode_state(v) for v in tree]
    if not isinstance(tree, dict):
        return tree
    if "__ndarray__" in tree:
        return decode_array(tree["__ndarray__"])
    if "__npscalar__" in tree:
        return decode_array(tree["__npscalar__"])[()]
    if "__float__" in tree:
        return float(tree["__float__"])
    if "__tuple__" in tree:
        return tuple(decode_state(v) for v in tree["__tuple__"])
    if "__items__" in tree:
        return {_hashable(decode_state(k)): decode_state(v) for k, v in tree["__items__"]}
    if "__enum__" in tree:
        return _resolve(tree["__enum__"])[tree["name"]]
    if "__object__" in tree:
        cls = _resolve(tree["__object__"])
        obj = object.__new__(cls)
        vars(obj).update(decode_state(tree["state"]))
        return obj
    return {k: decode_state(v) for k, v in tree.items()}


def _hashable(k):
    return k.item() if isinstance(k, np.generic) else k


def dumps_checkpoint(obj, meta: dict | None = None) -> str:
    doc = {"format": "mmjoints-checkpoint", "version": FORMAT_VERSION, "meta": encode_state(meta or {}),
           "state": encode_state(obj)}
    return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"


def loads_checkpoint(text: str):
    """Return ``(object, meta)``."""
    doc = json.loads(text)
    if doc.get("format") != "mmjoints-checkpoint":
        raise CheckpointError("not a checkpoint document")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    return decode_state(doc["state"]), decode_state(doc["meta"])


def atomic_write_text(path, text: str):
    """Write to a temporary sibling then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, obj, meta: dict | None = None):
    atomic_write_text(path, dumps_checkpoint(obj, meta))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
