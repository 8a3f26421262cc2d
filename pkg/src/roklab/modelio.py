"""Model artifact files.

Layout (JSON, UTF-8, keys sorted)::

    {
      "format": "roklab-model",
      "version": 1,
      "meta": {...},                      # free-form provenance tags
      "frozen_groups": ["kb.f", ...],
      "params": [
        {"name": "emb", "group": "teacher", "shape": [V, D], "data": [...]},
        ...
      ]
    }

``data`` is the row-major flattening of the array.  Floats are written with
``repr`` precision, so a write/read round trip is exact and re-writing the
same store yields identical bytes.  Adam state is not persisted.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import ParamStore

FORMAT = "roklab-model"
VERSION = 1


class ArtifactError(ValueError):
    pass


def dumps_store(store: ParamStore, meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "frozen_groups": sorted(store.frozen_groups),
        "params": [
            {
                "name": name,
                "group": store.groups[name],
                "shape": list(store.params[name].shape),
                "data": store.params[name].reshape(-1).tolist(),
            }
            for name in store.names()
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads_store(text: str) -> tuple[ParamStore, dict]:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ArtifactError(f"not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ArtifactError(f"unsupported model file version {doc.get('version')}")
    store = ParamStore()
    for entry in doc["params"]:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        store.add(entry["name"], arr, entry["group"])
    store.freeze(*doc["frozen_groups"])
    return store, doc["meta"]


def save_store(store: ParamStore, path, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_store(store, meta), encoding="utf-8")


def load_store(path) -> tuple[ParamStore, dict]:
    return loads_store(Path(path).read_text(encoding="utf-8"))
