"""Named-tensor archive: a JSON manifest plus one little-endian float32 blob.

``save_archive("out/params", ...)`` writes ``out/params.json`` and
``out/params.bin``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "matforge-tensors/1"


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_archive(stem: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest_path, blob_path = _paths(stem)
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    doc = {"format": FORMAT, "dtype": "float32-le", "meta": meta or {}, "tensors": entries}
    manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_archive(stem: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(stem)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a {FORMAT} manifest")
    blob = np.fromfile(blob_path, dtype="<f4")
    out = {}
    for e in doc["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > blob.size:
            raise ValueError(f"{blob_path}: tensor {e['name']} extends past end of blob")
        out[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
    return out, doc.get("meta", {})
