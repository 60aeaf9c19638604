"""Writer for the CNDP feature-pack interchange format.

Layout: ASCII "CNDP", u32 LE version=1, u32 LE header length, UTF-8 JSON
header with keys {dataset, split, kind, dim, count, num_classes,
class_names, normalized, seed}, then count*dim float32 LE row-major
features, then count u32 LE labels.  This module only writes; consumers
validate with their own readers.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

PACK_MAGIC = b"CNDP"
PACK_VERSION = 1


def write_pack(
    path,
    *,
    kind: str,
    features: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
    normalized: bool,
    seed: int | None,
    dataset: str = "",
    split: str = "",
) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (count, dim) with one label per row")
    header = {
        "dataset": dataset,
        "split": split,
        "kind": kind,
        "dim": int(features.shape[1]),
        "count": int(features.shape[0]),
        "num_classes": len(class_names),
        "class_names": list(class_names),
        "normalized": normalized,
        "seed": seed,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as sink:
        sink.write(PACK_MAGIC)
        sink.write(struct.pack("<I", PACK_VERSION))
        sink.write(struct.pack("<I", len(header_bytes)))
        sink.write(header_bytes)
        sink.write(features.tobytes())
        sink.write(labels.tobytes())
