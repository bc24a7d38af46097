"""CPL1 record writer.

The format is the conformal toolkit's interchange contract:

    bytes 0..3    magic b"CPL1"
    bytes 4..7    u32 N (examples), little-endian
    bytes 8..11   u32 K (classes)
    next 4*N      u32 labels, 1-indexed
    next 4*N*K    f32 logits, row-major
    next 4        u32 byte length of the metadata blob
    next ...      UTF-8 JSON metadata {"dataset": ..., "model": ..., "tags": {...}}

Only writing lives here; the consumer side belongs to the toolkit.
"""

import json
import struct

import numpy as np

MAGIC = b"CPL1"


def write_cpl1(path, logits, labels, dataset: str = "", model: str = "", tags: dict | None = None):
    """Write one record file; validates the invariants the reader will check."""
    logits = np.ascontiguousarray(np.asarray(logits, dtype=np.float32))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
        raise ValueError(f"logits must be a non-empty N x K matrix, got {logits.shape}")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain NaN or Inf")
    if labels.min() < 1 or labels.max() > logits.shape[1]:
        raise ValueError(f"labels must lie in 1..{logits.shape[1]} (1-indexed)")
    meta = json.dumps({"dataset": dataset, "model": model, "tags": tags or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", logits.shape[0], logits.shape[1]))
        f.write(labels.astype("<u4").tobytes())
        f.write(logits.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
