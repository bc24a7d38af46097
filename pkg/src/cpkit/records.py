"""Labeled logit matrices and their on-disk encodings.

The binary format ("CPL1") is little-endian and seekable:

    bytes 0..3    magic b"CPL1"
    bytes 4..7    u32 N (examples)
    bytes 8..11   u32 K (classes)
    next 4*N      u32 labels, 1-indexed
    next 4*N*K    f32 logits, row-major
    next 4        u32 byte length of the metadata blob
    next ...      UTF-8 JSON metadata {"dataset": ..., "model": ..., "tags": {...}}

A CSV alternative (header ``label,logit_0,...``) is accepted for small
files; ``load_records`` sniffs the magic bytes to pick the decoder.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"CPL1"


@dataclass(frozen=True)
class LogitRecordSet:
    """N x K raw classifier outputs with 1-indexed true labels."""

    logits: np.ndarray
    labels: np.ndarray
    dataset: str = ""
    model: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        logits = np.ascontiguousarray(np.asarray(self.logits, dtype=np.float32))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64).ravel())
        if logits.ndim != 2:
            raise DataError(f"logits must be an N x K matrix, got shape {logits.shape}")
        if logits.shape[0] != labels.shape[0]:
            raise DataError(
                f"{logits.shape[0]} logit rows but {labels.shape[0]} labels"
            )
        if logits.shape[0] < 1 or logits.shape[1] < 1:
            raise DataError(f"record set must be non-empty, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            i, j = np.argwhere(~np.isfinite(logits))[0]
            raise DataError(f"non-finite logit at row {int(i)}, class {int(j) + 1}")
        if labels.size and (labels.min() < 1 or labels.max() > logits.shape[1]):
            raise DataError(f"labels must lie in 1..{logits.shape[1]}")
        logits.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def num_examples(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def take(self, idx) -> "LogitRecordSet":
        """Subset by row indices, preserving their order."""
        idx = np.asarray(idx, dtype=np.int64)
        return LogitRecordSet(
            logits=self.logits[idx],
            labels=self.labels[idx],
            dataset=self.dataset,
            model=self.model,
            tags=dict(self.tags),
        )


def save_records(records: LogitRecordSet, path) -> None:
    meta = json.dumps(
        {"dataset": records.dataset, "model": records.model, "tags": records.tags}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", records.num_examples, records.num_classes))
        f.write(records.labels.astype("<u4").tobytes())
        f.write(records.logits.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file while reading {what}: expected {n} bytes, got {len(buf)}",
            offset=offset,
        )
    return buf


def _load_binary(f) -> LogitRecordSet:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    n, k = struct.unpack("<II", _read_exact(f, 8, "header"))
    if n < 1 or k < 1:
        raise FormatError(f"degenerate dimensions N={n}, K={k}", offset=4)
    labels_off = f.tell()
    labels = np.frombuffer(_read_exact(f, 4 * n, "labels"), dtype="<u4").astype(np.int64)
    bad = np.flatnonzero((labels < 1) | (labels > k))
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"label {int(labels[i])} at row {i} out of range 1..{k}",
            offset=labels_off + 4 * i,
        )
    logits_off = f.tell()
    logits = np.frombuffer(_read_exact(f, 4 * n * k, "logits"), dtype="<f4").reshape(n, k)
    if not np.all(np.isfinite(logits)):
        i, j = np.argwhere(~np.isfinite(logits))[0]
        raise FormatError(
            f"non-finite logit at row {int(i)}, class {int(j) + 1}",
            offset=logits_off + 4 * (int(i) * k + int(j)),
        )
    (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
    meta_off = f.tell()
    try:
        meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata blob is not valid JSON: {e}", offset=meta_off)
    return LogitRecordSet(
        logits=logits,
        labels=labels,
        dataset=meta.get("dataset", ""),
        model=meta.get("model", ""),
        tags=meta.get("tags", {}),
    )


def save_records_csv(records: LogitRecordSet, path) -> None:
    """CSV encoding (no metadata); logits written so they re-read to the same f32."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"logit_{j}" for j in range(records.num_classes)])
        for i in range(records.num_examples):
            w.writerow([int(records.labels[i])] + [repr(float(v)) for v in records.logits[i]])


def _load_csv(f) -> LogitRecordSet:
    reader = csv.reader(io.TextIOWrapper(f, encoding="utf-8"))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV file", offset=0)
    if not header or header[0] != "label":
        raise FormatError(f"CSV header must start with 'label', got {header[:1]}", offset=0)
    k = len(header) - 1
    labels, rows = [], []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != k + 1:
            raise FormatError(f"CSV line {line_no}: expected {k + 1} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
        except ValueError as e:
            raise FormatError(f"CSV line {line_no}: {e}")
    if not rows:
        raise FormatError("CSV file has a header but no data rows")
    return LogitRecordSet(
        logits=np.asarray(rows, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.int64),
    )


def load_records(path) -> LogitRecordSet:
    """Load a CPL1 or CSV record file, validating all invariants."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
        f.seek(0)
        if head == MAGIC:
            return _load_binary(f)
        try:
            return _load_csv(f)
        except (UnicodeDecodeError, csv.Error):
            raise FormatError(
                f"bad magic {head!r} (expected {MAGIC!r}) and not parseable as CSV",
                offset=0,
            )
