"""Prediction-set construction from a calibrated model.

Sets use the strict inequalities of the calibration rule: a class enters the
set when its score is strictly above (thr) or strictly below (aps/raps) the
threshold; equality excludes it. Empty sets are returned as-is -- they are a
legitimate outcome for thr and show up as inefficiency below 1.
"""

from __future__ import annotations

import json

import numpy as np

from .calibration import CalibratedModel
from .errors import ShapeError
from .scores import Orientation, score_matrix


def membership_matrix(logits, model: CalibratedModel) -> np.ndarray:
    """Boolean N x K matrix: entry (i, k) says class k+1 is in row i's set."""
    raw = getattr(logits, "logits", logits)
    x = np.asarray(raw)
    if x.ndim != 2:
        raise ShapeError(f"expected an N x K logit matrix, got shape {x.shape}")
    if model.is_class_balanced and x.shape[1] != model.threshold.shape[0]:
        raise ShapeError(
            f"model has {model.threshold.shape[0]} per-class thresholds "
            f"but records have K={x.shape[1]}"
        )
    scores = score_matrix(x, model.score_config)
    if model.orientation is Orientation.HIGHER_IS_CONFORMING:
        return scores > model.threshold
    return scores < model.threshold


def predict_set(logits, model: CalibratedModel) -> np.ndarray:
    """Sorted (ascending) array of 1-based class indices for one example."""
    x = np.asarray(getattr(logits, "logits", logits))
    if x.ndim != 1:
        raise ShapeError(f"expected a length-K logit vector, got shape {x.shape}")
    mask = membership_matrix(x[None, :], model)
    return np.flatnonzero(mask[0]).astype(np.int64) + 1


def predict_batch(records, model: CalibratedModel) -> list[np.ndarray]:
    """Elementwise predict_set over a record set, order-preserving."""
    mask = membership_matrix(records, model)
    return [np.flatnonzero(row).astype(np.int64) + 1 for row in mask]


def set_sizes(sets: list[np.ndarray]) -> np.ndarray:
    return np.array([s.shape[0] for s in sets], dtype=np.int64)


def sets_to_jsonl(sets: list[np.ndarray]) -> str:
    """One JSON array of class indices per line."""
    return "\n".join(json.dumps([int(c) for c in s]) for s in sets) + "\n"


def sets_from_jsonl(text: str) -> list[np.ndarray]:
    return [
        np.asarray(json.loads(line), dtype=np.int64)
        for line in text.splitlines()
        if line.strip()
    ]
