"""Conformal threshold calibration from held-out true-class scores.

Thresholds are order statistics of the calibration scores at a
finite-sample-corrected level:

* higher-is-conforming (thr): the ``floor(level * N)``-th smallest score at
  level ``alpha * (1 + 1/N)``; prediction keeps classes with score strictly
  above the threshold.
* lower-is-conforming (aps/raps): the ``ceil(level * N)``-th smallest score
  at level ``(1 - alpha) * (1 + 1/N)``; prediction keeps classes with score
  strictly below the threshold.

Order statistics (never interpolation) preserve the finite-sample coverage
guarantee. Degenerate levels clamp to -inf/+inf sentinels, which produce
all-inclusive prediction sets rather than errors.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigError, DataError
from .scores import Orientation, ScoreConfig, score_matrix


class Side(enum.Enum):
    LOWER = "lower"
    UPPER = "upper"


def finite_sample_quantile(scores, level: float, side: Side) -> float:
    """Order-statistic quantile of ``scores`` at ``level`` in [0, 1 + 1/N].

    Upper side returns the ceil(level*N)-th smallest score, Lower side the
    floor(level*N)-th smallest (1-indexed). An index below 1 yields -inf and
    an index above N yields +inf.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.shape[0]
    if n == 0:
        raise CalibrationError("cannot take a quantile of an empty score vector")
    if not 0.0 <= level <= 1.0 + 1.0 / n:
        raise ConfigError(f"quantile level {level} outside [0, 1 + 1/{n}]")
    pos = level * n
    idx = math.ceil(pos) if side is Side.UPPER else math.floor(pos)
    if idx < 1:
        return float("-inf")
    if idx > n:
        return float("inf")
    return float(np.partition(s, idx - 1)[idx - 1])


@dataclass(frozen=True)
class CalibrationSet:
    """True-class scores of a held-out calibration split."""

    scores: np.ndarray
    labels: np.ndarray
    score_config: ScoreConfig

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if scores.shape != labels.shape:
            raise DataError(
                f"scores and labels disagree in length: {scores.shape[0]} vs {labels.shape[0]}"
            )
        if scores.shape[0] < 1:
            raise CalibrationError("calibration set is empty")
        if np.any(labels < 1):
            raise DataError("labels must be 1-indexed class numbers")
        scores.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def orientation(self) -> Orientation:
        return self.score_config.orientation

    def __len__(self) -> int:
        return self.scores.shape[0]

    @classmethod
    def from_records(cls, records, cfg: ScoreConfig) -> "CalibrationSet":
        """Score a record set and keep each example's true-class score."""
        mat = score_matrix(records, cfg)
        labels = np.asarray(records.labels, dtype=np.int64)
        if np.any(labels < 1) or np.any(labels > mat.shape[1]):
            raise DataError(f"labels must lie in 1..{mat.shape[1]}")
        scores = mat[np.arange(mat.shape[0]), labels - 1]
        return cls(scores, labels, cfg)


@dataclass(frozen=True)
class CalibratedModel:
    """A frozen conformal threshold plus the score config that produced it.

    ``threshold`` is a scalar for marginal calibration or a length-K vector
    for class-balanced calibration (one threshold per class, with +/-inf
    sentinels for classes that could not be calibrated). Immutable: apply it
    to as many test sets as needed.
    """

    score_config: ScoreConfig
    alpha: float
    threshold: float | np.ndarray
    calibration_size: int
    per_class_sizes: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if isinstance(self.threshold, np.ndarray):
            t = np.asarray(self.threshold, dtype=np.float64)
            t.setflags(write=False)
            object.__setattr__(self, "threshold", t)
        if self.per_class_sizes is not None:
            s = np.asarray(self.per_class_sizes, dtype=np.int64)
            s.setflags(write=False)
            object.__setattr__(self, "per_class_sizes", s)

    @property
    def is_class_balanced(self) -> bool:
        return isinstance(self.threshold, np.ndarray)

    @property
    def orientation(self) -> Orientation:
        return self.score_config.orientation

    def to_dict(self) -> dict:
        d = self.score_config.to_dict()
        d["alpha"] = self.alpha
        if self.is_class_balanced:
            d["threshold"] = [_encode_inf(v) for v in self.threshold.tolist()]
        else:
            d["threshold"] = _encode_inf(float(self.threshold))
        d["calibration_size"] = int(self.calibration_size)
        if self.per_class_sizes is not None:
            d["per_class_sizes"] = self.per_class_sizes.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedModel":
        cfg = ScoreConfig.from_dict(d)
        thr = d["threshold"]
        if isinstance(thr, list):
            threshold = np.array([_decode_inf(v) for v in thr], dtype=np.float64)
        else:
            threshold = _decode_inf(thr)
        sizes = d.get("per_class_sizes")
        return cls(
            score_config=cfg,
            alpha=float(d["alpha"]),
            threshold=threshold,
            calibration_size=int(d["calibration_size"]),
            per_class_sizes=None if sizes is None else np.asarray(sizes, dtype=np.int64),
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibratedModel":
        return cls.from_dict(json.loads(text))


def _encode_inf(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _decode_inf(v) -> float:
    if isinstance(v, str):
        return float(v)
    return float(v)


def _all_inclusive_sentinel(orientation: Orientation) -> float:
    # the threshold every score passes: s > -inf, or s < +inf
    return float("-inf") if orientation is Orientation.HIGHER_IS_CONFORMING else float("inf")


def _marginal_threshold(scores: np.ndarray, alpha: float, orientation: Orientation) -> float:
    n = scores.shape[0]
    if orientation is Orientation.HIGHER_IS_CONFORMING:
        return finite_sample_quantile(scores, alpha * (1.0 + 1.0 / n), Side.LOWER)
    return finite_sample_quantile(scores, (1.0 - alpha) * (1.0 + 1.0 / n), Side.UPPER)


def calibrate_marginal(cal: CalibrationSet, alpha: float) -> CalibratedModel:
    """One threshold from all true-class scores (the standard split-CP rule)."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    tau = _marginal_threshold(cal.scores, alpha, cal.orientation)
    return CalibratedModel(
        score_config=cal.score_config,
        alpha=alpha,
        threshold=tau,
        calibration_size=len(cal),
    )


def calibrate_class_balanced(cal: CalibrationSet, alpha: float, num_classes: int) -> CalibratedModel:
    """One threshold per class, each from that class's own calibration scores.

    Classes with no calibration examples get the all-inclusive sentinel so
    they are never silently under-covered.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if num_classes < int(cal.labels.max()):
        raise DataError(f"labels reach {int(cal.labels.max())} but num_classes={num_classes}")
    taus = np.empty(num_classes, dtype=np.float64)
    sizes = np.bincount(cal.labels, minlength=num_classes + 1)[1:]
    sentinel = _all_inclusive_sentinel(cal.orientation)
    for k in range(1, num_classes + 1):
        if sizes[k - 1] == 0:
            taus[k - 1] = sentinel
        else:
            taus[k - 1] = _marginal_threshold(
                cal.scores[cal.labels == k], alpha, cal.orientation
            )
    return CalibratedModel(
        score_config=cal.score_config,
        alpha=alpha,
        threshold=taus,
        calibration_size=len(cal),
        per_class_sizes=sizes,
    )
