"""Nonconformity scores for prediction-set classification.

Three score functions over softmax probabilities, all computed in float64:

* ``thr``  -- the probability of the class itself (higher is more conforming)
* ``aps``  -- cumulative probability mass of all classes ranked at or above
  the class, with the probabilities sorted in non-increasing order (lower is
  more conforming)
* ``raps`` -- ``aps`` plus a rank penalty ``lam * max(0, rank - k_reg)``

Class indices are 1-based everywhere in the public API (classes live in
``{1..K}``); sorting ties are broken by ascending class index so every score
is a deterministic function of the probability vector.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, ShapeError

PROB_SUM_TOL = 1e-6


class Method(str, enum.Enum):
    THR = "thr"
    APS = "aps"
    RAPS = "raps"


class Orientation(enum.Enum):
    HIGHER_IS_CONFORMING = "higher"
    LOWER_IS_CONFORMING = "lower"


#: RAPS penalty presets by model family: (lam, k_reg)
RAPS_PRESETS = {
    "conv": (0.01, 5),
    "transformer": (0.1, 2),
}


@dataclass(frozen=True)
class ScoreConfig:
    """Which score function to use, plus the RAPS penalty parameters.

    ``lam`` and ``k_reg`` must be present iff ``method`` is RAPS.
    """

    method: Method
    lam: float | None = None
    k_reg: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.method is Method.RAPS:
            if self.lam is None or self.k_reg is None:
                raise ConfigError("raps requires both lam and k_reg")
            if self.lam < 0:
                raise ConfigError(f"lam must be non-negative, got {self.lam}")
            if self.k_reg < 1:
                raise ConfigError(f"k_reg must be a positive integer, got {self.k_reg}")
        elif self.lam is not None or self.k_reg is not None:
            raise ConfigError(f"lam/k_reg only apply to raps, not {self.method.value}")

    @property
    def orientation(self) -> Orientation:
        if self.method is Method.THR:
            return Orientation.HIGHER_IS_CONFORMING
        return Orientation.LOWER_IS_CONFORMING

    @classmethod
    def preset(cls, family: str) -> "ScoreConfig":
        """RAPS config for a named model family ('conv' or 'transformer')."""
        if family not in RAPS_PRESETS:
            raise ConfigError(f"unknown raps preset {family!r}; choose from {sorted(RAPS_PRESETS)}")
        lam, k_reg = RAPS_PRESETS[family]
        return cls(Method.RAPS, lam=lam, k_reg=k_reg)

    def to_dict(self) -> dict:
        d = {"method": self.method.value}
        if self.method is Method.RAPS:
            d["lambda"] = self.lam
            d["k_reg"] = self.k_reg
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreConfig":
        return cls(Method(d["method"]), lam=d.get("lambda"), k_reg=d.get("k_reg"))


def _as_prob_vector(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ShapeError(f"expected a probability vector with K >= 2, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("probabilities must lie in [0, 1]")
    total = float(np.sum(p))
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise DataError(f"probabilities sum to {total}, expected 1 within {PROB_SUM_TOL}")
    return p


def _check_class_index(y: int, k: int) -> int:
    y = int(y)
    if not 1 <= y <= k:
        raise IndexError(f"class index {y} out of range 1..{k}")
    return y


def _check_finite_rows(logits: np.ndarray) -> None:
    if np.all(np.isfinite(logits)):
        return
    bad = np.argwhere(~np.isfinite(logits))
    i, j = bad[0]
    if logits.shape[0] == 1:
        raise DataError(f"non-finite logit at index {int(j)}")
    raise DataError(f"non-finite logit at row {int(i)}, index {int(j)}")


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a length-K logit vector (K >= 2)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError(f"expected a logit vector with K >= 2, got shape {x.shape}")
    _check_finite_rows(x[None, :])
    return _kernels.softmax_rows(x[None, :])[0]


def sort_probs(p) -> tuple[np.ndarray, np.ndarray]:
    """Sorted view of a probability vector.

    Returns ``(sorted_probs, rank_of_class)`` where ``sorted_probs`` is
    non-increasing and ``rank_of_class[k-1]`` is the 1-based rank of class k
    (ties ranked by ascending class index).
    """
    p = _as_prob_vector(p)
    _, ranks = _kernels.aps_rank_matrix(p[None, :])
    rank_of_class = ranks[0]
    sorted_probs = np.empty_like(p)
    sorted_probs[rank_of_class - 1] = p
    return sorted_probs, rank_of_class


def thr_score(p, y: int) -> float:
    """Probability of class ``y``; higher means more conforming."""
    p = _as_prob_vector(p)
    y = _check_class_index(y, p.shape[0])
    return float(p[y - 1])


def aps_score(p, y: int) -> float:
    """Cumulative sorted probability mass through the rank of class ``y``.

    Lower means more conforming. Deterministic: no randomized tie-splitting.
    """
    p = _as_prob_vector(p)
    y = _check_class_index(y, p.shape[0])
    scores, _ = _kernels.aps_rank_matrix(p[None, :])
    return float(scores[0, y - 1])


def raps_score(p, y: int, cfg: ScoreConfig) -> float:
    """APS score plus the rank penalty ``lam * max(0, rank(y) - k_reg)``."""
    if cfg.method is not Method.RAPS:
        raise ConfigError(f"raps_score requires a raps config, got {cfg.method.value}")
    p = _as_prob_vector(p)
    y = _check_class_index(y, p.shape[0])
    if cfg.k_reg > p.shape[0]:
        raise ConfigError(f"k_reg={cfg.k_reg} exceeds K={p.shape[0]}")
    scores, ranks = _kernels.aps_rank_matrix(p[None, :])
    penalty = cfg.lam * max(0, int(ranks[0, y - 1]) - cfg.k_reg)
    return float(scores[0, y - 1] + penalty)


def score_matrix(logits, cfg: ScoreConfig) -> np.ndarray:
    """Score of every (example, class) pair as an N x K float64 matrix.

    ``logits`` is an N x K array of raw classifier outputs or any object with
    a ``.logits`` attribute (e.g. a LogitRecordSet). Entry (i, k) equals the
    scalar score of class k+1 on row i; rows are evaluated independently so
    the result is identical to sequential per-row evaluation.
    """
    raw = getattr(logits, "logits", logits)
    x = np.ascontiguousarray(np.asarray(raw, dtype=np.float64))
    if x.ndim != 2:
        raise ShapeError(f"expected an N x K logit matrix, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError(f"need K >= 2 classes, got K={x.shape[1]}")
    _check_finite_rows(x)
    probs = _kernels.softmax_rows(x)
    if cfg.method is Method.THR:
        return probs
    scores, ranks = _kernels.aps_rank_matrix(probs)
    if cfg.method is Method.APS:
        return scores
    if cfg.k_reg > x.shape[1]:
        raise ConfigError(f"k_reg={cfg.k_reg} exceeds K={x.shape[1]}")
    return scores + cfg.lam * np.maximum(ranks - cfg.k_reg, 0)
