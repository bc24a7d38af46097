"""Coverage, inefficiency, and accuracy metrics for prediction sets.

Micro metrics average over examples; macro metrics average over classes
(unweighted). Classes absent from the test set cannot be evaluated and are
excluded from macro averages and violation counts; reports list them.
Per-class results keep the underlying integer counts so the identity
``coverage == sum(hits_k) / sum(n_k)`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


def _check_lengths(a, b, what: str):
    if len(a) != len(b):
        raise ShapeError(f"{what}: lengths differ ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise ShapeError(f"{what}: need at least one example")


def _membership(sets: list[np.ndarray], labels: np.ndarray) -> np.ndarray:
    hits = np.empty(len(sets), dtype=bool)
    for i, s in enumerate(sets):
        j = np.searchsorted(s, labels[i])
        hits[i] = j < s.shape[0] and s[j] == labels[i]
    return hits


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise DataError(f"labels must lie in 1..{num_classes}")
    return labels


@dataclass(frozen=True)
class PerClassStats:
    """Integer per-class tallies; class k is row k-1."""

    counts: np.ndarray  # test examples with true class k
    hits: np.ndarray  # of those, how many sets contained k
    sizes: np.ndarray  # total set size over those examples

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def cover(self) -> np.ndarray:
        """Per-class coverage; NaN for classes with no test examples."""
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.hits / np.maximum(self.counts, 1), np.nan)

    @property
    def ineff(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.sizes / np.maximum(self.counts, 1), np.nan)


def coverage(sets: list[np.ndarray], labels) -> float:
    """Fraction of examples whose true label is in the predicted set."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    _check_lengths(sets, labels, "coverage")
    return float(np.mean(_membership(sets, labels)))


def per_class_coverage(sets: list[np.ndarray], labels, num_classes: int) -> PerClassStats:
    """Coverage tallies split by true class."""
    labels = _check_labels(labels, num_classes)
    _check_lengths(sets, labels, "per_class_coverage")
    hits = _membership(sets, labels)
    counts = np.bincount(labels, minlength=num_classes + 1)[1:]
    hit_counts = np.bincount(labels, weights=hits.astype(np.float64), minlength=num_classes + 1)[1:]
    size_per_example = np.array([s.shape[0] for s in sets], dtype=np.float64)
    size_sums = np.bincount(labels, weights=size_per_example, minlength=num_classes + 1)[1:]
    return PerClassStats(
        counts=counts.astype(np.int64),
        hits=hit_counts.astype(np.int64),
        sizes=size_sums.astype(np.int64),
    )


def macro_coverage(per_class: PerClassStats) -> float:
    """Unweighted mean of per-class coverage over classes present."""
    present = per_class.present
    if not present.any():
        raise DataError("no class has test examples")
    return float(np.mean(per_class.cover[present]))


def cover_violations(per_class: PerClassStats, alpha: float) -> int:
    """Number of present classes with coverage strictly below 1 - alpha."""
    present = per_class.present
    return int(np.sum(per_class.cover[present] < 1.0 - alpha))


def inefficiency(sets: list[np.ndarray]) -> float:
    """Mean prediction-set size. May be below 1 when empty sets occur."""
    if len(sets) == 0:
        raise ShapeError("inefficiency: need at least one example")
    return float(np.mean([s.shape[0] for s in sets]))


def macro_inefficiency(sets: list[np.ndarray], labels, num_classes: int) -> float:
    """Unweighted mean over classes of the mean set size within each class."""
    stats = per_class_coverage(sets, labels, num_classes)
    present = stats.present
    if not present.any():
        raise DataError("no class has test examples")
    return float(np.mean(stats.ineff[present]))


def accuracy(logits, labels) -> float:
    """Top-1 argmax match rate."""
    x = np.asarray(getattr(logits, "logits", logits))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    _check_lengths(x, labels, "accuracy")
    top1 = np.argmax(x, axis=1) + 1
    return float(np.mean(top1 == labels))


def macro_accuracy(logits, labels, num_classes: int) -> float:
    """Unweighted mean of per-class top-1 accuracy over classes present."""
    x = np.asarray(getattr(logits, "logits", logits))
    labels = _check_labels(labels, num_classes)
    _check_lengths(x, labels, "macro_accuracy")
    top1 = np.argmax(x, axis=1) + 1
    correct = (top1 == labels).astype(np.float64)
    counts = np.bincount(labels, minlength=num_classes + 1)[1:]
    hits = np.bincount(labels, weights=correct, minlength=num_classes + 1)[1:]
    present = counts > 0
    if not present.any():
        raise DataError("no class has test examples")
    return float(np.mean(hits[present] / counts[present]))


@dataclass(frozen=True)
class EvalReport:
    """All headline metrics of one evaluation, plus the per-class breakdown.

    ``violated_fraction`` is relative to the classes that could be evaluated
    (those with at least one test example). ``trials`` carries aggregation
    metadata (mean/std/count) when the report averages several trials.
    """

    coverage: float
    macro_coverage: float
    violated_count: int
    violated_fraction: float
    inefficiency: float
    macro_inefficiency: float
    accuracy: float
    macro_accuracy: float
    num_classes: int
    num_examples: int
    alpha: float
    per_class: PerClassStats | None = None
    absent_classes: list[int] = field(default_factory=list)
    trials: dict | None = None

    def to_dict(self, include_per_class: bool = True) -> dict:
        d = {
            "coverage": self.coverage,
            "macro_coverage": self.macro_coverage,
            "violated_count": self.violated_count,
            "violated_fraction": self.violated_fraction,
            "inefficiency": self.inefficiency,
            "macro_inefficiency": self.macro_inefficiency,
            "accuracy": self.accuracy,
            "macro_accuracy": self.macro_accuracy,
            "num_classes": self.num_classes,
            "num_examples": self.num_examples,
            "alpha": self.alpha,
            "absent_classes": list(self.absent_classes),
        }
        if self.trials is not None:
            d["trials"] = self.trials
        if include_per_class and self.per_class is not None:
            pc = self.per_class
            d["per_class"] = [
                {
                    "class": k + 1,
                    "n": int(pc.counts[k]),
                    "cover": float(pc.cover[k]),
                    "ineff": float(pc.ineff[k]),
                }
                for k in range(len(pc.counts))
                if pc.counts[k] > 0
            ]
        return d


def evaluate_sets(
    sets: list[np.ndarray],
    labels,
    logits,
    num_classes: int,
    alpha: float,
    class_universe: np.ndarray | None = None,
) -> EvalReport:
    """Assemble an EvalReport from prediction sets and raw logits.

    ``class_universe``, when given, restricts which classes participate in
    macro averages and violation counts (e.g. a 200-class subset of a
    1000-class label space); scoring and set sizes still use all classes.
    """
    labels = _check_labels(labels, num_classes)
    stats = per_class_coverage(sets, labels, num_classes)
    if class_universe is not None:
        universe = np.zeros(num_classes, dtype=bool)
        universe[np.asarray(class_universe, dtype=np.int64) - 1] = True
        if np.any(~universe[labels - 1]):
            raise DataError("labels fall outside the declared class subset")
    else:
        universe = np.ones(num_classes, dtype=bool)
    present = stats.present & universe
    if not present.any():
        raise DataError("no class has test examples")
    cover_k = stats.cover[present]
    ineff_k = stats.ineff[present]
    n_eval = int(present.sum())
    violated = int(np.sum(cover_k < 1.0 - alpha))
    return EvalReport(
        coverage=coverage(sets, labels),
        macro_coverage=float(np.mean(cover_k)),
        violated_count=violated,
        violated_fraction=violated / n_eval,
        inefficiency=inefficiency(sets),
        macro_inefficiency=float(np.mean(ineff_k)),
        accuracy=accuracy(logits, labels),
        macro_accuracy=macro_accuracy(logits, labels, num_classes),
        num_classes=num_classes,
        num_examples=len(labels),
        alpha=alpha,
        per_class=stats,
        absent_classes=[int(k) + 1 for k in np.flatnonzero(~stats.present & universe)],
    )
