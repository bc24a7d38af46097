"""Synthetic desk-scale data with known ground truth.

The generator is a Gaussian mixture: class k has mean ``class_means[k-1]``
and isotropic noise ``noise_scale``. The "model" under evaluation emits the
log-posterior of the *unshifted* mixture, so drawing data from a shifted
mixture produces exactly the kind of miscalibration that breaks coverage.

Shift severities run 0..5 (0 = identity), each mapping linearly onto its
transform:

* ``mean_drift`` moves every sampling mean toward the midpoint of the next
  two classes (cyclic by index) by ``MEAN_DRIFT_RATE * severity`` of the
  way, and widens the sampling noise by ``MEAN_DRIFT_DISPERSION * severity``.
  The drift pushes true classes down the model's ranking while the extra
  dispersion keeps the posterior spread out, so coverage falls and set
  sizes grow for thr, aps, and raps alike.
* ``feature_noise`` attenuates the class signal by ``FEATURE_NOISE_FADE *
  severity`` and inflates the sampling noise by ``FEATURE_NOISE_RATE *
  severity`` (contrast loss plus additive noise).
* ``label_prior`` mixes the sampling prior toward its class-reversed
  counterpart, reaching the full reversal at severity 5.

The constants were tuned once on the default world
(``OracleWorld.sample(10)``: dim 4, spread 1.6, noise 1.0) so that both
coverage degradation and inefficiency growth are monotone across severities
for all three score functions; top-1 accuracy roughly halves near severity 2
and keeps falling.

All randomness flows through Philox streams keyed by (seed, purpose tag), so
parallel trials never share generator state.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .records import LogitRecordSet

#: fractional increase of the feature-noise std per severity unit
FEATURE_NOISE_RATE = 0.12
#: fractional signal attenuation per severity unit under feature noise
FEATURE_NOISE_FADE = 0.10
#: fraction of the way toward the next-two-class midpoint per severity unit
MEAN_DRIFT_RATE = 0.11
#: fractional increase of the sampling noise per severity unit under drift
MEAN_DRIFT_DISPERSION = 0.12


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Counter-based generator keyed by (seed, tags); stable across runs."""
    digest = hashlib.sha256(repr(tags).encode("utf-8")).digest()
    tag_words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(tag_words))
    return np.random.Generator(np.random.Philox(ss))


class ShiftKind(str, enum.Enum):
    NONE = "none"
    FEATURE_NOISE = "feature_noise"
    MEAN_DRIFT = "mean_drift"
    LABEL_PRIOR = "label_prior"


@dataclass(frozen=True)
class ShiftSpec:
    kind: ShiftKind = ShiftKind.NONE
    severity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if not 0.0 <= self.severity <= 5.0:
            raise ConfigError(f"severity must lie in [0, 5], got {self.severity}")
        if self.kind is ShiftKind.NONE and self.severity != 0.0:
            raise ConfigError("shift kind 'none' requires severity 0")

    @classmethod
    def none(cls) -> "ShiftSpec":
        return cls(ShiftKind.NONE, 0.0)


@dataclass(frozen=True)
class LabelPrior:
    weights: np.ndarray
    family: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if np.any(w < 0):
            raise ConfigError("prior weights must be non-negative")
        total = w.sum()
        if total <= 0:
            raise ConfigError("prior weights must not all be zero")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelPrior":
        return cls(np.full(num_classes, 1.0 / num_classes), family="uniform")

    @classmethod
    def zipf(cls, num_classes: int, s: float) -> "LabelPrior":
        """Weights proportional to rank^(-s); class 1 is the head."""
        ranks = np.arange(1, num_classes + 1, dtype=np.float64)
        return cls(ranks**-s, family=f"zipf({s})")


@dataclass(frozen=True)
class OracleWorld:
    """Gaussian-mixture ground truth with closed-form posteriors."""

    class_means: np.ndarray
    noise_scale: float
    seed: int

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ShapeError(f"class_means must be K x d with K >= 2, got {means.shape}")
        if self.noise_scale <= 0:
            raise ConfigError(f"noise_scale must be positive, got {self.noise_scale}")
        means.setflags(write=False)
        object.__setattr__(self, "class_means", means)

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @classmethod
    def sample(
        cls,
        num_classes: int,
        dim: int = 4,
        spread: float = 1.6,
        noise_scale: float = 1.0,
        seed: int = 0,
    ) -> "OracleWorld":
        """World with class means drawn i.i.d. from N(0, spread^2 I)."""
        rng = rng_for(seed, "class-means")
        means = spread * rng.standard_normal((num_classes, dim))
        return cls(class_means=means, noise_scale=noise_scale, seed=seed)

    def log_posterior(self, features: np.ndarray, prior: LabelPrior) -> np.ndarray:
        """Log posterior logits of the unshifted mixture, up to a row constant."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"features must be N x {self.dim}, got {x.shape}")
        if prior.num_classes != self.num_classes:
            raise ShapeError("prior and world disagree on the number of classes")
        if np.any(prior.weights == 0):
            raise ConfigError("the model prior must give every class nonzero mass")
        sq = ((x[:, None, :] - self.class_means[None, :, :]) ** 2).sum(axis=2)
        return np.log(prior.weights)[None, :] - sq / (2.0 * self.noise_scale**2)


def _sampling_distribution(
    world: OracleWorld, prior: LabelPrior, shift: ShiftSpec
) -> tuple[np.ndarray, np.ndarray, float]:
    """(sampling weights, sampling means, sampling noise std) under the shift."""
    weights = prior.weights
    means = world.class_means
    noise = world.noise_scale
    if shift.kind is ShiftKind.FEATURE_NOISE:
        fade = max(1.0 - FEATURE_NOISE_FADE * shift.severity, 0.05)
        means = fade * means
        noise = noise * (1.0 + FEATURE_NOISE_RATE * shift.severity)
    elif shift.kind is ShiftKind.MEAN_DRIFT:
        target = (np.roll(means, -1, axis=0) + np.roll(means, -2, axis=0)) / 2.0
        frac = MEAN_DRIFT_RATE * shift.severity
        means = means + frac * (target - means)
        noise = noise * (1.0 + MEAN_DRIFT_DISPERSION * shift.severity)
    elif shift.kind is ShiftKind.LABEL_PRIOR:
        t = shift.severity / 5.0
        weights = (1.0 - t) * weights + t * weights[::-1]
    return weights, means, noise


def sample_features(
    world: OracleWorld,
    prior: LabelPrior,
    n: int,
    shift: ShiftSpec = ShiftSpec.none(),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (features, labels) from the (possibly shifted) mixture."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    if prior.num_classes != world.num_classes:
        raise ShapeError("prior and world disagree on the number of classes")
    weights, means, noise = _sampling_distribution(world, prior, shift)
    # severity 0 is the identity for every kind: same stream as no shift
    kind = ShiftKind.NONE.value if shift.severity == 0.0 else shift.kind.value
    rng = rng_for(seed, "sample", world.seed, kind, round(shift.severity, 9))
    labels = rng.choice(world.num_classes, size=n, p=weights) + 1
    features = means[labels - 1] + noise * rng.standard_normal((n, world.dim))
    return features, labels


def sample_records(
    world: OracleWorld,
    prior: LabelPrior,
    n: int,
    shift: ShiftSpec = ShiftSpec.none(),
    seed: int = 0,
    dataset: str = "synthetic",
    model: str = "oracle",
) -> LogitRecordSet:
    """Draw labeled logits: shifted data, scored by the unshifted posterior."""
    features, labels = sample_features(world, prior, n, shift, seed)
    logits = world.log_posterior(features, prior)
    return LogitRecordSet(
        logits=logits.astype(np.float32),
        labels=labels,
        dataset=dataset,
        model=model,
        tags={
            "shift": shift.kind.value,
            "severity": shift.severity,
            "prior": prior.family,
            "seed": int(seed),
            "world_seed": int(world.seed),
        },
    )


def split(records: LogitRecordSet, fraction: float, seed: int) -> tuple[LogitRecordSet, LogitRecordSet]:
    """Random partition into (first, rest); both halves keep record order."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n = records.num_examples
    m = int(fraction * n)
    if m < 1 or m >= n:
        raise ConfigError(f"split fraction {fraction} leaves an empty half for n={n}")
    perm = rng_for(seed, "split", n).permutation(n)
    first = np.sort(perm[:m])
    rest = np.sort(perm[m:])
    return records.take(first), records.take(rest)
