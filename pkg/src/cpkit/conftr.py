"""Conformal training at desk scale.

Simulates the conformal pipeline inside every training batch: the batch is
split in half, a smooth (soft-sorted) quantile of the calibration half's
true-class probabilities stands in for the threshold, and sigmoid margins
stand in for set membership on the prediction half. The training loss is

    L = mean(1 - E_y)  +  size_weight * mean(max(0, sum_k E_k - kappa))

with E_k the smooth membership of class k. Everything is differentiable, so
plain SGD trains the classifier to produce small prediction sets. Post-hoc
conformal calibration is still required afterwards; training only shapes the
score distribution, never the guarantee.

All tensors are float64 so analytic gradients can be checked against central
finite differences tightly. thr is the in-training score (the conformity
score of a class is its softmax probability).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, TrainingDiverged
from .synthetic import rng_for


@dataclass(frozen=True)
class SmoothCPConfig:
    """Knobs of the in-batch conformal simulation."""

    temperature: float = 0.1
    kappa: int = 1
    size_weight: float = 1.0
    alpha: float = 0.01
    batch_split_fraction: float = 0.5
    dispersion: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError(f"temperature must be in (0, 1], got {self.temperature}")
        if self.kappa not in (0, 1):
            raise ConfigError(f"kappa must be 0 or 1, got {self.kappa}")
        if self.size_weight < 0:
            raise ConfigError(f"size_weight must be non-negative, got {self.size_weight}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0.0 < self.batch_split_fraction < 1.0:
            raise ConfigError(
                f"batch_split_fraction must be in (0, 1), got {self.batch_split_fraction}"
            )
        if self.dispersion <= 0:
            raise ConfigError(f"dispersion must be positive, got {self.dispersion}")


class TinyClassifier(torch.nn.Module):
    """Small tanh MLP in float64; last entry of ``dims`` is the class count."""

    def __init__(self, dims: tuple[int, ...], seed: int = 0):
        super().__init__()
        if len(dims) < 2:
            raise ConfigError(f"need at least input and output dims, got {dims}")
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for i in range(len(dims) - 1):
            lin = torch.nn.Linear(dims[i], dims[i + 1], dtype=torch.float64)
            bound = 1.0 / math.sqrt(dims[i])
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers.append(lin)
        self.layers = torch.nn.ModuleList(layers)
        self.dims = tuple(dims)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.tanh(lin(x))
        return self.layers[-1](x)

    def logits_numpy(self, features: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self(torch.as_tensor(features, dtype=torch.float64))
        return out.numpy()


def soft_sort(values: torch.Tensor, dispersion: float) -> torch.Tensor:
    """Smooth ascending sort: each output is a softmax-weighted average of the
    inputs, with weights peaked on the entry whose hard-sorted value matches.
    Converges to the hard sort as dispersion -> 0 on distinct inputs."""
    if dispersion <= 0:
        raise ConfigError(f"dispersion must be positive, got {dispersion}")
    anchors = torch.sort(values).values.unsqueeze(1)
    weights = torch.softmax(-((values.unsqueeze(0) - anchors) ** 2) / dispersion, dim=1)
    return weights @ values


def _interp(sorted_vals: torch.Tensor, position: float) -> torch.Tensor:
    """Linear interpolation at a 1-indexed (possibly fractional) position."""
    n = sorted_vals.shape[0]
    position = min(max(position, 1.0), float(n))
    lo = int(math.floor(position))
    frac = position - lo
    if frac == 0.0 or lo >= n:
        return sorted_vals[lo - 1]
    return (1.0 - frac) * sorted_vals[lo - 1] + frac * sorted_vals[lo]


def smooth_quantile_t(scores: torch.Tensor, level: float, dispersion: float) -> torch.Tensor:
    """Differentiable lower-side quantile of ``scores`` at ``level``.

    The smooth-sorted scores are read at the same floor(level*N) index the
    hard rule uses (clamped into range, interpolating any fractional
    position), so the value converges to the hard order statistic as the
    dispersion shrinks.
    """
    n = scores.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 scores for a smooth quantile, got {n}")
    ss = soft_sort(scores, dispersion)
    return _interp(ss, float(math.floor(level * n)))


def smooth_quantile(scores, level: float, cfg: SmoothCPConfig) -> tuple[float, np.ndarray]:
    """Smooth quantile value plus its gradient with respect to the scores."""
    t = torch.as_tensor(np.asarray(scores, dtype=np.float64), dtype=torch.float64)
    t.requires_grad_(True)
    q = smooth_quantile_t(t, level, cfg.dispersion)
    (grad,) = torch.autograd.grad(q, t)
    return float(q.detach()), grad.numpy()


def smooth_assignment(score, tau, temperature: float, higher_is_conforming: bool = True):
    """Sigmoid set-membership in (0, 1); 0.5 exactly at the threshold.

    Works on floats or tensors. The margin is oriented so that a more
    conforming score gives a larger value.
    """
    score_t = score if torch.is_tensor(score) else torch.as_tensor(float(score), dtype=torch.float64)
    margin = (score_t - tau) if higher_is_conforming else (tau - score_t)
    out = torch.sigmoid(margin / temperature)
    return out if (torch.is_tensor(score) or torch.is_tensor(tau)) else float(out)


def size_loss(memberships, kappa: int):
    """Hinge on the smooth set size: max(0, sum_k E_k - kappa)."""
    e = memberships if torch.is_tensor(memberships) else torch.as_tensor(
        np.asarray(memberships, dtype=np.float64)
    )
    out = torch.relu(e.sum(dim=-1) - kappa)
    return out if torch.is_tensor(memberships) else float(out)


def class_loss(memberships, true_label: int):
    """1 - E_y: pushed to zero when the true class is fully inside the set."""
    e = memberships if torch.is_tensor(memberships) else torch.as_tensor(
        np.asarray(memberships, dtype=np.float64)
    )
    out = 1.0 - e[..., true_label - 1]
    return out if torch.is_tensor(memberships) else float(out)


def _split_batch(n: int, fraction: float, split_seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_cal = int(round(n * fraction))
    if n_cal < 2 or n - n_cal < 1:
        raise ConfigError(
            f"batch of {n} is too small for a {fraction:.2f} calibration split"
        )
    perm = rng_for(split_seed, "batch-split", n).permutation(n)
    return perm[:n_cal], perm[n_cal:]


def conftr_loss(
    features,
    labels,
    model: TinyClassifier,
    cfg: SmoothCPConfig,
    split_seed: int = 0,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> torch.Tensor:
    """Forward pass of one conformal-training step (no gradients taken).

    ``split`` overrides the seeded random calibration/prediction partition
    with explicit index arrays.
    """
    x = torch.as_tensor(np.asarray(features, dtype=np.float64), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if split is not None:
        cal_idx, pred_idx = (np.asarray(s, dtype=np.int64) for s in split)
        if len(cal_idx) < 2 or len(pred_idx) < 1:
            raise ConfigError("explicit split leaves a half too small")
    else:
        cal_idx, pred_idx = _split_batch(x.shape[0], cfg.batch_split_fraction, split_seed)

    probs_cal = torch.softmax(model(x[cal_idx]), dim=1)
    cal_scores = probs_cal[torch.arange(len(cal_idx)), y[cal_idx] - 1]
    level = cfg.alpha * (1.0 + 1.0 / len(cal_idx))
    tau = smooth_quantile_t(cal_scores, level, cfg.dispersion)

    probs_pred = torch.softmax(model(x[pred_idx]), dim=1)
    memberships = smooth_assignment(probs_pred, tau, cfg.temperature)
    l_class = (1.0 - memberships[torch.arange(len(pred_idx)), y[pred_idx] - 1]).mean()
    l_size = size_loss(memberships, cfg.kappa).mean()
    return l_class + cfg.size_weight * l_size


def conftr_step(
    features,
    labels,
    model: TinyClassifier,
    cfg: SmoothCPConfig,
    split_seed: int = 0,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients of one conformal-training step."""
    model.zero_grad(set_to_none=True)
    loss = conftr_loss(features, labels, model, cfg, split_seed, split=split)
    loss.backward()
    grads = {
        name: p.grad.detach().clone().numpy() for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


def _xent_loss(features, labels, model: TinyClassifier) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(features, dtype=np.float64), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64)) - 1
    return torch.nn.functional.cross_entropy(model(x), y)


def train(
    features,
    labels,
    cfg: SmoothCPConfig,
    *,
    model: TinyClassifier,
    epochs: int,
    lr: float,
    batch_size: int = 128,
    seed: int = 0,
    objective: str = "conftr",
) -> tuple[TinyClassifier, list[float]]:
    """Plain fixed-step SGD; returns the model and the per-step loss trajectory.

    ``objective`` is "conftr" or "cross_entropy" (the baseline). Aborts with
    TrainingDiverged (carrying the trajectory) if the loss goes non-finite.
    """
    if objective not in ("conftr", "cross_entropy"):
        raise ConfigError(f"unknown objective {objective!r}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    trajectory: list[float] = []
    step = 0
    for epoch in range(epochs):
        order = rng_for(seed, "epoch-shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 4:
                continue
            model.zero_grad(set_to_none=True)
            if objective == "conftr":
                loss = conftr_loss(x[idx], y[idx], model, cfg, split_seed=seed * 100003 + step)
            else:
                loss = _xent_loss(x[idx], y[idx], model)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}", trajectory
                )
            trajectory.append(value)
            loss.backward()
            with torch.no_grad():
                for p in model.parameters():
                    p -= lr * p.grad
            step += 1
    return model, trajectory


def make_mixture_task(
    num_classes: int = 4,
    dim: int = 2,
    n_train: int = 2000,
    n_cal: int = 2000,
    n_test: int = 2000,
    seed: int = 0,
    spread: float = 1.3,
    noise_scale: float = 1.0,
):
    """Gaussian-mixture classification task with heteroscedastic noise.

    Per-class noise scales vary (0.6x..1.8x), so the Bayes posterior has
    quadratic boundaries a small softmax classifier cannot represent; that
    misspecification is what gives the size loss room to beat plain
    cross-entropy on set size.
    """
    from .synthetic import LabelPrior, OracleWorld

    world = OracleWorld.sample(num_classes, dim=dim, spread=spread,
                               noise_scale=noise_scale, seed=seed)
    prior = LabelPrior.uniform(num_classes)
    scales = np.linspace(0.6, 1.8, num_classes)

    def draw(n, tag):
        rng = rng_for(seed, "mixture-task", tag)
        labels = rng.choice(num_classes, size=n, p=prior.weights) + 1
        feats = world.class_means[labels - 1] + (
            noise_scale * scales[labels - 1, None]
        ) * rng.standard_normal((n, dim))
        return feats, labels

    return draw(n_train, "train"), draw(n_cal, "cal"), draw(n_test, "test")


def _posthoc_thr_eval(model: TinyClassifier, cal, test, alpha: float):
    from .calibration import CalibrationSet, calibrate_marginal
    from .metrics import coverage, inefficiency
    from .prediction import predict_batch
    from .records import LogitRecordSet
    from .scores import Method, ScoreConfig

    (x_cal, y_cal), (x_test, y_test) = cal, test
    cal_rs = LogitRecordSet(model.logits_numpy(x_cal).astype(np.float32), y_cal)
    test_rs = LogitRecordSet(model.logits_numpy(x_test).astype(np.float32), y_test)
    cal_set = CalibrationSet.from_records(cal_rs, ScoreConfig(Method.THR))
    calibrated = calibrate_marginal(cal_set, alpha)
    sets = predict_batch(test_rs, calibrated)
    return coverage(sets, y_test), inefficiency(sets)


def compare_with_baseline(
    num_classes: int = 4,
    dim: int = 2,
    n_train: int = 2000,
    cfg: SmoothCPConfig = SmoothCPConfig(),
    epochs: int = 40,
    lr: float = 0.2,
    hidden: int = 16,
    batch_size: int = 500,
    seeds=(0,),
    out_dir=None,
) -> dict:
    """Train baseline (cross-entropy) and conformal models from shared inits,
    then compare their post-hoc thr coverage and inefficiency per seed."""
    rows = []
    for seed in seeds:
        train_xy, cal_xy, test_xy = make_mixture_task(
            num_classes, dim, n_train=n_train, seed=seed
        )
        dims = (dim, hidden, num_classes)
        baseline = TinyClassifier(dims, seed=seed)
        conformal = TinyClassifier(dims, seed=seed)
        baseline, _ = train(
            *train_xy, cfg, model=baseline, epochs=epochs, lr=lr,
            batch_size=batch_size, seed=seed, objective="cross_entropy",
        )
        conformal, _ = train(
            *train_xy, cfg, model=conformal, epochs=epochs, lr=lr,
            batch_size=batch_size, seed=seed, objective="conftr",
        )
        b_cov, b_ineff = _posthoc_thr_eval(baseline, cal_xy, test_xy, cfg.alpha)
        c_cov, c_ineff = _posthoc_thr_eval(conformal, cal_xy, test_xy, cfg.alpha)
        rows.append(
            {
                "seed": int(seed),
                "baseline": {"coverage": b_cov, "inefficiency": b_ineff},
                "conftr": {"coverage": c_cov, "inefficiency": c_ineff},
            }
        )
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            torch.save(baseline.state_dict(), out / f"baseline_seed{seed}.pt")
            torch.save(conformal.state_dict(), out / f"conftr_seed{seed}.pt")

    wins = sum(r["conftr"]["inefficiency"] <= r["baseline"]["inefficiency"] for r in rows)
    report = {
        "alpha": cfg.alpha,
        "num_classes": num_classes,
        "seeds": [r["seed"] for r in rows],
        "per_seed": rows,
        "mean": {
            side: {
                key: float(np.mean([r[side][key] for r in rows]))
                for key in ("coverage", "inefficiency")
            }
            for side in ("baseline", "conftr")
        },
        "conftr_wins_inefficiency": int(wins),
    }
    if out_dir is not None:
        with open(Path(out_dir) / "comparison.json", "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    return report
