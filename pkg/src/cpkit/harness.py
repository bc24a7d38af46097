"""Config-driven experiment runner: calibrate once, evaluate everywhere.

Each trial splits the calibration source, fits one CalibratedModel per
(method, alpha) cell on the calibration half, then applies that frozen model
to the held-out test half and to every external target. Metrics are averaged
across trials (mean and sample std). Reports are written as JSON, a flat
summary CSV, a per-class CSV, and a plot-data file; all outputs are
byte-deterministic for a fixed config.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (
    CalibrationSet,
    calibrate_class_balanced,
    calibrate_marginal,
)
from .errors import ConfigError, CPKitError, DataError
from .metrics import EvalReport, evaluate_sets
from .prediction import predict_batch
from .records import LogitRecordSet, load_records
from .scores import Method, ScoreConfig

METRIC_KEYS = (
    "coverage",
    "macro_coverage",
    "violated_count",
    "violated_fraction",
    "inefficiency",
    "macro_inefficiency",
    "accuracy",
    "macro_accuracy",
)


@dataclass(frozen=True)
class SubsetMap:
    """Restriction of the evaluated label space to a subset of the K classes.

    ``classes`` are 1-based full-space indices. When ``labels_are_local`` is
    set, target labels are positions into ``classes`` and get translated on
    load. Scoring always uses all K classes; only coverage accounting is
    restricted.
    """

    classes: np.ndarray
    labels_are_local: bool = False

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.int64).ravel()
        if c.size == 0:
            raise ConfigError("subset map must list at least one class")
        if np.unique(c).size != c.size:
            raise ConfigError("subset map has duplicate classes")
        if c.min() < 1:
            raise ConfigError("subset map classes are 1-indexed")
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    @classmethod
    def from_file(cls, path) -> "SubsetMap":
        with open(path) as f:
            raw = json.load(f)
        if isinstance(raw, list):
            return cls(np.asarray(raw))
        return cls(np.asarray(raw["classes"]), bool(raw.get("labels_are_local", False)))

    def apply(self, records: LogitRecordSet) -> LogitRecordSet:
        if not self.labels_are_local:
            return records
        if records.labels.max() > self.classes.shape[0]:
            raise DataError(
                f"local labels reach {int(records.labels.max())} but the subset "
                f"map lists {self.classes.shape[0]} classes"
            )
        return LogitRecordSet(
            logits=records.logits,
            labels=self.classes[records.labels - 1],
            dataset=records.dataset,
            model=records.model,
            tags=dict(records.tags),
        )


def subset_class_map(full_k: int, subset, labels_are_local: bool = False) -> SubsetMap:
    """Build and validate a subset map against a K-class label space."""
    m = SubsetMap(np.asarray(subset), labels_are_local)
    if m.classes.max() > full_k:
        raise ConfigError(f"subset map reaches class {int(m.classes.max())} but K={full_k}")
    return m


@dataclass(frozen=True)
class EvalTarget:
    name: str
    records: LogitRecordSet
    subset: SubsetMap | None = None


@dataclass
class ExperimentConfig:
    calibration_path: str
    methods: list[ScoreConfig]
    alphas: list[float]
    split_fraction: float = 0.5
    trials: int = 10
    seed: int = 0
    class_balanced: bool = False
    targets: list[dict] = field(default_factory=list)
    out_dir: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"need at least one trial, got {self.trials}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split fraction must be in (0, 1), got {self.split_fraction}")
        if not self.methods:
            raise ConfigError("no methods configured")
        if not self.alphas:
            raise ConfigError("no alphas configured")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cal = d.get("calibration")
        if not isinstance(cal, dict) or "path" not in cal:
            raise ConfigError("config needs a 'calibration' object with a 'path'")
        methods = [parse_method_spec(m) for m in d.get("methods", [])]
        targets = []
        for t in d.get("targets", []):
            if isinstance(t, str):
                targets.append({"path": t})
            elif isinstance(t, dict) and "path" in t:
                targets.append(dict(t))
            else:
                raise ConfigError(f"bad target entry: {t!r}")
        return cls(
            calibration_path=cal["path"],
            methods=methods,
            alphas=[float(a) for a in d.get("alphas", [])],
            split_fraction=float(cal.get("split", 0.5)),
            trials=int(cal.get("trials", 10)),
            seed=int(cal.get("seed", 0)),
            class_balanced=bool(d.get("class_balanced", False)),
            targets=targets,
            out_dir=d.get("out"),
        )

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def parse_method_spec(spec) -> ScoreConfig:
    """Accept 'thr' / 'aps' / {'method': 'raps', 'preset': 'conv'} / explicit params."""
    if isinstance(spec, str):
        if spec in ("thr", "aps"):
            return ScoreConfig(Method(spec))
        if spec == "raps":
            raise ConfigError("raps needs lambda/k_reg or a preset")
        return ScoreConfig.preset(spec)
    if isinstance(spec, dict):
        method = Method(spec["method"])
        if method is Method.RAPS:
            if "preset" in spec:
                return ScoreConfig.preset(spec["preset"])
            return ScoreConfig(method, lam=float(spec["lambda"]), k_reg=int(spec["k_reg"]))
        return ScoreConfig(method)
    raise ConfigError(f"bad method spec: {spec!r}")


def method_label(cfg: ScoreConfig) -> str:
    if cfg.method is Method.RAPS:
        return f"raps[lambda={cfg.lam},k_reg={cfg.k_reg}]"
    return cfg.method.value


def _evaluate(records: LogitRecordSet, model, alpha: float, subset: SubsetMap | None) -> EvalReport:
    sets = predict_batch(records, model)
    universe = subset.classes if subset is not None else None
    return evaluate_sets(
        sets, records.labels, records.logits, records.num_classes, alpha, class_universe=universe
    )


def _aggregate(reports: list[EvalReport]) -> dict:
    agg: dict = {"trials": len(reports)}
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        agg[key] = float(vals.mean())
        agg[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        agg[f"{key}_per_trial"] = [float(v) for v in vals]
    k = reports[0].num_classes
    count_sum = np.zeros(k)
    cover_sum = np.zeros(k)
    ineff_sum = np.zeros(k)
    present_trials = np.zeros(k, dtype=np.int64)
    for r in reports:
        pc = r.per_class
        present = pc.present
        present_trials += present
        count_sum[present] += pc.counts[present]
        cover_sum[present] += pc.cover[present]
        ineff_sum[present] += pc.ineff[present]
    per_class = []
    for c in range(k):
        if present_trials[c] == 0:
            continue
        per_class.append(
            {
                "class": c + 1,
                "present_trials": int(present_trials[c]),
                "n_mean": count_sum[c] / present_trials[c],
                "cover_mean": cover_sum[c] / present_trials[c],
                "ineff_mean": ineff_sum[c] / present_trials[c],
            }
        )
    agg["per_class"] = per_class
    return agg


@dataclass
class ExperimentResult:
    config: dict
    datasets: list[str]
    cells: list[dict]

    def to_dict(self) -> dict:
        return {"config": self.config, "datasets": self.datasets, "results": self.cells}

    def cell(self, dataset: str, method: str, alpha: float) -> dict:
        for c in self.cells:
            if (
                c["dataset"] == dataset
                and c["method"] == method
                and math.isclose(c["alpha"], alpha)
            ):
                return c
        raise KeyError((dataset, method, alpha))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            header = ["dataset", "model", "method", "alpha", "class_balanced", "trials"]
            for key in METRIC_KEYS:
                header += [key, f"{key}_std"]
            w.writerow(header)
            for c in self.cells:
                row = [
                    c["dataset"],
                    c["model"],
                    c["method"],
                    c["alpha"],
                    c["class_balanced"],
                    c["trials"],
                ]
                for key in METRIC_KEYS:
                    row += [c[key], c[f"{key}_std"]]
                w.writerow(row)
        with open(out / "per_class.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                [
                    "dataset",
                    "model",
                    "method",
                    "alpha",
                    "class",
                    "present_trials",
                    "n_mean",
                    "cover_mean",
                    "ineff_mean",
                ]
            )
            for c in self.cells:
                for pc in c["per_class"]:
                    w.writerow(
                        [
                            c["dataset"],
                            c["model"],
                            c["method"],
                            c["alpha"],
                            pc["class"],
                            pc["present_trials"],
                            pc["n_mean"],
                            pc["cover_mean"],
                            pc["ineff_mean"],
                        ]
                    )
        plot_rows = [
            {
                "dataset": c["dataset"],
                "severity": c["severity"],
                "method": c["method"],
                "alpha": c["alpha"],
                "coverage": c["coverage"],
                "coverage_std": c["coverage_std"],
                "inefficiency": c["inefficiency"],
                "inefficiency_std": c["inefficiency_std"],
            }
            for c in self.cells
        ]
        with open(out / "plot_data.json", "w") as f:
            json.dump(plot_rows, f, indent=2)
            f.write("\n")


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    from .synthetic import split  # deferred: synthetic imports records

    source = load_records(cfg.calibration_path)
    source_name = source.dataset or "in_distribution"
    targets: list[EvalTarget] = []
    for t in cfg.targets:
        records = load_records(t["path"])
        subset = None
        if t.get("subset_map"):
            subset = SubsetMap.from_file(t["subset_map"])
            if subset.classes.max() > source.num_classes:
                raise ConfigError(
                    f"subset map for {t['path']} reaches class {int(subset.classes.max())} "
                    f"but K={source.num_classes}"
                )
            records = subset.apply(records)
        if records.num_classes != source.num_classes:
            raise ConfigError(
                f"target {t['path']} has K={records.num_classes} but the calibration "
                f"source has K={source.num_classes}; a subset map cannot change the "
                "logit width"
            )
        name = t.get("name") or records.dataset or Path(t["path"]).stem
        targets.append(EvalTarget(name=name, records=records, subset=subset))

    cell_reports: dict[tuple[str, str, float], list[EvalReport]] = {}
    dataset_names = [source_name] + [t.name for t in targets]
    for trial in range(cfg.trials):
        try:
            cal_rs, test_rs = split(source, cfg.split_fraction, cfg.seed + trial)
            for mcfg in cfg.methods:
                cal = CalibrationSet.from_records(cal_rs, mcfg)
                for alpha in cfg.alphas:
                    if cfg.class_balanced:
                        model = calibrate_class_balanced(cal, alpha, source.num_classes)
                    else:
                        model = calibrate_marginal(cal, alpha)
                    label = method_label(mcfg)
                    evals = [(source_name, test_rs, None)] + [
                        (t.name, t.records, t.subset) for t in targets
                    ]
                    for name, records, subset in evals:
                        report = _evaluate(records, model, alpha, subset)
                        cell_reports.setdefault((name, label, alpha), []).append(report)
        except CPKitError as e:
            raise type(e)(f"trial {trial} failed: {e}") from e

    severity_by_name = {source_name: source.tags.get("severity")}
    for t in targets:
        severity_by_name[t.name] = t.records.tags.get("severity")
    model_by_name = {source_name: source.model}
    for t in targets:
        model_by_name[t.name] = t.records.model

    cells = []
    for mcfg in cfg.methods:
        label = method_label(mcfg)
        for alpha in cfg.alphas:
            for name in dataset_names:
                agg = _aggregate(cell_reports[(name, label, alpha)])
                cell = {
                    "dataset": name,
                    "model": model_by_name[name],
                    "severity": severity_by_name[name],
                    "method": label,
                    "alpha": alpha,
                    "class_balanced": cfg.class_balanced,
                }
                cell.update(agg)
                cells.append(cell)

    config_echo = {
        "calibration_path": str(cfg.calibration_path),
        "split_fraction": cfg.split_fraction,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "class_balanced": cfg.class_balanced,
        "methods": [m.to_dict() for m in cfg.methods],
        "alphas": list(cfg.alphas),
        "targets": [dict(t) for t in cfg.targets],
    }
    result = ExperimentResult(config=config_echo, datasets=dataset_names, cells=cells)
    if cfg.out_dir:
        result.write(cfg.out_dir)
    return result
