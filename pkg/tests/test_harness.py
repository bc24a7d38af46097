import json

import numpy as np
import pytest

from cpkit import (
    LabelPrior,
    LogitRecordSet,
    Method,
    OracleWorld,
    ScoreConfig,
    sample_records,
    save_records,
)
from cpkit.errors import ConfigError, DataError
from cpkit.harness import (
    ExperimentConfig,
    SubsetMap,
    method_label,
    parse_method_spec,
    run_experiment,
    subset_class_map,
)


@pytest.fixture
def source_file(tmp_path):
    world = OracleWorld.sample(8, seed=3)
    rs = sample_records(world, LabelPrior.uniform(8), 400, seed=0, dataset="val")
    path = tmp_path / "val.cpl"
    save_records(rs, path)
    return path


@pytest.fixture
def target_file(tmp_path):
    world = OracleWorld.sample(8, seed=3)
    rs = sample_records(world, LabelPrior.uniform(8), 200, seed=99, dataset="shifted")
    path = tmp_path / "shifted.cpl"
    save_records(rs, path)
    return path


def base_config(source_file, **kw):
    defaults = dict(
        calibration_path=str(source_file),
        methods=[ScoreConfig(Method.THR), ScoreConfig(Method.APS)],
        alphas=[0.1],
        split_fraction=0.5,
        trials=3,
        seed=11,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestMethodSpecs:
    def test_strings(self):
        assert parse_method_spec("thr").method is Method.THR
        assert parse_method_spec("aps").method is Method.APS
        assert parse_method_spec("conv").k_reg == 5

    def test_dicts(self):
        cfg = parse_method_spec({"method": "raps", "lambda": 0.2, "k_reg": 3})
        assert (cfg.lam, cfg.k_reg) == (0.2, 3)
        cfg = parse_method_spec({"method": "raps", "preset": "transformer"})
        assert (cfg.lam, cfg.k_reg) == (0.1, 2)

    def test_bare_raps_rejected(self):
        with pytest.raises(ConfigError):
            parse_method_spec("raps")

    def test_labels(self):
        assert method_label(parse_method_spec("thr")) == "thr"
        assert method_label(parse_method_spec("conv")) == "raps[lambda=0.01,k_reg=5]"


class TestRunExperiment:
    def test_in_distribution_only(self, source_file):
        result = run_experiment(base_config(source_file))
        assert result.datasets == ["val"]
        assert len(result.cells) == 2  # two methods x one alpha x one dataset
        cell = result.cell("val", "thr", 0.1)
        assert cell["trials"] == 3
        assert 0.0 <= cell["coverage"] <= 1.0

    def test_aggregate_equals_mean_of_trials(self, source_file):
        result = run_experiment(base_config(source_file))
        for cell in result.cells:
            assert cell["coverage"] == np.mean(cell["coverage_per_trial"])

    def test_deterministic_reports(self, source_file, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run_experiment(base_config(source_file, out_dir=str(out1)))
        run_experiment(base_config(source_file, out_dir=str(out2)))
        for name in ("report.json", "summary.csv", "per_class.csv", "plot_data.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_identical_targets_identical_blocks(self, source_file, target_file):
        cfg = base_config(
            source_file,
            targets=[
                {"name": "a", "path": str(target_file)},
                {"name": "b", "path": str(target_file)},
            ],
        )
        result = run_experiment(cfg)
        for method in ("thr", "aps"):
            a = result.cell("a", method, 0.1)
            b = result.cell("b", method, 0.1)
            for key in ("coverage", "inefficiency", "macro_coverage"):
                assert a[key] == b[key]

    def test_k_mismatch_rejected(self, source_file, tmp_path):
        world = OracleWorld.sample(5, seed=1)
        rs = sample_records(world, LabelPrior.uniform(5), 50, seed=0)
        bad = tmp_path / "bad.cpl"
        save_records(rs, bad)
        cfg = base_config(source_file, targets=[{"path": str(bad)}])
        with pytest.raises(ConfigError, match="K=5"):
            run_experiment(cfg)

    def test_output_files_exist(self, source_file, tmp_path):
        out = tmp_path / "out"
        run_experiment(base_config(source_file, out_dir=str(out)))
        report = json.loads((out / "report.json").read_text())
        assert report["datasets"] == ["val"]
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("dataset,model,method,alpha")
        assert len(summary) == 1 + 2  # header + cells

    def test_in_distribution_coverage_near_target(self, tmp_path):
        # 10-trial protocol on exchangeable data: mean coverage inside
        # [0.9, 0.9 + 1/(N_cal+1)] within 0.01
        world = OracleWorld.sample(10, seed=5)
        rs = sample_records(world, LabelPrior.uniform(10), 5000, seed=1, dataset="v")
        path = tmp_path / "v.cpl"
        save_records(rs, path)
        cfg = ExperimentConfig(
            calibration_path=str(path),
            methods=[ScoreConfig(Method.THR), ScoreConfig(Method.APS), ScoreConfig.preset("conv")],
            alphas=[0.1],
            trials=10,
            seed=2,
        )
        result = run_experiment(cfg)
        n_cal = 2500
        for cell in result.cells:
            assert 0.9 - 0.01 <= cell["coverage"] <= 0.9 + 1 / (n_cal + 1) + 0.01

    def test_config_from_json(self, source_file, tmp_path):
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "calibration": {"path": str(source_file), "split": 0.5, "trials": 2, "seed": 3},
                    "methods": ["thr", {"method": "raps", "preset": "conv"}],
                    "alphas": [0.1, 0.2],
                    "targets": [],
                }
            )
        )
        cfg = ExperimentConfig.from_json_file(cfg_path)
        assert cfg.trials == 2
        assert len(cfg.methods) == 2
        result = run_experiment(cfg)
        assert len(result.cells) == 4


class TestSubsetMap:
    def test_identity_subset_is_noop(self, source_file, target_file, tmp_path):
        map_path = tmp_path / "subset.json"
        map_path.write_text(json.dumps(list(range(1, 9))))
        plain = run_experiment(base_config(source_file, targets=[{"name": "t", "path": str(target_file)}]))
        mapped = run_experiment(
            base_config(
                source_file,
                targets=[{"name": "t", "path": str(target_file), "subset_map": str(map_path)}],
            )
        )
        for method in ("thr", "aps"):
            a = plain.cell("t", method, 0.1)
            b = mapped.cell("t", method, 0.1)
            for key in ("coverage", "macro_coverage", "violated_count", "inefficiency"):
                assert a[key] == b[key]

    def test_single_class_subset_macro_equals_micro(self, source_file, tmp_path):
        world = OracleWorld.sample(8, seed=3)
        rs = sample_records(world, LabelPrior.uniform(8), 300, seed=5, dataset="one")
        keep = rs.labels == 3
        one = rs.take(np.flatnonzero(keep))
        path = tmp_path / "one.cpl"
        save_records(one, path)
        map_path = tmp_path / "single.json"
        map_path.write_text("[3]")
        result = run_experiment(
            base_config(
                source_file,
                targets=[{"name": "one", "path": str(path), "subset_map": str(map_path)}],
            )
        )
        cell = result.cell("one", "thr", 0.1)
        assert cell["macro_coverage"] == pytest.approx(cell["coverage"], abs=1e-12)

    def test_random_subset_matches_filtered_oracle(self, source_file, tmp_path):
        rng = np.random.default_rng(2)
        world = OracleWorld.sample(8, seed=3)
        rs = sample_records(world, LabelPrior.uniform(8), 500, seed=7, dataset="sub")
        subset = np.sort(rng.choice(np.arange(1, 9), size=4, replace=False))
        keep = np.isin(rs.labels, subset)
        filtered = rs.take(np.flatnonzero(keep))
        path = tmp_path / "sub.cpl"
        save_records(filtered, path)
        map_path = tmp_path / "map.json"
        map_path.write_text(json.dumps([int(c) for c in subset]))

        result = run_experiment(
            base_config(
                source_file,
                methods=[ScoreConfig(Method.THR)],
                targets=[{"name": "sub", "path": str(path), "subset_map": str(map_path)}],
            )
        )
        cell = result.cell("sub", "thr", 0.1)
        # oracle: per-class table restricted by hand to the subset classes
        per_class = {row["class"]: row for row in cell["per_class"]}
        assert set(per_class) <= set(int(c) for c in subset)
        macro = np.mean([row["cover_mean"] for row in cell["per_class"]])
        assert cell["macro_coverage"] == pytest.approx(macro, abs=1e-9)

    def test_local_labels_translated(self, tmp_path):
        logits = np.random.default_rng(0).standard_normal((6, 5)).astype(np.float32)
        local = LogitRecordSet(logits, np.array([1, 2, 1, 2, 1, 2]))
        m = subset_class_map(5, [4, 5], labels_are_local=True)
        translated = m.apply(local)
        assert list(translated.labels) == [4, 5, 4, 5, 4, 5]

    def test_subset_validation(self):
        with pytest.raises(ConfigError):
            subset_class_map(5, [1, 1])
        with pytest.raises(ConfigError):
            subset_class_map(5, [0, 1])
        with pytest.raises(ConfigError):
            subset_class_map(5, [6])

    def test_labels_outside_subset_rejected(self, source_file, target_file, tmp_path):
        map_path = tmp_path / "narrow.json"
        map_path.write_text("[1, 2]")
        cfg = base_config(
            source_file,
            targets=[{"name": "t", "path": str(target_file), "subset_map": str(map_path)}],
        )
        with pytest.raises((DataError, ConfigError)):
            run_experiment(cfg)


class TestConfigValidation:
    def test_bad_trials(self, source_file):
        with pytest.raises(ConfigError):
            base_config(source_file, trials=0)

    def test_no_methods(self, source_file):
        with pytest.raises(ConfigError):
            base_config(source_file, methods=[])

    def test_missing_calibration_block(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"methods": ["thr"], "alphas": [0.1]})
