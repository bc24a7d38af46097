import math

import numpy as np
import pytest

from cpkit import (
    CalibratedModel,
    CalibrationSet,
    Method,
    ScoreConfig,
    Side,
    calibrate_class_balanced,
    calibrate_marginal,
    finite_sample_quantile,
)
from cpkit.errors import CalibrationError, ConfigError, DataError

THR = ScoreConfig(Method.THR)
APS = ScoreConfig(Method.APS)


def brute_force_quantile(scores, level, side):
    """Independent oracle: full sort, then direct order-statistic lookup."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = s.shape[0]
    pos = level * n
    idx = math.ceil(pos) if side is Side.UPPER else math.floor(pos)
    if idx < 1:
        return float("-inf")
    if idx > n:
        return float("inf")
    return float(s[idx - 1])


class TestFiniteSampleQuantile:
    def test_upper_hand_example(self):
        scores = np.arange(1, 11) / 10.0  # 0.1 .. 1.0
        level = 0.9 * (1 + 1 / 10)
        assert finite_sample_quantile(scores, level, Side.UPPER) == 1.0

    def test_lower_level_zero_is_neg_inf(self):
        assert finite_sample_quantile([0.3, 0.7], 0.0, Side.LOWER) == float("-inf")

    def test_above_n_is_pos_inf(self):
        scores = [0.5, 0.6, 0.7]
        assert finite_sample_quantile(scores, 1 + 1 / 3, Side.UPPER) == float("inf")

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            n = int(rng.integers(1, 50))
            scores = rng.random(n)
            level = float(rng.random() * (1 + 1 / n))
            for side in (Side.LOWER, Side.UPPER):
                assert finite_sample_quantile(scores, level, side) == brute_force_quantile(
                    scores, level, side
                )

    def test_duplicates_allowed(self):
        scores = [0.5, 0.5, 0.5, 0.9]
        assert finite_sample_quantile(scores, 0.5, Side.UPPER) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(CalibrationError):
            finite_sample_quantile([], 0.5, Side.LOWER)

    def test_level_out_of_range(self):
        with pytest.raises(ConfigError):
            finite_sample_quantile([0.1, 0.2], -0.01, Side.LOWER)
        with pytest.raises(ConfigError):
            finite_sample_quantile([0.1, 0.2], 1.6, Side.UPPER)


def cal_set(scores, cfg=THR, labels=None):
    scores = np.asarray(scores, dtype=np.float64)
    if labels is None:
        labels = np.ones(len(scores), dtype=np.int64)
    return CalibrationSet(scores, labels, cfg)


class TestCalibrateMarginal:
    def test_thr_hand_example(self):
        cal = cal_set([0.5, 0.6, 0.7, 0.8, 0.9])
        model = calibrate_marginal(cal, alpha=0.2)
        assert model.threshold == 0.5
        assert int(np.sum(cal.scores > model.threshold)) == 4

    def test_aps_tiny_alpha_gives_pos_inf(self):
        cal = cal_set([0.2, 0.4, 0.6], cfg=APS)
        model = calibrate_marginal(cal, alpha=1e-9)
        assert model.threshold == float("inf")

    def test_determinism(self):
        rng = np.random.default_rng(1)
        scores = rng.random(101)
        t1 = calibrate_marginal(cal_set(scores), 0.13).threshold
        t2 = calibrate_marginal(cal_set(scores.copy()), 0.13).threshold
        assert t1 == t2

    def test_monotonicity_in_alpha(self):
        rng = np.random.default_rng(2)
        scores = rng.random(73)
        alphas = np.linspace(0.01, 0.5, 25)
        thr_taus = [calibrate_marginal(cal_set(scores), a).threshold for a in alphas]
        aps_taus = [calibrate_marginal(cal_set(scores, APS), a).threshold for a in alphas]
        assert all(t2 >= t1 for t1, t2 in zip(thr_taus, thr_taus[1:]))
        assert all(t2 <= t1 for t1, t2 in zip(aps_taus, aps_taus[1:]))

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError):
            calibrate_marginal(cal_set([0.5]), 0.0)
        with pytest.raises(ConfigError):
            calibrate_marginal(cal_set([0.5]), 1.0)

    def test_coverage_is_beta_distributed(self):
        # With U(0,1) scores, a THR threshold tau has true coverage
        # P(U > tau) = 1 - tau ~ Beta(n + 1 - l, l), l = floor(alpha (n+1)).
        rng = np.random.default_rng(3)
        n, alpha, trials = 100, 0.1, 4000
        l = math.floor(alpha * (n + 1))
        covs = np.empty(trials)
        for t in range(trials):
            tau = calibrate_marginal(cal_set(rng.random(n)), alpha).threshold
            covs[t] = 1.0 - tau
        a, b = n + 1 - l, l
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        se_mean = math.sqrt(var / trials)
        assert abs(covs.mean() - mean) < 5 * se_mean
        assert 0.7 * var < covs.var(ddof=1) < 1.4 * var

    def test_aps_coverage_matches_same_beta(self):
        # P(U < tau) = tau with tau the ceil((1-alpha)(n+1)) order statistic
        rng = np.random.default_rng(4)
        n, alpha, trials = 100, 0.1, 4000
        l = math.floor(alpha * (n + 1))
        covs = np.empty(trials)
        for t in range(trials):
            tau = calibrate_marginal(cal_set(rng.random(n), APS), alpha).threshold
            covs[t] = tau
        a, b = n + 1 - l, l
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        assert abs(covs.mean() - mean) < 5 * math.sqrt(var / trials)


class TestCalibrateClassBalanced:
    def test_symmetric_classes_match_marginal(self):
        scores = np.array([0.1, 0.4, 0.7, 0.1, 0.4, 0.7])
        labels = np.array([1, 1, 1, 2, 2, 2])
        cal = cal_set(scores, labels=labels)
        model = calibrate_class_balanced(cal, 0.2, 2)
        per_class = calibrate_marginal(cal_set([0.1, 0.4, 0.7]), 0.2).threshold
        assert model.threshold[0] == model.threshold[1] == per_class

    def test_absent_class_gets_sentinel(self):
        cal = cal_set([0.2, 0.6], labels=np.array([1, 1]))
        thr_model = calibrate_class_balanced(cal, 0.1, 3)
        assert thr_model.threshold[1] == float("-inf")
        assert thr_model.threshold[2] == float("-inf")
        aps_cal = cal_set([0.2, 0.6], cfg=APS, labels=np.array([1, 1]))
        aps_model = calibrate_class_balanced(aps_cal, 0.1, 3)
        assert aps_model.threshold[1] == float("inf")

    def test_matches_per_class_marginal_oracle(self):
        rng = np.random.default_rng(9)
        k = 20
        weights = (np.arange(1, k + 1) ** -2.0).astype(np.float64)
        weights /= weights.sum()
        labels = rng.choice(k, size=600, p=weights) + 1
        scores = rng.random(600)
        cal = cal_set(scores, labels=labels)
        model = calibrate_class_balanced(cal, 0.1, k)
        assert np.all(model.per_class_sizes == np.bincount(labels, minlength=k + 1)[1:])
        for c in range(1, k + 1):
            mask = labels == c
            if not mask.any():
                assert model.threshold[c - 1] == float("-inf")
            else:
                expect = calibrate_marginal(cal_set(scores[mask]), 0.1).threshold
                assert model.threshold[c - 1] == expect

    def test_labels_beyond_k_rejected(self):
        cal = cal_set([0.5, 0.5], labels=np.array([1, 4]))
        with pytest.raises(DataError):
            calibrate_class_balanced(cal, 0.1, 3)


class TestCalibratedModelJson:
    def test_scalar_round_trip(self):
        model = calibrate_marginal(cal_set([0.5, 0.6, 0.9]), 0.25)
        back = CalibratedModel.from_json(model.to_json())
        assert back == model

    def test_sentinel_round_trip(self):
        model = calibrate_marginal(cal_set([0.2, 0.4], cfg=APS), 1e-9)
        back = CalibratedModel.from_json(model.to_json())
        assert back.threshold == float("inf")

    def test_class_balanced_round_trip(self):
        cal = cal_set([0.2, 0.6, 0.8], labels=np.array([1, 1, 2]))
        model = calibrate_class_balanced(cal, 0.3, 3)
        back = CalibratedModel.from_json(model.to_json())
        assert back.score_config == model.score_config
        assert back.alpha == model.alpha
        assert np.all(back.threshold == model.threshold)
        assert np.all(back.per_class_sizes == model.per_class_sizes)

    def test_raps_params_preserved(self):
        cal = cal_set([0.2, 0.6, 0.8], cfg=ScoreConfig.preset("conv"))
        model = calibrate_marginal(cal, 0.1)
        back = CalibratedModel.from_json(model.to_json())
        assert back.score_config.lam == 0.01
        assert back.score_config.k_reg == 5

    def test_model_is_immutable(self):
        cal = cal_set([0.2, 0.6, 0.8], labels=np.array([1, 1, 2]))
        model = calibrate_class_balanced(cal, 0.3, 3)
        with pytest.raises((AttributeError, TypeError)):
            model.alpha = 0.5
        with pytest.raises(ValueError):
            model.threshold[0] = 0.0
