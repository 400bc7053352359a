import math

import numpy as np
import pytest

from mfg_moments import (
    ObservedSeries,
    ScenarioError,
    classify_branch,
    closed_form_moments_const,
    evaluate_fit,
    fit_parameters,
    series_from_csv,
    series_to_csv,
)


def synthetic(a, b, K, t, init=None, noise=0.0, seed=0):
    init = init or {"E0": 1.0, "E0p": 0.3, "V0": 1.0, "V0p": 0.2}
    cf = closed_form_moments_const(a, b, K, init)
    E = cf.E_fn(t)
    V = np.abs(cf.V_fn(t))
    if noise:
        rng = np.random.default_rng(seed)
        scale = float(np.max(np.abs(E)))
        E = E + noise * scale * rng.standard_normal(len(t))
        V = np.abs(V + noise * float(np.max(V)) * rng.standard_normal(len(t)))
    return ObservedSeries(t=t, E=E, V=V)


class TestObservedSeries:
    def test_requires_eight_samples(self):
        with pytest.raises(ScenarioError, match="at least 8"):
            ObservedSeries(t=np.arange(5.0), E=np.zeros(5), V=np.ones(5))

    def test_rejects_negative_variance(self):
        t = np.linspace(0, 1, 10)
        with pytest.raises(ScenarioError, match="nonnegative"):
            ObservedSeries(t=t, E=np.zeros(10), V=-np.ones(10))

    def test_rejects_decreasing_times(self):
        t = np.linspace(1, 0, 10)
        with pytest.raises(ScenarioError, match="increasing"):
            ObservedSeries(t=t, E=np.zeros(10), V=np.ones(10))

    def test_csv_round_trip(self):
        t = np.linspace(0, 2, 12)
        series = ObservedSeries(t=t, E=np.sin(t), V=1 + 0.1 * t)
        again = series_from_csv(series_to_csv(series))
        assert np.array_equal(series.t, again.t)
        assert np.array_equal(series.E, again.E)
        assert np.array_equal(series.V, again.V)


class TestClassification:
    def test_oscillatory_series(self):
        t = np.linspace(0, 5, 50)
        E = 0.3 * np.sin(math.sqrt(2) * t) + 0.7 * np.cos(math.sqrt(2) * t)
        series = ObservedSeries(t=t, E=E, V=np.ones(50))
        branch, confidence = classify_branch(series)
        assert branch == "oscillatory"
        assert confidence > 0

    def test_exponential_series(self):
        t = np.linspace(0, 2, 40)
        series = ObservedSeries(t=t, E=np.sinh(math.sqrt(2) * t), V=np.ones(40))
        assert classify_branch(series)[0] == "exponential"

    def test_polynomial_series(self):
        t = np.linspace(0, 3, 40)
        series = ObservedSeries(t=t, E=1 + 2 * t - t**2, V=np.ones(40))
        assert classify_branch(series)[0] == "polynomial"

    def test_constant_series_prefers_fewest_parameters(self):
        series = ObservedSeries(t=np.linspace(0, 5, 30), E=np.full(30, 2.5), V=np.ones(30))
        assert classify_branch(series)[0] == "polynomial"


class TestFit:
    # windows chosen so the variance curve stays positive (the oscillatory
    # one focuses periodically) while the frequency is still resolvable
    @pytest.mark.parametrize("a,b,K,window,init", [
        (1.0, 0.5, 0.1, 1.08, {"E0": 1.0, "E0p": 0.3, "V0": 1.0, "V0p": 0.0}),
        (-1.0, 0.5, 0.8, 2.0, {"E0": 0.5, "E0p": 1.0, "V0": 1.0, "V0p": 0.2}),
        (0.0, 0.6, 0.6, 3.0, {"E0": 1.0, "E0p": 2.0, "V0": 1.0, "V0p": 1.0}),
    ])
    def test_noiseless_round_trip(self, a, b, K, window, init):
        t = np.linspace(0, window, 50)
        series = synthetic(a, b, K, t, init=init)
        params = fit_parameters(series)
        assert abs(params.a - a) < 1e-6
        assert abs(params.b[0] - b) < 1e-6
        assert abs(params.K - K) < 1e-6
        diag = evaluate_fit(params, series)
        assert diag.rms_E < 1e-8
        assert diag.max_deviation_E < 1e-7

    def test_noisy_recovery_within_five_percent(self):
        # a and b come from the expectation fit; sample more than a period
        t = np.linspace(0, 5, 50)
        errs_a, errs_b = [], []
        for seed in range(30):
            series = synthetic(1.0, 0.5, 0.3, t, noise=0.01, seed=seed)
            params = fit_parameters(series)
            errs_a.append(abs(params.a - 1.0) / 1.0)
            errs_b.append(abs(params.b[0] - 0.5) / 0.5)
        assert np.percentile(errs_a, 95) < 0.05
        assert np.percentile(errs_b, 95) < 0.05

    def test_constant_series_unidentifiable_pair(self):
        series = ObservedSeries(t=np.linspace(0, 5, 30), E=np.full(30, 2.5), V=np.ones(30))
        params = fit_parameters(series)
        assert params.branch == "polynomial"
        assert params.a == 0.0
        assert abs(params.b[0]) < 1e-10
        assert not params.identifiable
        assert np.all(np.isinf(params.cov_ab))

    def test_scale_equivariance(self):
        t = np.linspace(0, 1.05, 50)
        base = synthetic(1.0, 0.5, 0.3, t)
        scaled = ObservedSeries(t=t, E=3.0 * base.E[:, 0], V=base.V)
        p0 = fit_parameters(base, branch="oscillatory")
        p1 = fit_parameters(scaled, branch="oscillatory")
        assert abs(p1.a - p0.a) < 1e-8
        assert p1.b[0] == pytest.approx(3.0 * p0.b[0], abs=1e-7)
        assert p1.C1[0] == pytest.approx(3.0 * p0.C1[0], abs=1e-7)
        assert p1.C2[0] == pytest.approx(3.0 * p0.C2[0], abs=1e-7)

    def test_perturbed_a_raises_rms_monotonically(self):
        t = np.linspace(0, 1.05, 50)
        series = synthetic(1.0, 0.0, 0.3, t, init={"E0": 1.0, "E0p": 0.5, "V0": 1.0, "V0p": 0.2})
        params = fit_parameters(series, branch="oscillatory")
        rms = []
        for bump in (0.01, 0.05, 0.10):
            params.a = 1.0 * (1 + bump)
            rms.append(evaluate_fit(params, series).rms_E)
        assert rms[0] < rms[1] < rms[2]

    def test_vector_series_shares_frequency(self):
        t = np.linspace(0, 1.05, 40)
        cf1 = closed_form_moments_const(1.0, 0.5, 0.3, {"E0": 1.0, "E0p": 0.3, "V0": 1.0, "V0p": 0.2})
        cf2 = closed_form_moments_const(1.0, 0.5, 0.3, {"E0": -0.4, "E0p": 1.0, "V0": 1.0, "V0p": 0.2})
        E = np.stack([cf1.E_fn(t), cf2.E_fn(t)], axis=1)
        series = ObservedSeries(t=t, E=E, V=np.abs(cf1.V_fn(t)))
        params = fit_parameters(series, branch="oscillatory")
        assert abs(params.a - 1.0) < 1e-6
        assert params.b.shape == (2,)
        assert np.allclose(params.b, 0.5, atol=1e-6)
