"""Spectral RR estimation, fusion, metrics, PLS baseline, and the driver."""

import numpy as np
import pytest

from ppg2resp import data, evaluation
from ppg2resp.errors import (
    EmptyReportError,
    FusionError,
    NoPeakError,
    ParameterError,
    ShapeError,
    UndefinedCorrelationError,
)

import oracles


@pytest.mark.parametrize("n", [2, 8, 64, 256, 1024, 4096])
def test_fft_matches_naive_dft(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    got = evaluation.fft_radix2(x)
    want = oracles.dft_naive(x)
    assert np.max(np.abs(got - want)) < 1e-9


def test_fft_batched_axis_and_length_validation():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 256))
    batched = evaluation.fft_radix2(x)
    for i in range(3):
        assert np.max(np.abs(batched[i] - evaluation.fft_radix2(x[i]))) < 1e-12
    with pytest.raises(ParameterError):
        evaluation.fft_radix2(np.zeros(100))


def test_rr_estimate_sine_and_square():
    t = np.arange(918) / 30.0
    est = evaluation.estimate_rr_fft(np.sin(2 * np.pi * 0.25 * t))
    assert abs(est - 15.0) < 0.15
    square = np.sign(np.sin(2 * np.pi * 0.2 * t))
    est = evaluation.estimate_rr_fft(square)
    assert abs(est - 12.0) < 0.15


def test_rr_estimate_band_and_error_cases():
    t = np.arange(918) / 30.0
    # strong 120-bpm (2 Hz) pulse component must lose to the in-band tone
    x = np.sin(2 * np.pi * (10.0 / 60.0) * t) + 5.0 * np.sin(2 * np.pi * 2.0 * t)
    assert abs(evaluation.estimate_rr_fft(x) - 10.0) < 0.15
    with pytest.raises(NoPeakError):
        evaluation.estimate_rr_fft(np.full(918, 3.3))
    with pytest.raises(ParameterError):
        evaluation.estimate_rr_fft(np.zeros(30))


def test_evaluation_window_durations():
    assert evaluation.EvaluationWindow(22).duration_s == pytest.approx(30.6)
    assert evaluation.EvaluationWindow(22).n_samples == 918
    assert evaluation.EvaluationWindow(52).duration_s == pytest.approx(60.6)
    assert evaluation.EvaluationWindow(1).n_samples == 288
    with pytest.raises(ParameterError):
        evaluation.EvaluationWindow(0)


def test_fusion_matches_brute_force_average():
    rng = np.random.default_rng(11)
    outputs = [rng.standard_normal(288) for _ in range(22)]
    got = evaluation.fuse_segments(outputs, window=evaluation.EvaluationWindow(22))
    starts = [30 * i for i in range(22)]
    want = oracles.fuse_brute(outputs, starts, 918)
    assert got.shape == want.shape
    assert np.array_equal(got, want)

    explicit = evaluation.fuse_segments(outputs[:3], starts=[0, 10, 20])
    want = oracles.fuse_brute(outputs[:3], [0, 10, 20], 308)
    assert np.array_equal(explicit, want)


def test_fusion_edge_sample_counts():
    # first sample is covered once, so it passes through untouched
    outputs = [np.full(288, 1.0), np.full(288, 3.0)]
    fused = evaluation.fuse_segments(outputs)
    assert fused[0] == 1.0
    assert fused[-1] == 3.0
    assert fused[30] == 2.0


def test_fusion_error_cases():
    with pytest.raises(FusionError):
        evaluation.fuse_segments([])
    with pytest.raises(FusionError):
        evaluation.fuse_segments([np.zeros(288), np.zeros(100)])
    with pytest.raises(FusionError, match="coverage gap"):
        evaluation.fuse_segments([np.zeros(30), np.zeros(30)], starts=[0, 60])
    with pytest.raises(FusionError):
        evaluation.fuse_segments(
            [np.zeros(288)] * 3, window=evaluation.EvaluationWindow(22)
        )


def test_waveform_mae_and_duty_cycle_values():
    assert evaluation.waveform_mae([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.5)
    with pytest.raises(ShapeError):
        evaluation.waveform_mae(np.zeros(3), np.zeros(4))
    # strictly below 0.5; the boundary value counts as high
    x = np.array([0.4, 0.6, 0.49, 0.51, 0.5])
    assert evaluation.duty_cycle(x) == pytest.approx(40.0)


def test_pearson_corr_values_and_errors():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert evaluation.pearson_corr(x, 2 * x + 1) == pytest.approx(1.0)
    assert evaluation.pearson_corr(x, -x) == pytest.approx(-1.0)
    y = np.array([1.0, 3.0, 2.0, 5.0])
    xc = x - x.mean()
    yc = y - y.mean()
    want = (xc * yc).sum() / np.sqrt((xc**2).sum() * (yc**2).sum())
    assert evaluation.pearson_corr(x, y) == pytest.approx(want)
    with pytest.raises(UndefinedCorrelationError):
        evaluation.pearson_corr(x, np.ones(4))
    with pytest.raises(ParameterError):
        evaluation.pearson_corr(x[:2], x[:2])


def test_aggregate_metrics_median_definitions():
    report = evaluation.aggregate_metrics(
        {"a": [1.0, 2.0, 3.0], "b": [10.0]},
        duty_pairs_by_subject={"a": [(40.0, 42.0), (50.0, 45.0), (60.0, 58.0)]},
    )
    # pooled per-window median vs median of per-subject means
    assert report.mae == pytest.approx(2.5)
    assert report.mmae == pytest.approx(6.0)
    assert report.per_subject_mean_abs_error["a"] == pytest.approx(2.0)
    assert report.duty_mean_abs_error == pytest.approx((2 + 5 + 2) / 3)
    assert report.duty_median_abs_error == pytest.approx(2.0)
    assert report.duty_pearson_pooled == pytest.approx(
        evaluation.pearson_corr([40.0, 50.0, 60.0], [42.0, 45.0, 58.0])
    )
    with pytest.raises(EmptyReportError):
        evaluation.aggregate_metrics({})


def test_metrics_report_serializes_cleanly():
    report = evaluation.aggregate_metrics({"a": [np.float64(1.0)]})
    text = report.to_json()
    assert '"mae_bpm": 1.0' in text
    # two identical reports serialize identically (stable key order)
    again = evaluation.aggregate_metrics({"a": [1.0]}).to_json()
    assert text == again


def test_pls_equals_least_squares_at_full_rank():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((80, 6))
    B = rng.standard_normal((6, 3))
    Y = X @ B + 0.1 * rng.standard_normal((80, 3)) + 2.0
    model = evaluation.pls_train(X, Y, n_components=6)
    predict = oracles.ols_fit(X, Y)
    Xnew = rng.standard_normal((20, 6))
    assert np.max(np.abs(evaluation.pls_predict(model, Xnew) - predict(Xnew))) < 1e-8


def test_pls_stops_early_on_rank_deficiency():
    rng = np.random.default_rng(17)
    basis = rng.standard_normal((2, 10))
    X = rng.standard_normal((40, 2)) @ basis  # rank 2
    Y = X @ rng.standard_normal((10, 2))
    with pytest.warns(UserWarning, match="stopping at 2 components"):
        model = evaluation.pls_train(X, Y, n_components=5)
    assert model.n_components == 2
    fitted = evaluation.pls_predict(model, X)
    want = oracles.ols_fit(X, Y)(X)
    assert np.max(np.abs(fitted - want)) < 1e-6


def test_pls_validation_and_single_window_predict():
    rng = np.random.default_rng(19)
    X = rng.standard_normal((30, 4))
    Y = rng.standard_normal((30, 2))
    with pytest.raises(ParameterError):
        evaluation.pls_train(X, Y, n_components=30)
    with pytest.raises(ShapeError):
        evaluation.pls_train(X, Y[:10])
    model = evaluation.pls_train(X, Y, n_components=3)
    single = evaluation.pls_predict(model, X[0])
    assert single.shape == (2,)
    assert np.allclose(single, evaluation.pls_predict(model, X)[0])
    with pytest.raises(ShapeError):
        evaluation.pls_predict(model, np.zeros(5))


def test_reference_rr_prefers_annotations_then_spectrum():
    t = np.arange(4000) / 30.0
    resp = np.sin(2 * np.pi * (18.0 / 60.0) * t)
    rec = data.Recording(
        "r", np.zeros(4000) + resp, resp, "capnography",
        rr_annotations=[(0.0, 12.0), (1.0, 14.0), (90.0, 99.0)],
    )
    # two annotations inside the first 2 s average to 13
    assert evaluation.reference_rr(rec, 0, 60) == pytest.approx(13.0)
    # a window past the annotations falls back to the spectral estimate
    got = evaluation.reference_rr(rec, 3000, 918)
    assert abs(got - 18.0) < 0.15
    bare = data.Recording("b", resp, resp, "capnography")
    assert evaluation.reference_rr(bare, 0, 918) == pytest.approx(
        evaluation.estimate_rr_fft(resp[:918])
    )


def test_evaluate_recording_with_identity_predictor_is_near_perfect():
    t = np.arange(3600) / 30.0
    resp01 = 0.5 + 0.5 * np.sin(2 * np.pi * (15.0 / 60.0) * t)
    resp01 = data.normalize_target(resp01)
    rec = data.Recording("ideal", resp01.copy(), resp01.copy(), "capnography")

    result = evaluation.evaluate_recording(
        lambda batch: batch, rec, window_segments=(22,), input_norm="raw"
    )
    assert result["subject_id"] == "ideal"
    assert len(result["fused"]) <= len(resp01)
    assert result["waveform_mae"] < 1e-12
    window_stats = result["windows"][22]
    n_windows = (3600 - 288) // 30 + 1 - 22 + 1
    assert len(window_stats["rr_abs_errors"]) == n_windows
    assert max(window_stats["rr_abs_errors"]) < 0.2
    # duty estimate equals duty reference when the waveforms agree
    for est, ref in window_stats["duty_pairs"]:
        assert est == pytest.approx(ref)
    start_s, rr_est, rr_ref, abs_err = window_stats["trace_rows"][0]
    assert start_s == 0.0
    assert abs_err == pytest.approx(abs(rr_est - rr_ref))


def test_evaluate_recording_validates_predictor_output():
    rng = np.random.default_rng(23)
    rec = data.Recording("v", rng.standard_normal(900), rng.random(900),
                         "capnography")
    with pytest.raises(ShapeError):
        evaluation.evaluate_recording(
            lambda batch: batch[:, :100], rec, window_segments=(1,)
        )
