"""Latent argmax trace-back, RR attribution, and kernel smoothing."""

import warnings

import numpy as np
import pytest

from ppg2resp import data, interpret
from ppg2resp import model as model_mod
from ppg2resp.errors import EmptyReportError, ParameterError


def test_argmax_map_is_one_based_row_major():
    fmap = np.zeros((4, 5))
    fmap[1, 2] = 2.0
    assert interpret.argmax_map(fmap) == (2, 3, 2.0)
    # ties resolve to the lowest channel, then the lowest position
    tied = np.zeros((3, 4))
    tied[0, 1] = 1.0
    tied[2, 0] = 1.0
    assert interpret.argmax_map(tied) == (1, 2, 1.0)
    assert interpret.argmax_map(np.full((2, 3), 3.5)) == (1, 1, 3.5)


def test_latent_argmax_lands_in_bottleneck_grid():
    model = model_mod.build_model(rng_seed=0)
    c, p, v = interpret.latent_argmax(
        model, np.random.default_rng(0).standard_normal(288)
    )
    assert 1 <= c <= 8
    assert 1 <= p <= 76
    assert 0.0 < v < 1.0


def _passthrough_model(channel):
    """Encoder whose layers 2 and 3 only forward `channel` through tap 0."""
    model = model_mod.build_model(rng_seed=3)
    for idx in (1, 2):
        layer = model.layers[idx]
        layer.params.weights[:] = 0.0
        layer.params.bias[:] = 0.0
        layer.params.weights[channel, channel, 0] = 1.0
    return model


def test_chain_trace_follows_a_rigged_passthrough():
    model = _passthrough_model(4)
    rng = np.random.default_rng(5)
    for _ in range(5):
        window = rng.standard_normal(288)
        assert interpret.trace_to_layer1(model, window) == 5
    # precomputed argmax takes the same path
    amax = interpret.latent_argmax(model, window)
    assert interpret.trace_to_layer1(model, window, argmax=amax) == 5

    assert interpret.trace_to_layer1(_passthrough_model(6), window) == 7


def test_layer1_method_and_unknown_method():
    model = model_mod.build_model(rng_seed=1)
    window = np.random.default_rng(2).standard_normal(288)
    k = interpret.trace_to_layer1(model, window, method="layer1")
    assert 1 <= k <= 8
    with pytest.raises(ParameterError):
        interpret.trace_to_layer1(model, window, method="both")


def test_smooth_kernel_shapes_and_reference_values():
    const = np.full(150, 0.7)
    assert np.allclose(interpret.smooth_kernel(const), const)

    impulse = np.zeros(150)
    impulse[75] = 1.0
    sm = interpret.smooth_kernel(impulse)
    assert len(sm) == 150
    inside = np.flatnonzero(sm > 0)
    # sample i averages [i-15, i+15), so the impulse spreads over 30 samples
    assert len(inside) == 30
    assert inside[0] == 61 and inside[-1] == 90
    assert np.allclose(sm[inside], 1.0 / 30.0)

    alternating = np.tile([1.0, -1.0], 75)
    assert np.max(np.abs(interpret.smooth_kernel(alternating))) < 0.07

    with pytest.raises(ParameterError):
        interpret.smooth_kernel(np.zeros((2, 75)))


def test_smooth_kernel_truncates_at_edges():
    x = np.zeros(100)
    x[0] = 1.0
    sm = interpret.smooth_kernel(x)
    # at i=0 the window is [0, 15): 15 samples, one of them hot
    assert sm[0] == pytest.approx(1.0 / 15.0)
    assert sm[14] == pytest.approx(1.0 / 29.0)
    assert sm[15] == pytest.approx(1.0 / 30.0)
    assert sm[16] == 0.0


def _annotated_recordings():
    cfg = data.SynthConfig(n_subjects=2, duration_s=60.0, seed=8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return data.generate_synthetic(cfg)


def test_kernel_rr_distribution_buckets_annotated_windows():
    recs = _annotated_recordings()
    model = _passthrough_model(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dist, attributions, skipped = interpret.kernel_rr_distribution(model, recs)
    n_windows = sum(len(data.segment_test(r)) for r in recs)
    assert skipped == 0
    assert len(attributions) == n_windows
    # the rigged encoder funnels every window into kernel 3
    assert len(dist[3]) == n_windows
    assert all(not dist[k] for k in dist if k != 3)
    rates = {rec.subject_id: rec.rr_annotations[0][1] for rec in recs}
    assert set(np.round(dist[3], 6)) == set(np.round(list(rates.values()), 6))
    for att in attributions:
        subject = att.window_id.split(":")[0]
        assert att.kernel_index == 3
        assert att.rr_bpm == pytest.approx(rates[subject])
        assert len(att.latent_argmax) == 3


def test_kernel_rr_distribution_skips_unannotated_windows():
    recs = _annotated_recordings()
    for rec in recs:
        rec.rr_annotations = None
    model = model_mod.build_model(rng_seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dist, attributions, skipped = interpret.kernel_rr_distribution(model, recs)
    assert attributions == []
    assert skipped == sum(len(data.segment_test(r)) for r in recs)
    assert all(not v for v in dist.values())
    with pytest.raises(EmptyReportError):
        interpret.kernel_rr_distribution(model, [])


def test_export_row_helpers():
    rows = interpret.distribution_rows({2: [10.0, 12.0], 1: [8.0]})
    assert rows == [(1, 8.0), (2, 10.0), (2, 12.0)]

    model = model_mod.build_model(rng_seed=0)
    wrows = interpret.kernel_weight_rows(model)
    assert len(wrows) == 8 * 150
    k, i, w, s = wrows[0]
    assert (k, i) == (1, 0)
    raw = model.layers[0].params.weights[0, 0]
    assert w == pytest.approx(raw[0])
    assert s == pytest.approx(interpret.smooth_kernel(raw)[0])
    assert {r[0] for r in wrows} == set(range(1, 9))
