"""Tracing latent-space maxima back to first-layer kernels.

For a given input window the bottleneck's maximum activation is attributed
to one of the 8 layer-1 kernels by walking a contribution-argmax chain down
the encoder. Aggregating attributed windows against their reference
respiratory rates shows which kernels respond to which breathing
frequencies. Public kernel/channel/position indices are 1-based, matching
how the kernels are referred to in plots.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .errors import EmptyReportError, ParameterError

SMOOTH_WINDOW = 30  # 1 s of kernel samples at 30 Hz


@dataclass
class KernelAttribution:
    window_id: str
    latent_argmax: tuple
    kernel_index: int
    rr_bpm: float


def argmax_map(feature_map):
    """Strict argmax over a (channels, length) map, 1-based.

    Row-major scan order makes ties resolve to the lowest channel, then the
    lowest position.
    """
    feature_map = np.asarray(feature_map)
    flat = int(np.argmax(feature_map))
    channel, position = divmod(flat, feature_map.shape[1])
    return channel + 1, position + 1, float(feature_map[channel, position])


def latent_argmax(model, window):
    """Location and value of the bottleneck maximum for one input window."""
    _, latent = model_mod.forward(model, window)
    return argmax_map(latent)


def _chain_trace(model, acts, channel0, position0):
    """Contribution-argmax walk from an encoder layer-3 unit to a layer-1 channel."""
    layer3 = model.layers[2]
    layer2 = model.layers[1]
    act2p = np.pad(acts[1], ((0, 0), (layer3.params.padding,) * 2))
    act1p = np.pad(acts[0], ((0, 0), (layer2.params.padding,) * 2))
    k3 = layer3.params.kernel_size
    # Each layer-2 channel's summed contribution to the argmax unit.
    window3 = act2p[:, position0 : position0 + k3]
    contrib3 = (layer3.params.weights[channel0] * window3).sum(axis=1)
    i2 = int(np.argmax(contrib3))
    # Strongest layer-2 activation inside that window, clamped off the padding.
    t2 = position0 + int(np.argmax(window3[i2]))
    t2 = min(max(t2 - layer3.params.padding, 0), acts[1].shape[1] - 1)
    k2 = layer2.params.kernel_size
    window2 = act1p[:, t2 : t2 + k2]
    contrib2 = (layer2.params.weights[i2] * window2).sum(axis=1)
    return int(np.argmax(contrib2)) + 1


def trace_to_layer1(model, window, argmax=None, method="chain"):
    """Layer-1 kernel index (1-based) behind the latent maximum of a window.

    ``method="chain"`` follows summed contributions through encoder layers 3
    and 2. ``method="layer1"`` reads the maximum straight off the layer-1
    activation map instead, for comparison.
    """
    acts = model_mod.encoder_activations(model, window)
    if method == "layer1":
        return argmax_map(acts[0])[0]
    if method != "chain":
        raise ParameterError(f"unknown trace method {method!r}")
    if argmax is None:
        argmax = argmax_map(acts[-1])
    channel0, position0, _ = argmax
    return _chain_trace(model, acts, channel0 - 1, position0 - 1)


def _window_reference_rr(recording, start_sample, n_samples):
    if not recording.rr_annotations:
        return None
    start_s = start_sample / 30.0
    end_s = (start_sample + n_samples) / 30.0
    inside = [rr for t, rr in recording.rr_annotations if start_s <= t < end_s]
    if not inside:
        return None
    return float(np.mean(inside))


def kernel_rr_distribution(model, recordings, method="chain"):
    """Reference RRs grouped by attributed kernel, across all test windows.

    Returns ``(distribution, attributions, n_skipped)``: a dict mapping each
    kernel index (1..hidden_channels) to the reference RRs of the windows it
    won, the per-window attribution records, and how many windows lacked a
    reference RR annotation and were skipped.
    """
    from .data import segment_test

    if not recordings:
        raise EmptyReportError("no recordings to attribute")
    n_kernels = model.config.hidden_channels
    distribution = {k: [] for k in range(1, n_kernels + 1)}
    attributions = []
    skipped = 0
    for rec in recordings:
        for pair in segment_test(rec):
            rr = _window_reference_rr(rec, pair.start_index, len(pair.input))
            if rr is None:
                skipped += 1
                continue
            acts = model_mod.encoder_activations(model, pair.input)
            if method == "layer1":
                kernel = argmax_map(acts[0])[0]
                argmax = argmax_map(acts[-1])
            else:
                argmax = argmax_map(acts[-1])
                kernel = _chain_trace(model, acts, argmax[0] - 1, argmax[1] - 1)
            distribution[kernel].append(rr)
            attributions.append(
                KernelAttribution(
                    window_id=f"{rec.subject_id}:{pair.start_index}",
                    latent_argmax=argmax,
                    kernel_index=kernel,
                    rr_bpm=rr,
                )
            )
    return distribution, attributions, skipped


def smooth_kernel(weights, window=SMOOTH_WINDOW):
    """Centered moving average with truncated windows at the edges.

    Sample i averages the slice [i-15, i+15); output length is preserved and
    a constant input passes through unchanged.
    """
    x = np.asarray(weights, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"kernel must be 1-D, got shape {x.shape}")
    n = len(x)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + (window - half), 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def distribution_rows(distribution):
    """Boxplot-ready (kernel_index, rr_bpm) rows, sorted for stable output."""
    rows = []
    for kernel in sorted(distribution):
        for rr in distribution[kernel]:
            rows.append((kernel, rr))
    return rows


def kernel_weight_rows(model, input_channel=0):
    """(kernel_index, sample, weight, smoothed_weight) rows for layer 1."""
    rows = []
    layer1 = model.layers[0]
    for kernel in range(layer1.params.out_channels):
        raw = layer1.params.weights[kernel, input_channel]
        smooth = smooth_kernel(raw)
        for i, (w, s) in enumerate(zip(raw, smooth)):
            rows.append((kernel + 1, i, float(w), float(s)))
    return rows
