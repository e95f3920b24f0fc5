"""Fusion of overlapping outputs and every number reported about them.

Holds the radix-2 FFT used for respiratory-rate readout, waveform MAE,
duty-cycle and Pearson statistics, the mAE/mMAE aggregation, and the
partial-least-squares linear baseline trained the same way as the network.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyReportError,
    FusionError,
    NoPeakError,
    ParameterError,
    ShapeError,
    UndefinedCorrelationError,
)

SEGMENT_LEN = 288
SEGMENT_STRIDE = 30
SAMPLE_RATE = 30


@dataclass
class EvaluationWindow:
    """A span of n consecutive 1-s-shifted segments fused together."""

    n_segments: int

    def __post_init__(self):
        if self.n_segments < 1:
            raise ParameterError("n_segments must be >= 1")

    @property
    def duration_s(self):
        return (self.n_segments - 1) * 1.0 + 9.6

    @property
    def n_samples(self):
        return (self.n_segments - 1) * SEGMENT_STRIDE + SEGMENT_LEN


def fft_radix2(x):
    """Iterative Cooley-Tukey FFT over the last axis (power-of-two length)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ParameterError(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    out = x[..., rev]
    half = 1
    while half < n:
        step = half * 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / step)
        blocks = out.reshape(out.shape[:-1] + (n // step, step))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        upper = even + odd
        lower = even - odd
        blocks[..., :half] = upper
        blocks[..., half:] = lower
        half = step
    return out


def _next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


def estimate_rr_fft(waveform, sample_rate=SAMPLE_RATE, band_bpm=(4.0, 65.0),
                    pad_to=16384):
    """Respiratory rate as 60x the dominant spectral frequency.

    Mean-subtract, zero-pad (16,384 points turns the ~0.1 Hz-scale raw
    resolution into 0.11 bpm bins), take the magnitude spectrum, and return
    the peak frequency within the band. The band keeps pulse harmonics and
    DC leakage out of the argmax.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2 * sample_rate:
        raise ParameterError(
            f"waveform must be 1-D and at least 2 s long, got {x.shape}"
        )
    x = x - x.mean()
    if not np.any(x):
        raise NoPeakError("waveform is constant, no spectral peak")
    n = max(pad_to, _next_pow2(len(x)))
    padded = np.zeros(n)
    padded[: len(x)] = x
    magnitude = np.abs(fft_radix2(padded))
    freqs_bpm = np.arange(n) * (sample_rate / n) * 60.0
    mask = (freqs_bpm >= band_bpm[0]) & (freqs_bpm <= band_bpm[1])
    if not mask.any():
        raise ParameterError(f"band {band_bpm} contains no FFT bins")
    lo = np.argmax(mask)
    peak = lo + np.argmax(magnitude[mask])
    return freqs_bpm[peak]


def fuse_segments(outputs, window=None, starts=None):
    """Per-sample mean of overlapping segments.

    Default layout is the evaluation one: consecutive segments shifted by
    30 samples. Explicit `starts` override that. Every output sample must be
    covered by at least one segment.
    """
    outputs = [np.asarray(o, dtype=np.float64) for o in outputs]
    if not outputs:
        raise FusionError("no segments to fuse")
    seg_len = len(outputs[0])
    if any(o.ndim != 1 or len(o) != seg_len for o in outputs):
        raise FusionError("segments must be 1-D and equal length")
    if starts is None:
        starts = [i * SEGMENT_STRIDE for i in range(len(outputs))]
    if window is not None and len(outputs) != window.n_segments:
        raise FusionError(
            f"expected {window.n_segments} segments, got {len(outputs)}"
        )
    total = max(starts) + seg_len
    acc = np.zeros(total)
    count = np.zeros(total)
    for start, seg in zip(starts, outputs):
        acc[start : start + seg_len] += seg
        count[start : start + seg_len] += 1
    if (count == 0).any():
        gap = int(np.argmax(count == 0))
        raise FusionError(f"coverage gap at sample {gap}")
    return acc / count


def waveform_mae(estimate, reference):
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ShapeError(
            f"length mismatch: {estimate.shape} vs {reference.shape}"
        )
    return float(np.mean(np.abs(estimate - reference)))


def duty_cycle(waveform):
    """Percent of samples strictly below 0.5."""
    x = np.asarray(waveform, dtype=np.float64)
    return 100.0 * np.count_nonzero(x < 0.5) / len(x)


def pearson_corr(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ParameterError("pearson_corr needs two equal 1-D arrays, n >= 3")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise UndefinedCorrelationError("constant series has no correlation")
    return float((xc * yc).sum() / denom)


@dataclass
class MetricsReport:
    per_window_abs_errors: dict
    per_subject_mean_abs_error: dict
    mae: float
    mmae: float
    waveform_mae_by_subject: dict = field(default_factory=dict)
    duty_estimates_by_subject: dict = field(default_factory=dict)
    duty_mean_abs_error: float = None
    duty_median_abs_error: float = None
    duty_pearson_pooled: float = None
    duty_pearson_by_subject: dict = field(default_factory=dict)

    def to_json(self):
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        payload = {
            "mae_bpm": clean(self.mae),
            "mmae_bpm": clean(self.mmae),
            "per_subject_mean_abs_error": clean(self.per_subject_mean_abs_error),
            "per_window_abs_errors": clean(self.per_window_abs_errors),
            "waveform_mae_by_subject": clean(self.waveform_mae_by_subject),
            "duty_estimates_by_subject": clean(self.duty_estimates_by_subject),
            "duty_mean_abs_error": clean(self.duty_mean_abs_error),
            "duty_median_abs_error": clean(self.duty_median_abs_error),
            "duty_pearson_pooled": clean(self.duty_pearson_pooled),
            "duty_pearson_by_subject": clean(self.duty_pearson_by_subject),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def aggregate_metrics(errors_by_subject, waveform_mae_by_subject=None,
                      duty_pairs_by_subject=None):
    """Build a MetricsReport.

    mAE is the median over all windows pooled across subjects; mMAE is the
    median over subjects of each subject's mean error. Duty-cycle pairs
    (estimate, reference) yield absolute-error stats, a pooled Pearson r,
    and per-subject r where the subject's references vary.
    """
    errors_by_subject = {
        s: [float(e) for e in errs] for s, errs in errors_by_subject.items()
    }
    pooled = [e for errs in errors_by_subject.values() for e in errs]
    if not pooled:
        raise EmptyReportError("no windows to aggregate")
    subject_means = {
        s: float(np.mean(errs)) for s, errs in errors_by_subject.items() if errs
    }
    report = MetricsReport(
        per_window_abs_errors=errors_by_subject,
        per_subject_mean_abs_error=subject_means,
        mae=float(np.median(pooled)),
        mmae=float(np.median(list(subject_means.values()))),
    )
    if waveform_mae_by_subject:
        report.waveform_mae_by_subject = {
            s: float(v) for s, v in waveform_mae_by_subject.items()
        }
    if duty_pairs_by_subject:
        report.duty_estimates_by_subject = {
            s: [(float(a), float(b)) for a, b in pairs]
            for s, pairs in duty_pairs_by_subject.items()
        }
        est, ref = [], []
        for pairs in duty_pairs_by_subject.values():
            for a, b in pairs:
                est.append(float(a))
                ref.append(float(b))
        abs_err = np.abs(np.array(est) - np.array(ref))
        report.duty_mean_abs_error = float(abs_err.mean())
        report.duty_median_abs_error = float(np.median(abs_err))
        try:
            report.duty_pearson_pooled = pearson_corr(est, ref)
        except (UndefinedCorrelationError, ParameterError):
            report.duty_pearson_pooled = None
        for s, pairs in duty_pairs_by_subject.items():
            try:
                report.duty_pearson_by_subject[s] = pearson_corr(
                    [a for a, _ in pairs], [b for _, b in pairs]
                )
            except (UndefinedCorrelationError, ParameterError):
                report.duty_pearson_by_subject[s] = None
    return report


@dataclass
class PLSModel:
    n_components: int
    x_mean: np.ndarray
    y_mean: np.ndarray
    x_weights: np.ndarray
    x_loadings: np.ndarray
    y_loadings: np.ndarray
    coef: np.ndarray


def pls_train(X, Y, n_components=25, tol=1e-13, max_iter=500):
    """NIPALS partial least squares with two blocks.

    Deterministic: the starting score for each component is the Y column of
    largest variance in the deflated block. Components whose X score norm
    collapses below 1e-12 end extraction early with a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"X {X.shape} and Y {Y.shape} must share rows")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ParameterError("training matrices contain non-finite values")
    n = X.shape[0]
    if n <= n_components:
        raise ParameterError(
            f"need more rows than components: {n} rows, {n_components} components"
        )
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    W, P, Q = [], [], []
    for comp in range(n_components):
        u = Yc[:, np.argmax(Yc.var(axis=0))]
        if not np.any(u):
            warnings.warn(f"stopping at {comp} components: deflated Y is zero")
            break
        w = np.zeros(X.shape[1])
        for _ in range(max_iter):
            w_new = Xc.T @ u
            norm = np.linalg.norm(w_new)
            if norm == 0:
                break
            w_new /= norm
            t = Xc @ w_new
            tt = t @ t
            if tt == 0:
                break
            q = Yc.T @ t / tt
            qq = q @ q
            if qq == 0:
                break
            u = Yc @ q / qq
            if np.linalg.norm(w_new - w) < tol:
                w = w_new
                break
            w = w_new
        t = Xc @ w
        tt = t @ t
        if tt < 1e-12:
            warnings.warn(
                f"stopping at {comp} components: score norm {tt:.3e} too small"
            )
            break
        q = Yc.T @ t / tt
        p = Xc.T @ t / tt
        Xc = Xc - np.outer(t, p)
        Yc = Yc - np.outer(t, q)
        W.append(w)
        P.append(p)
        Q.append(q)
    if not W:
        raise ParameterError("no PLS components could be extracted")
    W = np.column_stack(W)
    P = np.column_stack(P)
    Q = np.column_stack(Q)
    coef = W @ np.linalg.solve(P.T @ W, Q.T)
    return PLSModel(W.shape[1], x_mean, y_mean, W, P, Q, coef)


def pls_predict(model, x):
    """Map one window (or a stack of windows) through the linear model."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != len(model.x_mean):
        raise ShapeError(
            f"input width {x.shape[1]} != trained width {len(model.x_mean)}"
        )
    y = (x - model.x_mean) @ model.coef + model.y_mean
    return y[0] if single else y


def reference_rr(recording, start_sample, n_samples):
    """Reference RR for a window: annotation average, else spectral estimate."""
    start_s = start_sample / SAMPLE_RATE
    end_s = (start_sample + n_samples) / SAMPLE_RATE
    if recording.rr_annotations:
        inside = [rr for t, rr in recording.rr_annotations if start_s <= t < end_s]
        if inside:
            return float(np.mean(inside))
    segment = recording.resp_ref[start_sample : start_sample + n_samples]
    return estimate_rr_fft(segment)


def evaluate_recording(predict_fn, recording, window_segments=(22,),
                       input_norm="zscore"):
    """All per-subject numbers for one held-out recording.

    `predict_fn` maps a (B, 288) batch of normalized PPG windows to (B, 288)
    respiratory estimates; the network and the PLS baseline both fit. Returns
    a dict with the full fused waveform and its MAE, plus per-evaluation-window
    RR errors and duty-cycle pairs for each requested window size (windows
    slide by 1 s).
    """
    from .data import segment_test

    pairs = segment_test(recording, input_norm=input_norm)
    if not pairs:
        raise EmptyReportError(f"{recording.subject_id}: no test segments")
    inputs = np.stack([p.input for p in pairs])
    outputs = predict_fn(inputs)
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.shape != inputs.shape:
        raise ShapeError(
            f"predict_fn returned {outputs.shape}, expected {inputs.shape}"
        )
    starts = [p.start_index for p in pairs]
    full = fuse_segments(list(outputs), starts=starts)
    resp01 = _normalized_reference(recording)
    full_mae = waveform_mae(full, resp01[: len(full)])
    result = {
        "subject_id": recording.subject_id,
        "fused": full,
        "reference": resp01[: len(full)],
        "waveform_mae": full_mae,
        "windows": {},
    }
    for n_seg in window_segments:
        window = EvaluationWindow(n_seg)
        rr_errors, duty_pairs, rows = [], [], []
        for first in range(len(pairs) - n_seg + 1):
            start = starts[first]
            fused = fuse_segments(list(outputs[first : first + n_seg]),
                                  window=window)
            try:
                rr_est = estimate_rr_fft(fused)
            except NoPeakError:
                continue
            rr_ref = reference_rr(recording, start, window.n_samples)
            duty_est = duty_cycle(fused)
            duty_ref = duty_cycle(resp01[start : start + window.n_samples])
            rr_errors.append(abs(rr_est - rr_ref))
            duty_pairs.append((duty_est, duty_ref))
            rows.append((start / SAMPLE_RATE, rr_est, rr_ref,
                         abs(rr_est - rr_ref)))
        result["windows"][n_seg] = {
            "rr_abs_errors": rr_errors,
            "duty_pairs": duty_pairs,
            "trace_rows": rows,
        }
    return result


def _normalized_reference(recording):
    from .data import normalize_target

    return normalize_target(recording.resp_ref)
