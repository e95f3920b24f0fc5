"""Recording ingestion, resampling, normalization, segmentation, synthesis.

Recordings travel as a neutral CSV so that clinical and synthetic data are
interchangeable downstream:

    subject_id,fs,resp_kind
    subj01,125,capnography
    ppg,resp
    0.8132,0.0021
    ...

An optional sibling ``<name>.rr.csv`` (header ``t_sec,rr_bpm``) carries
reference respiratory-rate annotations. Everything is resampled to 30 Hz
on ingestion; respiratory references are min-max scaled per recording and
PPG windows are z-scored per window at segmentation time.
"""

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import firwin

from .errors import (
    DatasetError,
    DegenerateSignalError,
    IngestionError,
    ParameterError,
    UnsupportedRateError,
)

TARGET_FS = 30
WINDOW_LEN = 288
TEST_STRIDE = 30
ANTIALIAS_CUTOFF_HZ = 13.0
RESP_KINDS = ("capnography", "impedance")


@dataclass
class Recording:
    subject_id: str
    ppg: np.ndarray
    resp_ref: np.ndarray
    resp_kind: str
    sample_rate: int = TARGET_FS
    rr_annotations: list = None

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.resp_ref = np.asarray(self.resp_ref, dtype=np.float64)
        if self.ppg.shape != self.resp_ref.shape or self.ppg.ndim != 1:
            raise IngestionError(
                f"{self.subject_id}: ppg/resp must be equal-length 1-D arrays, "
                f"got {self.ppg.shape} and {self.resp_ref.shape}"
            )
        if self.resp_kind not in RESP_KINDS:
            raise IngestionError(
                f"{self.subject_id}: resp_kind must be one of {RESP_KINDS}, "
                f"got {self.resp_kind!r}"
            )


@dataclass
class SegmentPair:
    input: np.ndarray
    target: np.ndarray
    subject_id: str
    start_index: int


@dataclass
class SynthConfig:
    """Knobs for the synthetic PPG/respiration generator.

    Respiration modulates the pulse train three ways, with one depth each:
    a baseline component added directly (intensity), a multiplicative gain
    on the pulse envelope (amplitude), and a modulation of the instantaneous
    pulse rate (interval).
    """

    n_subjects: int = 3
    duration_s: float = 480.0
    heart_rate_bpm: tuple = (70.0, 110.0)
    resp_rate_bpm: tuple = (8.0, 30.0)
    duty_cycle: tuple = (0.3, 0.7)
    depth_intensity: float = 0.6
    depth_amplitude: float = 0.25
    depth_interval: float = 0.05
    noise_std: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_subjects < 1:
            raise ParameterError("n_subjects must be >= 1")
        if self.duration_s <= 0:
            raise ParameterError("duration_s must be positive")
        for name in ("depth_intensity", "depth_amplitude", "depth_interval"):
            d = getattr(self, name)
            if not (0 <= d < 1):
                raise ParameterError(f"{name} must lie in [0, 1), got {d}")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")
        for name in ("heart_rate_bpm", "resp_rate_bpm", "duty_cycle"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ParameterError(f"{name} range ({lo}, {hi}) is invalid")
        if self.resp_rate_bpm[1] >= self.heart_rate_bpm[0] / 2:
            raise ParameterError(
                "resp_rate_bpm must stay below half the heart rate "
                f"({self.resp_rate_bpm[1]} vs {self.heart_rate_bpm[0]}/2)"
            )
        lo, hi = self.duty_cycle
        if not (0 < lo and hi < 1):
            raise ParameterError("duty_cycle range must lie inside (0, 1)")


def resample_to_30hz(signal, fs_in):
    """Anti-aliased resampling onto the 30 Hz grid.

    A zero-phase FIR low-pass (cutoff 13 Hz) removes content the new rate
    cannot carry, then linear interpolation lands the samples. Duration is
    preserved to within one output sample. Rates below 30 Hz are refused:
    upsampling would fabricate information.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if fs_in < TARGET_FS:
        raise UnsupportedRateError(f"cannot upsample from {fs_in} Hz to 30 Hz")
    if fs_in == TARGET_FS:
        return signal.copy()
    # ~1 Hz transition band; odd tap count keeps the filter zero-phase when
    # centered by mode='same'.
    numtaps = int(3.3 * fs_in) | 1
    taps = firwin(numtaps, ANTIALIAS_CUTOFF_HZ, fs=fs_in)
    filtered = np.convolve(signal, taps, mode="same")
    duration = (len(signal) - 1) / fs_in
    n_out = int(math.floor(duration * TARGET_FS)) + 1
    t_out = np.arange(n_out) / TARGET_FS
    t_in = np.arange(len(signal)) / fs_in
    return np.interp(t_out, t_in, filtered)


def normalize_target(resp_ref):
    """Min-max scale a full-recording respiratory reference into [0, 1]."""
    x = np.asarray(resp_ref, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        raise DegenerateSignalError("respiratory reference is constant")
    return (x - lo) / (hi - lo)


def normalize_input(ppg_window):
    """Per-window standardization to zero mean, unit variance."""
    x = np.asarray(ppg_window, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    # relative floor: a flatlined window stays "constant" even when rounding
    # leaves its std at a few ulps instead of exactly zero
    if sd <= 1e-12 * max(1.0, abs(mu)):
        raise DegenerateSignalError("PPG window is constant")
    return (x - mu) / sd


def _norm_window(window, mode):
    if mode == "zscore":
        return normalize_input(window)
    if mode == "minmax":
        lo, hi = window.min(), window.max()
        if hi - lo <= 0:
            raise DegenerateSignalError("PPG window is constant")
        return (window - lo) / (hi - lo)
    if mode == "raw":
        return np.asarray(window, dtype=np.float64).copy()
    raise ParameterError(f"unknown input normalization mode {mode!r}")


def _segment(recording, offsets, input_norm):
    resp01 = normalize_target(recording.resp_ref)
    pairs = []
    for start in offsets:
        window = recording.ppg[start : start + WINDOW_LEN]
        try:
            norm = _norm_window(window, input_norm)
        except DegenerateSignalError:
            warnings.warn(
                f"{recording.subject_id}: constant PPG window at sample "
                f"{start}, skipped"
            )
            continue
        pairs.append(
            SegmentPair(norm, resp01[start : start + WINDOW_LEN],
                        recording.subject_id, start)
        )
    return pairs


def segment_training(recording, input_norm="zscore"):
    """Non-overlapping consecutive windows: offsets 0, 288, 576, ...

    A full 480-s recording yields 50 pairs; shorter recordings yield
    proportionally fewer, with a warning.
    """
    n_full = len(recording.ppg) // WINDOW_LEN
    if n_full < 50:
        warnings.warn(
            f"{recording.subject_id}: {len(recording.ppg)} samples give only "
            f"{n_full} training segments"
        )
    offsets = [i * WINDOW_LEN for i in range(n_full)]
    return _segment(recording, offsets, input_norm)


def segment_test(recording, input_norm="zscore"):
    """Sliding windows shifted by 1 s (30 samples): offsets 0, 30, 60, ..."""
    n = len(recording.ppg)
    if n < WINDOW_LEN:
        warnings.warn(
            f"{recording.subject_id}: {n} samples shorter than one window"
        )
        return []
    count = (n - WINDOW_LEN) // TEST_STRIDE + 1
    offsets = [i * TEST_STRIDE for i in range(count)]
    return _segment(recording, offsets, input_norm)


def _parse_float(text, path, line_no, column):
    try:
        value = float(text)
    except ValueError:
        raise IngestionError(
            f"{path}:{line_no}: non-numeric {column} value {text!r}"
        ) from None
    if not math.isfinite(value):
        raise IngestionError(f"{path}:{line_no}: non-finite {column} value {text!r}")
    return value


def _load_rr_sidecar(path):
    annotations = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t_sec", "rr_bpm"]:
        raise IngestionError(f"{path}:1: expected header 't_sec,rr_bpm'")
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise IngestionError(f"{path}:{i}: expected 2 columns, got {len(row)}")
        t = _parse_float(row[0], path, i, "t_sec")
        rr = _parse_float(row[1], path, i, "rr_bpm")
        annotations.append((t, rr))
    return annotations


def load_recording(path):
    """Read one recording CSV (plus RR sidecar if present), resampled to 30 Hz."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["subject_id", "fs", "resp_kind"]:
        raise IngestionError(
            f"{path}:1: expected header 'subject_id,fs,resp_kind'"
        )
    if len(rows) < 2 or len(rows[1]) != 3:
        raise IngestionError(f"{path}:2: expected metadata row with 3 columns")
    subject_id = rows[1][0].strip()
    if not subject_id:
        raise IngestionError(f"{path}:2: empty subject_id")
    fs = _parse_float(rows[1][1], path, 2, "fs")
    if fs <= 0:
        raise IngestionError(f"{path}:2: fs must be positive, got {fs}")
    resp_kind = rows[1][2].strip()
    if resp_kind not in RESP_KINDS:
        raise IngestionError(
            f"{path}:2: resp_kind must be one of {RESP_KINDS}, got {resp_kind!r}"
        )
    if len(rows) < 3 or [c.strip() for c in rows[2]] != ["ppg", "resp"]:
        raise IngestionError(f"{path}:3: expected header 'ppg,resp'")
    ppg, resp = [], []
    for i, row in enumerate(rows[3:], start=4):
        if not row:
            continue
        if len(row) != 2:
            raise IngestionError(f"{path}:{i}: expected 2 columns, got {len(row)}")
        ppg.append(_parse_float(row[0], path, i, "ppg"))
        resp.append(_parse_float(row[1], path, i, "resp"))
    if not ppg:
        raise IngestionError(f"{path}:4: no samples")
    ppg = np.array(ppg)
    resp = np.array(resp)
    if fs != TARGET_FS:
        ppg = resample_to_30hz(ppg, fs)
        resp = resample_to_30hz(resp, fs)
    sidecar = path.with_name(path.stem + ".rr.csv")
    annotations = _load_rr_sidecar(sidecar) if sidecar.exists() else None
    return Recording(subject_id, ppg, resp, resp_kind, TARGET_FS, annotations)


def load_dataset(directory):
    """All recordings under a directory, sorted by subject id.

    Duplicate subject ids would silently corrupt leave-one-subject-out
    splits, so they are refused.
    """
    directory = Path(directory)
    paths = sorted(
        p for p in directory.glob("*.csv") if not p.name.endswith(".rr.csv")
    )
    if not paths:
        raise DatasetError(f"no recording CSVs under {directory}")
    recordings = [load_recording(p) for p in paths]
    seen = {}
    for rec in recordings:
        if rec.subject_id in seen:
            raise DatasetError(f"duplicate subject_id {rec.subject_id!r}")
        seen[rec.subject_id] = rec
    return sorted(recordings, key=lambda r: r.subject_id)


def write_recording_csv(recording, path):
    """Emit the neutral CSV format (and the RR sidecar when annotated)."""
    path = Path(path)
    lines = ["subject_id,fs,resp_kind"]
    lines.append(
        f"{recording.subject_id},{recording.sample_rate:g},{recording.resp_kind}"
    )
    lines.append("ppg,resp")
    for p, r in zip(recording.ppg, recording.resp_ref):
        lines.append(f"{float(p)!r},{float(r)!r}")
    path.write_text("\n".join(lines) + "\n")
    if recording.rr_annotations:
        side = path.with_name(path.stem + ".rr.csv")
        rows = ["t_sec,rr_bpm"]
        for t, rr in recording.rr_annotations:
            rows.append(f"{t:g},{float(rr)!r}")
        side.write_text("\n".join(rows) + "\n")


def _smoothed_rect(t, f_resp, duty, smooth_s=0.3, fs=TARGET_FS):
    """Rectangular breathing wave, low during inspiration, edges smoothed.

    `duty` is the inspiration fraction, so `duty` of each cycle sits at the
    low level, matching how capnography falls during inhalation.
    """
    phase = (t * f_resp) % 1.0
    rect = np.where(phase < duty, 0.0, 1.0)
    width = max(1, int(round(smooth_s * fs)))
    kernel = np.ones(width) / width
    return np.convolve(rect, kernel, mode="same")


_PULSE = (
    (0.30, 0.06, 1.00),  # systolic peak
    (0.62, 0.11, 0.38),  # dicrotic bump
)


def _pulse_template(beat_phase):
    out = np.zeros_like(beat_phase)
    for center, width, amp in _PULSE:
        out += amp * np.exp(-0.5 * ((beat_phase - center) / width) ** 2)
    return out


def generate_synthetic(config):
    """Deterministic synthetic subjects with known RR and duty cycle.

    Per subject, a constant respiratory rate drives a smoothed rectangular
    reference wave; the PPG is a Gaussian-bump pulse train generated at
    120 Hz whose baseline, envelope, and instantaneous rate all follow that
    wave, plus white noise, then resampled through the standard 30 Hz path.
    """
    config.validate()
    gen_fs = 120
    roots = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    recordings = []
    for idx, root in enumerate(roots):
        rng = np.random.default_rng(root)
        hr = rng.uniform(*config.heart_rate_bpm)
        rr = rng.uniform(*config.resp_rate_bpm)
        duty = rng.uniform(*config.duty_cycle)
        f_resp = rr / 60.0

        n_hi = int(round(config.duration_s * gen_fs))
        t_hi = np.arange(n_hi) / gen_fs
        m_hi = _smoothed_rect(t_hi, f_resp, duty, fs=gen_fs)
        m_hi = m_hi - m_hi.mean()

        pulse_hz = (hr / 60.0) * (1.0 + config.depth_interval * m_hi)
        beat_phase = np.cumsum(pulse_hz) / gen_fs % 1.0
        envelope = 1.0 + config.depth_amplitude * m_hi
        ppg_hi = (
            _pulse_template(beat_phase) * envelope
            + config.depth_intensity * m_hi
            + rng.normal(0.0, config.noise_std, n_hi)
        )
        ppg = resample_to_30hz(ppg_hi, gen_fs)

        n_lo = len(ppg)
        t_lo = np.arange(n_lo) / TARGET_FS
        resp = _smoothed_rect(t_lo, f_resp, duty)
        resp = (resp - resp.min()) / (resp.max() - resp.min())

        annotations = [(float(s), rr) for s in range(int(config.duration_s))]
        recordings.append(
            Recording(
                subject_id=f"synth{idx + 1:02d}",
                ppg=ppg,
                resp_ref=resp,
                resp_kind="capnography",
                sample_rate=TARGET_FS,
                rr_annotations=annotations,
            )
        )
    return recordings
