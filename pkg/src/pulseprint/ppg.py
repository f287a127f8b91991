"""Fingertip-video PPG extraction: frames -> fixed-length beat waveforms.

Stages: per-frame mean intensity, moving-average detrend, zero-phase 4 Hz
low-pass, valley-to-valley beat separation, template-correlation beat
selection, cubic-spline resampling to 300 samples in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, QualityError

BEAT_LEN = 300

# beat separation / selection knobs (see preprocess config keys pre.*)
VALLEY_SPACING_FACTOR = 0.5
TEMPLATE_CORR_MIN = 0.80
HR_BAND_BPM = (40.0, 180.0)
AC_PEAK_MIN = 0.1


@dataclass
class FrameStack:
    """Grayscale video: frames (F, H, W) uint8, captured at fps."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise InputError("frame stack must be (F, H, W)")
        if self.frames.shape[0] < 2 * self.fps:
            raise InputError("frame stack shorter than 2 s")


@dataclass
class RawSignal:
    """Real-valued sample sequence at sampling rate fs."""

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("raw signal has non-finite samples")


def frame_mean_intensity(stack: FrameStack) -> RawSignal:
    """Average pixel intensity per frame; sampling rate = fps."""
    if stack.frames.shape[0] == 0:
        raise InputError("empty frame stack")
    samples = stack.frames.reshape(stack.frames.shape[0], -1).mean(
        axis=1, dtype=np.float64
    )
    return RawSignal(samples, stack.fps)


def detrend(sig: RawSignal, window_s: float = 2.0) -> RawSignal:
    """Subtract a centered moving average (edge-truncated window)."""
    w = int(round(window_s * sig.fs))
    if w < 3:
        raise ConfigError("detrend window must cover at least 3 samples")
    x = sig.samples
    n = len(x)
    k = w // 2
    csum = np.concatenate(([0.0], np.cumsum(x, dtype=np.float64)))
    lo = np.maximum(np.arange(n) - k, 0)
    hi = np.minimum(np.arange(n) + k + 1, n)
    ma = (csum[hi] - csum[lo]) / (hi - lo)
    return RawSignal(x - ma, sig.fs)


def lowpass_taps(fs: float, cutoff_hz: float) -> np.ndarray:
    """Hamming-windowed sinc FIR taps, odd length, unit DC gain."""
    n = int(np.ceil(4.0 * fs / cutoff_hz))
    if n % 2 == 0:
        n += 1
    m = np.arange(n) - (n - 1) / 2.0
    fc = cutoff_hz / fs
    h = 2.0 * fc * np.sinc(2.0 * fc * m)
    h *= 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    return h / h.sum()


def lowpass(sig: RawSignal, cutoff_hz: float = 4.0) -> RawSignal:
    """Zero-phase low-pass: forward-backward windowed-sinc FIR."""
    if cutoff_hz >= sig.fs / 2.0:
        raise ConfigError("cutoff must stay below Nyquist")
    taps = lowpass_taps(sig.fs, cutoff_hz)
    pad = len(taps)
    x = sig.samples
    if len(x) <= pad:
        ext = np.pad(x, pad, mode="edge")
    else:
        ext = np.pad(x, pad, mode="reflect")
    y = np.convolve(ext, taps, mode="same")
    y = np.convolve(y[::-1], taps, mode="same")[::-1]
    return RawSignal(y[pad:-pad], sig.fs)


def estimate_heart_rate(sig: RawSignal) -> float:
    """Heart rate (bpm) from the autocorrelation peak in the 40-180 bpm band."""
    x = sig.samples - sig.samples.mean()
    power = float(np.dot(x, x))
    if power < 1e-12:
        raise QualityError("no periodicity")
    n = len(x)
    lag_min = int(np.floor(sig.fs * 60.0 / HR_BAND_BPM[1]))
    lag_max = int(np.ceil(sig.fs * 60.0 / HR_BAND_BPM[0]))
    lag_max = min(lag_max, n - 2)
    if lag_min < 1 or lag_min >= lag_max:
        raise InputError("signal too short for heart-rate estimation")
    ac = np.correlate(x, x, mode="full")[n - 1 :] / power
    band = ac[lag_min : lag_max + 1]
    interior = (band >= np.roll(band, 1)) & (band >= np.roll(band, -1))
    interior[0] = interior[-1] = False
    peaks = np.nonzero(interior & (band >= AC_PEAK_MIN))[0]
    if peaks.size == 0:
        raise QualityError("no periodicity")
    lag = lag_min + int(peaks[np.argmax(band[peaks])])
    return 60.0 * sig.fs / lag


def beat_spans(sig: RawSignal) -> list[tuple[int, int]]:
    """Half-open valley-to-valley sample spans, strictly increasing."""
    if len(sig.samples) < 3 * sig.fs:
        raise InputError("need at least 3 s of signal for beat separation")
    hr = estimate_heart_rate(sig)
    min_sep = VALLEY_SPACING_FACTOR * sig.fs * 60.0 / hr
    x = sig.samples
    cand = np.nonzero((x[1:-1] < x[:-2]) & (x[1:-1] <= x[2:]))[0] + 1
    order = cand[np.argsort(x[cand], kind="stable")]
    taken: list[int] = []
    for idx in order:
        if all(abs(idx - t) >= min_sep for t in taken):
            taken.append(idx)
    taken.sort()
    return [(a, b) for a, b in zip(taken[:-1], taken[1:])]


def separate_beats(sig: RawSignal) -> list[np.ndarray]:
    """Individual variable-length beats cut at valleys."""
    return [sig.samples[a:b] for a, b in beat_spans(sig)]


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den < 1e-12:
        return -1.0
    return float(np.dot(a, b) / den)


def select_beat_indices(beats, corr_min: float = TEMPLATE_CORR_MIN) -> list[int]:
    """Indices of beats correlating >= corr_min with the median template."""
    if len(beats) < 3:
        raise QualityError("need at least 3 beats for selection")
    med_len = int(np.median([len(b) for b in beats]))
    med_len = max(med_len, 8)
    normed = np.stack([cubic_resample(np.asarray(b, float), med_len) for b in beats])
    template = np.median(normed, axis=0)
    kept = [i for i, row in enumerate(normed) if _pearson(row, template) >= corr_min]
    if len(kept) < 3:
        raise QualityError("fewer than 3 beats survived selection")
    return kept


def select_beats(beats, corr_min: float = TEMPLATE_CORR_MIN):
    return [beats[i] for i in select_beat_indices(beats, corr_min)]


def cubic_resample(y: np.ndarray, n_out: int) -> np.ndarray:
    """Natural cubic spline through (i, y_i), sampled at n_out points.

    Endpoints map to endpoints; degree-<=1 data is reproduced exactly.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < 2:
        raise InputError("cannot resample fewer than 2 samples")
    if n == 2:
        return np.linspace(y[0], y[1], n_out)
    # second derivatives via the natural-spline tridiagonal system (unit knots)
    rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2])
    m = n - 2
    diag = np.full(m, 4.0)
    upper = np.ones(m - 1)
    # Thomas elimination
    for i in range(1, m):
        w = 1.0 / diag[i - 1]
        diag[i] -= w * upper[i - 1]
        rhs[i] -= w * rhs[i - 1]
    sec = np.zeros(n)
    sec[-2] = rhs[-1] / diag[-1]
    for i in range(m - 2, -1, -1):
        sec[i + 1] = (rhs[i] - upper[i] * sec[i + 2]) / diag[i]
    xs = np.linspace(0.0, n - 1.0, n_out)
    idx = np.clip(np.floor(xs).astype(int), 0, n - 2)
    t = xs - idx
    u = 1.0 - t
    ya, yb = y[idx], y[idx + 1]
    ma, mb = sec[idx], sec[idx + 1]
    return (
        ma * u**3 / 6.0
        + mb * t**3 / 6.0
        + (ya - ma / 6.0) * u
        + (yb - mb / 6.0) * t
    )


def resample_beat(beat: np.ndarray) -> np.ndarray:
    """Resample one beat to BEAT_LEN samples and min-max normalize to [0, 1]."""
    beat = np.asarray(beat, dtype=np.float64)
    if len(beat) < 8:
        raise InputError("beat shorter than 8 samples")
    out = cubic_resample(beat, BEAT_LEN)
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        raise QualityError("constant beat cannot be normalized")
    return (out - lo) / (hi - lo)


def extract_beats(stack: FrameStack, detrend_window_s: float = 2.0,
                  cutoff_hz: float = 4.0, corr_min: float = TEMPLATE_CORR_MIN):
    """Full signal pipeline. Returns (beat waveforms, kept spans, found count)."""
    raw = frame_mean_intensity(stack)
    filt = lowpass(detrend(raw, detrend_window_s), cutoff_hz)
    spans = beat_spans(filt)
    beats = [filt.samples[a:b] for a, b in spans]
    usable = [(i, b) for i, b in enumerate(beats) if len(b) >= 8]
    if len(usable) < 3:
        raise QualityError("fewer than 3 usable beats")
    kept_local = select_beat_indices([b for _, b in usable], corr_min)
    waves, kept_spans = [], []
    for j in kept_local:
        i, b = usable[j]
        try:
            waves.append(resample_beat(b))
        except QualityError:
            continue
        kept_spans.append(spans[i])
    if len(waves) < 3:
        raise QualityError("fewer than 3 beats survived resampling")
    return waves, kept_spans, len(beats)


def save_beats_csv(path, beats):
    """One beat per row, 300 comma-separated decimals."""
    arr = np.asarray(beats, dtype=np.float64)
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(repr(v) for v in row))
            fh.write("\n")
