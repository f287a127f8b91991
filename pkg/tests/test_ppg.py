"""Signal pipeline: intensity extraction, detrend, low-pass, beat handling."""

import numpy as np
import pytest

from pulseprint import ppg
from pulseprint import synth as sy
from pulseprint.errors import ConfigError, InputError, QualityError


def make_profile(**over):
    base = dict(
        heart_rate_bpm=72.0, systolic_pos=0.30, systolic_width=0.10,
        systolic_skew=1.0, dicrotic_pos=0.65, dicrotic_depth=0.35,
        dicrotic_width_factor=1.6, diastolic_decay=0.25, noise_sigma=0.0,
        ridge_theta=0.4, ridge_curve=(0.1, -0.2), ridge_period=8.0,
        ridge_phase=0.3, ridge_amp=45.0, seed=5,
    )
    base.update(over)
    return sy.SubjectProfile(**base)


class TestFrameMeanIntensity:
    def test_constant_frames(self):
        stack = ppg.FrameStack(np.full((130, 8, 8), 128, dtype=np.uint8), 60.0)
        sig = ppg.frame_mean_intensity(stack)
        np.testing.assert_array_equal(sig.samples, 128.0)
        assert sig.fs == 60.0

    def test_ramp_frames(self):
        frames = np.stack([np.full((4, 4), t, dtype=np.uint8) for t in range(150)])
        sig = ppg.frame_mean_intensity(ppg.FrameStack(frames, 60.0))
        np.testing.assert_allclose(sig.samples, np.arange(150.0))

    def test_recovers_known_sinusoid(self):
        t = np.arange(240)
        wave = 100 + 20 * np.sin(2 * np.pi * 1.2 * t / 60.0)
        frames = np.clip(np.round(wave)[:, None, None] * np.ones((1, 16, 16)),
                         0, 255).astype(np.uint8)
        sig = ppg.frame_mean_intensity(ppg.FrameStack(frames, 60.0))
        assert np.max(np.abs(sig.samples - wave)) <= 0.5


class TestDetrend:
    def test_linear_ramp_interior_zero(self):
        sig = ppg.RawSignal(np.linspace(0, 10, 600), 60.0)
        out = ppg.detrend(sig, 2.0)
        k = 60  # window half width
        assert np.max(np.abs(out.samples[k:-k])) < 1e-9

    def test_sinusoid_amplitude_retained(self):
        # exact MA gain at 1.2 Hz over a 121-tap window is 0.1274, so the
        # retained amplitude is 0.8726 of the input
        t = np.arange(1800) / 60.0
        sig = ppg.RawSignal(np.sin(2 * np.pi * 1.2 * t), 60.0)
        out = ppg.detrend(sig, 2.0)
        mid = out.samples[200:-200]
        retained = (mid.max() - mid.min()) / 2.0
        assert retained == pytest.approx(0.8726, abs=0.01)
        assert retained >= 0.85

    def test_constant_zeroed(self):
        out = ppg.detrend(ppg.RawSignal(np.full(400, 7.0), 60.0), 2.0)
        assert np.max(np.abs(out.samples[61:-61])) < 1e-9

    def test_short_window_rejected(self):
        with pytest.raises(ConfigError):
            ppg.detrend(ppg.RawSignal(np.zeros(100), 60.0), 0.01)


def amplitude_ratio(freq_hz, fs=60.0, seconds=20.0):
    t = np.arange(int(seconds * fs)) / fs
    x = np.sin(2 * np.pi * freq_hz * t)
    y = ppg.lowpass(ppg.RawSignal(x, fs)).samples
    mid = slice(len(x) // 4, 3 * len(x) // 4)
    return np.sqrt(np.mean(y[mid] ** 2) / np.mean(x[mid] ** 2))


class TestLowpass:
    def test_dc_gain(self):
        out = ppg.lowpass(ppg.RawSignal(np.full(600, 5.0), 60.0))
        np.testing.assert_allclose(out.samples, 5.0, rtol=1e-3)

    def test_passband_and_stopband(self):
        assert amplitude_ratio(1.2) >= 0.95
        assert amplitude_ratio(10.0) <= 0.10

    def test_linearity(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(900)
        y = rng.standard_normal(900)
        a, b = 2.3, -0.7
        fs = 60.0
        lhs = ppg.lowpass(ppg.RawSignal(a * x + b * y, fs)).samples
        rhs = (a * ppg.lowpass(ppg.RawSignal(x, fs)).samples
               + b * ppg.lowpass(ppg.RawSignal(y, fs)).samples)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_zero_phase_peak_alignment(self):
        # sub-sample lag from the quadratic-interpolated correlation peak
        t = np.arange(1200) / 60.0
        x = np.sin(2 * np.pi * 1.0 * t)
        y = ppg.lowpass(ppg.RawSignal(x, 60.0)).samples
        mid = slice(300, 900)
        corr = np.correlate(y[mid], x[mid], mode="full")
        k = int(np.argmax(corr))
        c0, c1, c2 = corr[k - 1], corr[k], corr[k + 1]
        frac = 0.5 * (c0 - c2) / (c0 - 2 * c1 + c2)
        lag = k + frac - (len(x[mid]) - 1)
        assert abs(lag) < 1.0

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(ConfigError):
            ppg.lowpass(ppg.RawSignal(np.zeros(600), 60.0), cutoff_hz=31.0)


class TestBeatSeparation:
    def test_count_at_72_bpm(self):
        train = sy.gen_beat_train(make_profile(), 30.0, 60.0)
        spans = ppg.beat_spans(train.signal)
        assert abs(len(spans) - 35) <= 1

    def test_constant_signal_rejected(self):
        with pytest.raises(QualityError):
            ppg.beat_spans(ppg.RawSignal(np.full(1200, 3.0), 60.0))

    def test_boundaries_against_generator_truth(self):
        # shoulder-type pulses (no interior local minimum); a mixed-rate
        # estimate shrinks the exclusion radius, so a deep dicrotic notch
        # would register as a spurious valley
        shoulder = dict(dicrotic_depth=0.15, dicrotic_width_factor=2.2)
        a = sy.gen_beat_train(make_profile(heart_rate_bpm=60.0, seed=2, **shoulder),
                              15.0, 60.0)
        b = sy.gen_beat_train(make_profile(heart_rate_bpm=90.0, seed=3, **shoulder),
                              15.0, 60.0)
        samples = np.concatenate([a.signal.samples, b.signal.samples])
        truth = list(a.boundaries) + [x + len(a.signal.samples) for x in b.boundaries]
        spans = ppg.beat_spans(ppg.RawSignal(samples, 60.0))
        starts = np.array([s for s, _ in spans])
        truth = np.array(truth)
        hits = sum(np.min(np.abs(truth - s)) <= 3 for s in starts)
        assert hits / len(starts) >= 0.9

    def test_spans_strictly_increasing(self):
        train = sy.gen_beat_train(make_profile(noise_sigma=0.01), 20.0, 60.0)
        spans = ppg.beat_spans(train.signal)
        flat = [v for s in spans for v in s]
        assert all(a < b for a, b in spans)
        assert all(flat[i] <= flat[i + 1] for i in range(len(flat) - 1))


class TestBeatSelection:
    def test_identical_beats_all_kept(self):
        beat = np.sin(np.linspace(0, np.pi, 50))
        kept = ppg.select_beats([beat.copy() for _ in range(8)])
        assert len(kept) == 8

    def test_inverted_beat_rejected(self):
        beat = np.sin(np.linspace(0, np.pi, 50))
        beats = [beat.copy() for _ in range(10)] + [-beat]
        idx = ppg.select_beat_indices(beats)
        assert 10 not in idx
        assert len(idx) == 10

    def test_noisy_beats_mostly_kept(self):
        rng = np.random.default_rng(6)
        beat = np.sin(np.linspace(0, np.pi, 60))
        amp = beat.max() - beat.min()
        beats = [beat + rng.normal(0, 0.01 * amp, size=60) for _ in range(20)]
        assert len(ppg.select_beats(beats)) >= 18

    def test_too_few_beats(self):
        with pytest.raises(QualityError):
            ppg.select_beats([np.sin(np.linspace(0, np.pi, 40))] * 2)


class TestResampleBeat:
    def test_knots_reproduced_at_same_length(self):
        rng = np.random.default_rng(12)
        y = rng.standard_normal(300)
        out = ppg.cubic_resample(y, 300)
        np.testing.assert_allclose(out, y, atol=1e-9)

    def test_linear_ramp_exact(self):
        y = np.linspace(-2.0, 5.0, 150)
        out = ppg.cubic_resample(y, 300)
        np.testing.assert_allclose(out, np.linspace(-2.0, 5.0, 300), atol=1e-9)

    def test_sine_segment_accuracy(self):
        # ends at inflection points, so natural boundaries are exact
        n = 97
        xs = np.arange(n) * (3 * np.pi / (n - 1))
        y = np.sin(xs)
        out = ppg.cubic_resample(y, 300)
        dense = np.sin(np.linspace(0, 3 * np.pi, 300))
        assert np.max(np.abs(out - dense)) < 1e-4

    def test_output_contract(self):
        rng = np.random.default_rng(3)
        beat = np.cumsum(rng.standard_normal(47))
        out = ppg.resample_beat(beat)
        assert out.shape == (300,)
        assert out.min() == 0.0 and out.max() == 1.0

    def test_constant_beat_rejected(self):
        with pytest.raises(QualityError):
            ppg.resample_beat(np.full(40, 2.0))

    def test_short_beat_rejected(self):
        with pytest.raises(InputError):
            ppg.resample_beat(np.arange(5.0))


class TestFullPipeline:
    def test_output_invariants(self):
        video = sy.gen_fingertip_video(make_profile(noise_sigma=0.01), 12.0, 60.0, 64)
        waves, spans, found = ppg.extract_beats(ppg.FrameStack(video.frames, 60.0))
        assert found >= len(waves) >= 3
        for w in waves:
            assert w.shape == (300,)
            assert w.min() >= 0.0 and w.max() <= 1.0
        assert all(a < b for a, b in spans)
        assert all(spans[i][1] <= spans[i + 1][0] for i in range(len(spans) - 1))
