"""Deterministic synthetic fingertip recordings with exact ground truth.

Each subject profile fixes a two-Gaussian pulse template (systolic peak plus
dicrotic bump), a heart rate, and a ridge field (orientation, period, phase).
Video frames are the ridge image multiplicatively modulated by the pulse
train scaled into [0.7, 1.0], then 8-bit quantized.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError
from .fingerprint import write_pgm
from .ppg import RawSignal


@dataclass
class SubjectProfile:
    heart_rate_bpm: float
    systolic_pos: float
    systolic_width: float
    systolic_skew: float        # rise/fall width asymmetry of the main peak
    dicrotic_pos: float
    dicrotic_depth: float
    dicrotic_width_factor: float
    diastolic_decay: float      # falling baseline rate across the cycle
    noise_sigma: float
    ridge_theta: float
    ridge_curve: tuple[float, float]
    ridge_period: float
    ridge_phase: float
    ridge_amp: float
    seed: int

    def __post_init__(self):
        if not 40.0 <= self.heart_rate_bpm <= 180.0:
            raise ConfigError("heart rate outside [40, 180] bpm")
        if not 4.0 <= self.ridge_period <= 16.0:
            raise ConfigError("ridge period outside [4, 16] px")


class BeatTrain(NamedTuple):
    signal: RawSignal
    boundaries: list[int]
    clean: np.ndarray


def sample_profiles(n: int, spread: float, seed: int) -> list[SubjectProfile]:
    """n subject profiles whose pairwise parameter distance scales with spread.

    The per-subject offset directions depend only on (n, seed), so raising
    spread moves the same subjects monotonically further apart.
    """
    rng = np.random.default_rng([seed, 7])
    profiles = []
    for i in range(n):
        u = rng.uniform(-1.0, 1.0, size=10)
        theta_slot = (i / max(n, 1) + 0.03 * u[4]) * np.pi
        profiles.append(
            SubjectProfile(
                heart_rate_bpm=float(np.clip(72.0 + 26.0 * spread * u[0], 45.0, 170.0)),
                systolic_pos=0.30 + 0.12 * spread * u[1],
                systolic_width=float(np.clip(0.10 + 0.05 * spread * u[2], 0.04, 0.18)),
                systolic_skew=float(np.clip(1.0 + 0.7 * spread * u[8], 0.35, 1.65)),
                dicrotic_pos=0.65 + 0.12 * spread * u[3],
                dicrotic_depth=float(np.clip(0.35 + 0.30 * spread * u[4], 0.05, 0.8)),
                dicrotic_width_factor=float(np.clip(1.6 + 0.6 * spread * u[7], 0.9, 2.4)),
                diastolic_decay=float(np.clip(0.25 + 0.2 * spread * u[9], 0.05, 0.5)),
                noise_sigma=0.01,
                ridge_theta=float(spread * theta_slot),
                ridge_curve=(0.5 * spread * u[5], 0.5 * spread * u[6]),
                ridge_period=float(np.clip(8.0 + 4.0 * spread * u[5], 4.0, 16.0)),
                ridge_phase=float((i * 2.39996 * spread) % (2 * np.pi)),
                ridge_amp=45.0,
                seed=seed * 1000 + i,
            )
        )
    return profiles


def _template(profile: SubjectProfile, phase: np.ndarray) -> np.ndarray:
    """One cycle over phase in [0, 1): skewed systolic peak, dicrotic bump,
    and a diastolic decay that pins the cycle valley at the boundary."""
    p1, w1 = profile.systolic_pos, profile.systolic_width
    w_rise = w1 * profile.systolic_skew
    w_fall = w1 * (2.0 - profile.systolic_skew)
    w = np.where(phase < p1, w_rise, w_fall)
    sys_peak = np.exp(-((phase - p1) ** 2) / (2 * w * w))
    p2 = profile.dicrotic_pos
    w2 = profile.dicrotic_width_factor * w1
    dic = profile.dicrotic_depth * np.exp(-((phase - p2) ** 2) / (2 * w2 * w2))
    runoff = profile.diastolic_decay * np.exp(-2.5 * phase)
    return sys_peak + dic + runoff


def gen_beat_train(profile: SubjectProfile, duration_s: float, fs: float) -> BeatTrain:
    """Pulse train with per-cycle rate jitter <= 3% and exact cycle boundaries."""
    if duration_s < 3.0:
        raise InputError("beat train needs at least 3 s")
    n = int(round(duration_s * fs))
    rng = np.random.default_rng([profile.seed, 1])
    base_period = fs * 60.0 / profile.heart_rate_bpm
    clean = np.zeros(n)
    boundaries = []
    t0 = 0.0
    while t0 < n:
        boundaries.append(int(round(t0)))
        period = base_period * (1.0 + rng.uniform(-0.03, 0.03))
        a = int(np.ceil(t0))
        b = min(int(np.ceil(t0 + period)), n)
        if a < b:
            clean[a:b] = _template(profile, (np.arange(a, b) - t0) / period)
        t0 += period
    boundaries = [b for b in boundaries if b < n]
    noisy = clean + rng.normal(0.0, profile.noise_sigma, size=n)
    return BeatTrain(RawSignal(noisy, fs), boundaries, clean)


def _ridge_field(profile: SubjectProfile, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    xn = 2.0 * xx / (size - 1) - 1.0
    yn = 2.0 * yy / (size - 1) - 1.0
    theta = profile.ridge_theta + profile.ridge_curve[0] * xn + profile.ridge_curve[1] * yn
    phase = (
        2.0 * np.pi / profile.ridge_period * (xx * np.cos(theta) + yy * np.sin(theta))
        + profile.ridge_phase
    )
    illum = 0.1 * profile.ridge_amp * (0.6 * xn + 0.4 * yn)
    return 128.0 + profile.ridge_amp * np.sin(phase), phase, illum


def gen_ridge_image(profile: SubjectProfile, size: int):
    """Ridge-pattern image and the analytic ridge-crest mask."""
    if size < 32:
        raise InputError("ridge image size must be >= 32")
    field, phase, illum = _ridge_field(profile, size)
    img = np.clip(np.round(field + illum), 0, 255).astype(np.uint8)
    edges = (np.abs(np.cos(phase)) > 0.92) if profile.ridge_amp > 0 \
        else np.zeros_like(phase, bool)
    return img, edges.astype(np.uint8)


class FingertipVideo(NamedTuple):
    frames: np.ndarray  # (F, H, W) uint8
    fps: float
    clean_signal: np.ndarray
    boundaries: list[int]
    edge_map: np.ndarray  # analytic mask of the ridge pattern's true edges


def gen_fingertip_video(profile: SubjectProfile, duration_s: float, fps: float,
                        size: int, modulation_depth: float = 0.3) -> FingertipVideo:
    """Ridge image modulated by the pulse train, 8-bit quantized per frame."""
    train = gen_beat_train(profile, duration_s, fs=fps)
    sig = train.signal.samples
    lo, hi = sig.min(), sig.max()
    if hi - lo < 1e-9 or modulation_depth == 0.0:
        mod = np.full_like(sig, 0.7)
    else:
        mod = 0.7 + modulation_depth * (sig - lo) / (hi - lo)
    field, phase, illum = _ridge_field(profile, size)
    base = field + illum
    frames = np.clip(
        np.round(base[None, :, :] * mod[:, None, None]), 0, 255
    ).astype(np.uint8)
    edges = (np.abs(np.cos(phase)) > 0.92) if profile.ridge_amp > 0 \
        else np.zeros_like(phase, bool)
    return FingertipVideo(frames, fps, train.clean, train.boundaries,
                          edges.astype(np.uint8))


def write_recording(rec_dir: str, profile: SubjectProfile, duration_s: float,
                    fps: float, size: int) -> FingertipVideo:
    """Persist one recording: PGM frames, manifest, ground-truth CSVs."""
    os.makedirs(rec_dir, exist_ok=True)
    video = gen_fingertip_video(profile, duration_s, fps, size)
    for t in range(video.frames.shape[0]):
        write_pgm(os.path.join(rec_dir, f"frame_{t:06d}.pgm"), video.frames[t])
    with open(os.path.join(rec_dir, "manifest.txt"), "w") as fh:
        fh.write(f"fps={fps}\n")
        fh.write(f"frame_count={video.frames.shape[0]}\n")
        fh.write(f"profile_seed={profile.seed}\n")
    with open(os.path.join(rec_dir, "truth_signal.csv"), "w") as fh:
        for v in video.clean_signal:
            fh.write(f"{v!r}\n")
    with open(os.path.join(rec_dir, "truth_boundaries.csv"), "w") as fh:
        for b in video.boundaries:
            fh.write(f"{b}\n")
    with open(os.path.join(rec_dir, "truth_edges.csv"), "w") as fh:
        for row in video.edge_map:
            fh.write(",".join(str(int(v)) for v in row))
            fh.write("\n")
    return video


def read_recording(rec_dir: str):
    """Load frames + fps back from a recording directory."""
    from .fingerprint import read_pgm
    from .ppg import FrameStack

    manifest_path = os.path.join(rec_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise InputError(f"{rec_dir}: missing manifest.txt")
    meta = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    fps = float(meta["fps"])
    count = int(meta["frame_count"])
    frames = [
        read_pgm(os.path.join(rec_dir, f"frame_{t:06d}.pgm")) for t in range(count)
    ]
    return FrameStack(np.stack(frames), fps)
