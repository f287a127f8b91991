"""Line-oriented key=value run configuration.

Blank lines and '#' comments are ignored; unknown keys are rejected. Keys
cover the trainer (epochs, batch, lr, tau, alpha, beta, lambda_a, lambda_s,
seed, aug.*), the model (model.*), the generator (synth.*), preprocessing
(pre.*) and evaluation (eval.*).
"""

from __future__ import annotations

from .errors import ConfigError, UsageError
from .losses import LossWeights
from .model import ModelConfig
from .training import AugmentConfig, TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


KEY_TYPES = {
    "epochs": int, "batch": int, "lr": float, "tau": float,
    "alpha": float, "beta": float, "lambda_a": float, "lambda_s": float,
    "seed": int, "dup_factor": int, "neg_ratio": float, "val_fraction": float,
    "aug.ppg.scale": _bool, "aug.ppg.jitter": _bool, "aug.ppg.stretch": _bool,
    "aug.fp.flip": _bool, "aug.fp.rotate": _bool, "aug.fp.crop": _bool,
    "aug.fp.noise": _bool,
    "model.d": int, "model.d_h": int, "model.n_blocks": int, "model.heads": int,
    "model.dtype": str, "model.per_head_scale": _bool, "model.variant": str,
    "model.qk_gain": float,
    "synth.subjects": int, "synth.recordings": int, "synth.duration_s": float,
    "synth.fps": float, "synth.size": int, "synth.spread": float,
    "pre.detrend_window_s": float, "pre.lowpass_hz": float, "pre.corr_min": float,
    "eval.data": str,
}


def parse_config(path: str | None) -> dict:
    """Typed key/value map from a config file (empty when path is None)."""
    values: dict = {}
    if path is None:
        return values
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in KEY_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = KEY_TYPES[key](val)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def train_config_from(values: dict, seed_override=None, variant_override=None) -> TrainConfig:
    """TrainConfig assembled from parsed values plus CLI overrides."""
    weights = LossWeights(
        tau=values.get("tau", 0.5),
        alpha=values.get("alpha", 0.9),
        beta=values.get("beta", 0.9),
        lambda_a=values.get("lambda_a", 0.8),
        lambda_s=values.get("lambda_s", 0.05),
    )
    augment = AugmentConfig(
        ppg_scale=values.get("aug.ppg.scale", True),
        ppg_jitter=values.get("aug.ppg.jitter", True),
        ppg_stretch=values.get("aug.ppg.stretch", True),
        fp_flip=values.get("aug.fp.flip", True),
        fp_rotate=values.get("aug.fp.rotate", True),
        fp_crop=values.get("aug.fp.crop", True),
        fp_noise=values.get("aug.fp.noise", True),
    )
    model = ModelConfig(
        d=values.get("model.d", 128),
        d_h=values.get("model.d_h", 64),
        n_blocks=values.get("model.n_blocks", 2),
        heads=values.get("model.heads", 4),
        dtype=values.get("model.dtype", "float64"),
        per_head_scale=values.get("model.per_head_scale", False),
        qk_gain=values.get("model.qk_gain", 1.0),
        variant=variant_override or values.get("model.variant", "fused"),
    )
    seed = seed_override if seed_override is not None else values.get("seed", 0)
    return TrainConfig(
        epochs=values.get("epochs", 200),
        batch=values.get("batch", 256),
        lr=values.get("lr", 1e-3),
        seed=seed,
        dup_factor=values.get("dup_factor", 4),
        neg_ratio=values.get("neg_ratio", 1.0),
        val_fraction=values.get("val_fraction", 0.2),
        weights=weights,
        augment=augment,
        model=model,
    )


def format_config(values: dict) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))
