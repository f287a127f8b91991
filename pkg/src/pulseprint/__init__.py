"""Camera-based PPG + fingerprint multimodal authentication pipeline."""

__version__ = "0.1.0"
