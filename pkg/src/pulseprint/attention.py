"""Cross-modal multi-head attention, pooling/projection, fusion, classifier.

Queries come from one modality, keys/values from the other; two independent
parameter sets cover the two directions. Scores are scaled by 1/sqrt(d) with
d the model width (per-head scaling available behind a flag). Pooled and
projected latents are L2-normalized before fusion (element-wise addition).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, NumericGuardError

NORM_FLOOR = 1e-12


def init_attention_params(prefix: str, d: int, heads: int, rng,
                          dtype=np.float64, qk_gain: float = 1.0) -> dict[str, ad.Parameter]:
    """One direction's W_Q/W_K/W_V (stacked per head) plus W_O.

    qk_gain scales the query/key init only: larger values start the
    attention pattern sharper than uniform.
    """
    if heads < 1 or d % heads != 0:
        raise ConfigError("head count must divide the model width")
    dk = d // heads
    sc = 1.0 / np.sqrt(d)
    params = {}
    for name, shape, gain in (
        ("wq", (heads, d, dk), qk_gain), ("wk", (heads, d, dk), qk_gain),
        ("wv", (heads, d, dk), 1.0),
    ):
        params[f"{prefix}.{name}"] = ad.Parameter(
            f"{prefix}.{name}", rng.normal(0.0, gain * sc, size=shape).astype(dtype)
        )
    params[f"{prefix}.wo"] = ad.Parameter(
        f"{prefix}.wo", rng.normal(0.0, sc, size=(d, d)).astype(dtype)
    )
    params[f"{prefix}.proj"] = ad.Parameter(
        f"{prefix}.proj", rng.normal(0.0, sc, size=(d, d)).astype(dtype)
    )
    return params


def attention(tape, q, k, v, scale_width: int):
    """softmax(q kT / sqrt(scale_width)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("query/key widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key/value counts differ")
    probs = ad.scaled_softmax_qk(tape, q, k, 1.0 / np.sqrt(scale_width))
    return ad.matmul(tape, probs, v)


def multihead(tape, g_a, g_b, wq, wk, wv, wo, scale_width: int):
    """Cross attention with queries from g_a (B, La, d), keys/values from g_b.

    Heads ride a leading broadcast axis: (B, L, d) x (h, d, dk) ->
    (h, B, L, dk); the concat over heads is a transpose/reshape.
    """
    batch, la, d = g_a.shape
    heads = wq.shape[0]
    dk = wq.shape[2]
    a4 = ad.reshape(tape, g_a, (1, batch, la, d))
    b4 = ad.reshape(tape, g_b, (1,) + g_b.shape)
    wq4 = ad.reshape(tape, wq, (heads, 1) + wq.shape[1:])
    wk4 = ad.reshape(tape, wk, (heads, 1) + wk.shape[1:])
    wv4 = ad.reshape(tape, wv, (heads, 1) + wv.shape[1:])
    qh = ad.matmul(tape, a4, wq4)
    kh = ad.matmul(tape, b4, wk4)
    vh = ad.matmul(tape, b4, wv4)
    out = attention(tape, qh, kh, vh, scale_width)          # (h, B, La, dk)
    out = ad.transpose(tape, out, (1, 2, 0, 3))             # (B, La, h, dk)
    out = ad.reshape(tape, out, (batch, la, heads * dk))
    return ad.matmul(tape, out, wo)


def l2_normalize_rows(tape, x):
    """Rows scaled to unit L2 norm; zero rows trip the numeric guard."""
    sq = ad.sum_(tape, ad.mul(tape, x, x), axis=-1, keepdims=True)
    if np.any(sq.value < NORM_FLOOR):
        raise NumericGuardError("cannot normalize a zero vector")
    return ad.div(tape, x, ad.sqrt(tape, sq))


def pool_project(tape, seq, proj):
    """Mean over positions, linear projection, L2 normalization."""
    if seq.shape[-2] < 1:
        raise DimensionError("cannot pool an empty sequence")
    pooled = ad.mean(tape, seq, axis=-2)
    return l2_normalize_rows(tape, ad.matmul(tape, pooled, proj))


def fuse(tape, u, v):
    """Element-wise addition of the two normalized latents."""
    if u.shape != v.shape:
        raise DimensionError("latent shapes differ")
    return ad.add(tape, u, v)


def init_classifier_params(d: int, rng, dtype=np.float64) -> dict[str, ad.Parameter]:
    """Two-layer head d -> d/2 -> 1 with GELU."""
    mid = max(d // 2, 1)
    return {
        "clf.w1": ad.Parameter("clf.w1", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, mid)).astype(dtype)),
        "clf.b1": ad.Parameter("clf.b1", np.zeros(mid, dtype=dtype)),
        "clf.w2": ad.Parameter("clf.w2", rng.normal(0.0, 1.0 / np.sqrt(mid), size=(mid, 1)).astype(dtype)),
        "clf.b2": ad.Parameter("clf.b2", np.zeros(1, dtype=dtype)),
    }


def classify(tape, z, w1, b1, w2, b2):
    """Raw logits (B,) for fused latents z (B, d)."""
    hidden = ad.gelu(tape, ad.add(tape, ad.matmul(tape, z, w1), b1))
    logits = ad.add(tape, ad.matmul(tape, hidden, w2), b2)
    return ad.reshape(tape, logits, (z.shape[0],))
