"""Full authentication model: embeddings, two encoders, cross attention,
pooling/projection, fusion and classifier, plus checkpoint IO and the
end-to-end gradient check.

Variants: "fused" uses both modalities with cross attention; "ppg" and
"fingerprint" are single-encoder ablation models whose latent is pooled
directly from the encoder output (cross attention needs two modalities).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import encoder as enc
from . import losses
from .container import read_container, write_container
from .errors import ConfigError, InputError

VARIANTS = ("ppg", "fingerprint", "fused")


@dataclass
class ModelConfig:
    d: int = 128
    d_h: int = 64
    n_blocks: int = 2
    heads: int = 4
    len_u: int = 300
    len_v: int = 4096
    dtype: str = "float64"
    per_head_scale: bool = False
    qk_gain: float = 1.0
    variant: str = "fused"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError("head count must divide the model width")
        if self.dtype not in ad.REAL_DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return ad.REAL_DTYPES[self.dtype]

    @property
    def scale_width(self):
        return self.d // self.heads if self.per_head_scale else self.d


def init_model(cfg: ModelConfig, seed: int) -> dict[str, ad.Parameter]:
    """Deterministic parameter init for the configured variant."""
    rng = np.random.default_rng([seed, 11])
    dtype = cfg.np_dtype
    params: dict[str, ad.Parameter] = {}
    if cfg.variant in ("ppg", "fused"):
        params.update(enc.init_encoder_params("enc_u", cfg.d, cfg.d_h,
                                              cfg.n_blocks, rng, dtype))
    if cfg.variant in ("fingerprint", "fused"):
        params.update(enc.init_encoder_params("enc_v", cfg.d, cfg.d_h,
                                              cfg.n_blocks, rng, dtype))
    if cfg.variant == "fused":
        params.update(attn.init_attention_params("xattn.u2v", cfg.d, cfg.heads,
                                                 rng, dtype, cfg.qk_gain))
        params.update(attn.init_attention_params("xattn.v2u", cfg.d, cfg.heads,
                                                 rng, dtype, cfg.qk_gain))
    elif cfg.variant == "ppg":
        params.update({k: v for k, v in
                       attn.init_attention_params("xattn.u2v", cfg.d, cfg.heads, rng, dtype).items()
                       if k.endswith(".proj")})
    else:
        params.update({k: v for k, v in
                       attn.init_attention_params("xattn.v2u", cfg.d, cfg.heads, rng, dtype).items()
                       if k.endswith(".proj")})
    params.update(attn.init_classifier_params(cfg.d, rng, dtype))
    return params


def _encode(tape, params, cfg, prefix, raw, expect_len):
    w = tape.leaf(params[f"{prefix}.embed.weight"])
    b = tape.leaf(params[f"{prefix}.embed.bias"])
    x = enc.embed(tape, raw, w, b, expect_len)
    return enc.encoder_forward(tape, params, prefix, x, cfg.n_blocks)


def forward(tape, params, cfg: ModelConfig, xu=None, xv=None):
    """Batch forward. Returns (u, v, logits) nodes; u/v None when unused.

    xu: (B, len_u) beat waveforms; xv: (B, len_v) flattened fingerprints.
    """
    dtype = cfg.np_dtype
    u = v = None
    if cfg.variant in ("ppg", "fused"):
        if xu is None:
            raise InputError("variant needs beat input")
        xu_n = tape.constant(ad.as_tensor(xu, dtype))
        g_u = _encode(tape, params, cfg, "enc_u", xu_n, cfg.len_u)
    if cfg.variant in ("fingerprint", "fused"):
        if xv is None:
            raise InputError("variant needs fingerprint input")
        xv_n = tape.constant(ad.as_tensor(xv, dtype))
        g_v = _encode(tape, params, cfg, "enc_v", xv_n, cfg.len_v)

    if cfg.variant == "fused":
        u2v = {k: tape.leaf(params[f"xattn.u2v.{k}"]) for k in ("wq", "wk", "wv", "wo", "proj")}
        v2u = {k: tape.leaf(params[f"xattn.v2u.{k}"]) for k in ("wq", "wk", "wv", "wo", "proj")}
        au = attn.multihead(tape, g_u, g_v, u2v["wq"], u2v["wk"], u2v["wv"],
                            u2v["wo"], cfg.scale_width)
        av = attn.multihead(tape, g_v, g_u, v2u["wq"], v2u["wk"], v2u["wv"],
                            v2u["wo"], cfg.scale_width)
        u = attn.pool_project(tape, au, u2v["proj"])
        v = attn.pool_project(tape, av, v2u["proj"])
        z = attn.fuse(tape, u, v)
    elif cfg.variant == "ppg":
        proj = tape.leaf(params["xattn.u2v.proj"])
        u = attn.pool_project(tape, g_u, proj)
        z = u
    else:
        proj = tape.leaf(params["xattn.v2u.proj"])
        v = attn.pool_project(tape, g_v, proj)
        z = v

    clf = {k: tape.leaf(params[f"clf.{k}"]) for k in ("w1", "b1", "w2", "b2")}
    logits = attn.classify(tape, z, clf["w1"], clf["b1"], clf["w2"], clf["b2"])
    return u, v, logits


def calibrate_projections(params, cfg: ModelConfig, xu, xv):
    """Data-dependent init: start the two latent spaces aligned.

    Runs one forward pass up to the pooled (pre-projection) vectors and
    replaces the v-side projection with H @ P_u, where the Householder map
    H sends the v common mode onto the u common mode. Without this the two
    modalities start at an arbitrary relative angle and the moment-level
    InfoNCE has no useful gradient until far too late.
    """
    if cfg.variant != "fused":
        return
    tape = ad.Tape()
    g_u = _encode(tape, params, cfg, "enc_u", tape.constant(ad.as_tensor(xu, cfg.np_dtype)), cfg.len_u)
    g_v = _encode(tape, params, cfg, "enc_v", tape.constant(ad.as_tensor(xv, cfg.np_dtype)), cfg.len_v)
    u2v = {k: tape.leaf(params[f"xattn.u2v.{k}"]) for k in ("wq", "wk", "wv", "wo")}
    v2u = {k: tape.leaf(params[f"xattn.v2u.{k}"]) for k in ("wq", "wk", "wv", "wo")}
    au = attn.multihead(tape, g_u, g_v, u2v["wq"], u2v["wk"], u2v["wv"],
                        u2v["wo"], cfg.scale_width)
    av = attn.multihead(tape, g_v, g_u, v2u["wq"], v2u["wk"], v2u["wv"],
                        v2u["wo"], cfg.scale_width)
    m_u = au.value.mean(axis=(0, 1)).astype(np.float64)
    m_v = av.value.mean(axis=(0, 1)).astype(np.float64)
    nu, nv = np.linalg.norm(m_u), np.linalg.norm(m_v)
    if nu < 1e-9 or nv < 1e-9:
        return
    w = m_v / nv - m_u / nu
    d = cfg.d
    if np.linalg.norm(w) < 1e-9:
        house = np.eye(d)
    else:
        house = np.eye(d) - 2.0 * np.outer(w, w) / np.dot(w, w)
    p_u = params["xattn.u2v.proj"].value.astype(np.float64)
    params["xattn.v2u.proj"].value[...] = (house @ p_u).astype(
        params["xattn.v2u.proj"].value.dtype)


def score_pairs(params, cfg: ModelConfig, xu, xv, chunk: int = 64):
    """Sigmoid match scores plus latents, no gradients kept."""
    n = (xu if xu is not None else xv).shape[0]
    scores = np.empty(n)
    us = vs = None
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        tape = ad.Tape()
        u, v, logits = forward(tape, params, cfg,
                               None if xu is None else xu[a:b],
                               None if xv is None else xv[a:b])
        scores[a:b] = 1.0 / (1.0 + np.exp(-logits.value.astype(np.float64)))
        if u is not None:
            us = u.value.astype(np.float64) if us is None else np.vstack([us, u.value])
        if v is not None:
            vs = v.value.astype(np.float64) if vs is None else np.vstack([vs, v.value])
    return scores, us, vs


def stabilize(params, cfg: ModelConfig):
    """Re-project Re(A) after an optimizer step (both encoders)."""
    if cfg.variant in ("ppg", "fused"):
        enc.project_stability(params, "enc_u", cfg.n_blocks)
    if cfg.variant in ("fingerprint", "fused"):
        enc.project_stability(params, "enc_v", cfg.n_blocks)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_VARIANT_CODE = {name: i for i, name in enumerate(VARIANTS)}


def save_checkpoint(path, params, cfg: ModelConfig):
    tensors = {"meta.model": np.array(
        [cfg.d, cfg.d_h, cfg.n_blocks, cfg.heads, cfg.len_u, cfg.len_v,
         int(cfg.per_head_scale), _VARIANT_CODE[cfg.variant], cfg.qk_gain],
        dtype=np.float64)}
    for name, p in params.items():
        tensors[name] = p.value
    write_container(path, tensors)


def load_checkpoint(path):
    tensors = read_container(path)
    if "meta.model" not in tensors:
        raise InputError(f"{path}: not a model checkpoint")
    meta = tensors.pop("meta.model")
    dtypes = {str(t.dtype) for t in tensors.values()}
    dtype = "float32" if dtypes == {"float32"} else "float64"
    cfg = ModelConfig(
        d=int(meta[0]), d_h=int(meta[1]), n_blocks=int(meta[2]),
        heads=int(meta[3]), len_u=int(meta[4]), len_v=int(meta[5]),
        dtype=dtype, per_head_scale=bool(meta[6]),
        variant=VARIANTS[int(meta[7])],
        qk_gain=float(meta[8]) if len(meta) > 8 else 1.0,
    )
    params = {name: ad.Parameter(name, arr) for name, arr in tensors.items()}
    return params, cfg


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

TINY_CONFIG = ModelConfig(d=8, d_h=4, n_blocks=1, heads=2, len_u=16, len_v=25,
                          dtype="float64", variant="fused")


def gradcheck(cfg: ModelConfig = TINY_CONFIG, batch: int = 4, seed: int = 0,
              step: float = 1e-5):
    """Analytic vs central-difference gradients of the combined objective.

    Returns the max relative error over every parameter entry. The loss is
    the full combined objective (BCE + alignment + spread) on a random batch
    with nonzero moments.
    """
    if cfg.dtype != "float64":
        cfg = replace(cfg, dtype="float64")
    rng = np.random.default_rng([seed, 13])
    params = init_model(cfg, seed)
    xu = rng.uniform(0.0, 1.0, size=(batch, cfg.len_u))
    xv = rng.uniform(0.0, 1.0, size=(batch, cfg.len_v))
    labels = (np.arange(batch) % 2).astype(int)
    moments = losses.MomentEstimates(
        rng.normal(0.2, 0.3, size=cfg.d), rng.normal(-0.1, 0.3, size=cfg.d)
    )
    weights = losses.LossWeights()

    def run():
        tape = ad.Tape()
        u, v, logits = forward(tape, params, cfg, xu, xv)
        result = losses.batch_loss(tape, u, v, logits, labels, moments,
                                   weights, pos_weight=1.5)
        return tape, result.loss

    for p in params.values():
        p.zero_grad()
    tape, loss = run()
    ad.backward(tape, loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    numeric = ad.finite_difference(lambda: run()[1].value, params.values(), step)
    return ad.max_relative_error(analytic, numeric)
