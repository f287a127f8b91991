"""Distribution-alignment training objective.

Moment-level InfoNCE over EMA first moments (negated so the total objective
is minimized), a spread penalty tying positive latents to the moments,
class-weighted BCE, and the weighted combination. Moments are running
statistics carried at float64 across batches and epochs; on the tape, only
the current batch's positive mean receives gradients (the EMA history term
enters as a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericGuardError

MOMENT_NORM_FLOOR = 1e-6


@dataclass
class LossWeights:
    tau: float = 0.5
    alpha: float = 0.9
    beta: float = 0.9
    lambda_a: float = 0.8
    lambda_s: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("temperature must be positive")
        for v in (self.alpha, self.beta):
            if not 0.0 < v < 1.0:
                raise ContractError("EMA decays must lie in (0, 1)")
        if self.lambda_a < 0 or self.lambda_s < 0:
            raise ContractError("penalty factors must be >= 0")


@dataclass
class MomentEstimates:
    """EMA first moments of the positive latents, carried across batches.

    count tracks how many updates have been applied since the zero init;
    the losses divide by (1 - decay^count) to undo the zero-init bias
    (the raw recursion below is what gets logged and carried).
    """

    mu_u: np.ndarray
    mu_v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, d: int):
        return cls(np.zeros(d), np.zeros(d), 0)

    def copy(self):
        return MomentEstimates(self.mu_u.copy(), self.mu_v.copy(), self.count)


def ema_update(mu_prev: MomentEstimates, batch_pos_means, alpha: float,
               beta: float) -> MomentEstimates:
    """mu_u <- alpha mu_u + (1-alpha) u_mean; mu_v symmetric with beta."""
    u_mean, v_mean = batch_pos_means
    return MomentEstimates(
        alpha * np.asarray(mu_prev.mu_u, dtype=np.float64)
        + (1.0 - alpha) * np.asarray(u_mean, dtype=np.float64),
        beta * np.asarray(mu_prev.mu_v, dtype=np.float64)
        + (1.0 - beta) * np.asarray(v_mean, dtype=np.float64),
        mu_prev.count + 1,
    )


# ---------------------------------------------------------------------------
# tape-side losses
# ---------------------------------------------------------------------------

def _unit(tape, x, axis=-1):
    sq = ad.sum_(tape, ad.mul(tape, x, x), axis=axis, keepdims=True)
    if np.any(sq.value < MOMENT_NORM_FLOOR ** 2):
        raise NumericGuardError("zero-norm vector in similarity computation")
    return ad.div(tape, x, ad.sqrt(tape, sq))


def alignment_loss(tape, mu_u, mu_v, neg_u, neg_v, tau: float):
    """Negated moment-level InfoNCE.

    Term 1 contrasts sim(mu_u, mu_v) against sim(mu_u, v_j) over the
    negative pairs' v latents; term 2 is symmetric over their u latents.
    Similarities are cosine. Requires at least one negative pair.
    """
    if neg_u.shape[0] < 1:
        raise ContractError("alignment loss needs at least one negative pair")
    mu_u1 = _unit(tape, mu_u)
    mu_v1 = _unit(tape, mu_v)
    s_pos = ad.scale(tape, ad.sum_(tape, ad.mul(tape, mu_u1, mu_v1)), 1.0 / tau)
    e_pos = ad.exp(tape, s_pos)

    def log_denominator(anchor_unit, others):
        sims = ad.matmul(tape, _unit(tape, others),
                         ad.reshape(tape, anchor_unit, (anchor_unit.shape[-1], 1)))
        e = ad.exp(tape, ad.scale(tape, sims, 1.0 / tau))
        return ad.log(tape, ad.add(tape, e_pos, ad.sum_(tape, e)))

    t1 = ad.sub(tape, s_pos, log_denominator(mu_u1, neg_v))
    t2 = ad.sub(tape, s_pos, log_denominator(mu_v1, neg_u))
    return ad.neg(tape, ad.add(tape, t1, t2))


def spread_loss(tape, pos_u, pos_v, mu_u, mu_v):
    """Sum over positives of ||x - mu||^2 / ||mu||^2, both modalities."""

    def side(x, mu):
        mu_sq = ad.sum_(tape, ad.mul(tape, mu, mu))
        if float(mu_sq.value) < MOMENT_NORM_FLOOR ** 2:
            raise NumericGuardError("moment norm below floor in spread loss")
        diff = ad.sub(tape, x, mu)
        per = ad.sum_(tape, ad.mul(tape, diff, diff), axis=-1)
        return ad.div(tape, ad.sum_(tape, per), mu_sq)

    return ad.add(tape, side(pos_u, mu_u), side(pos_v, mu_v))


def weighted_bce(tape, logits, labels, pos_weight: float):
    """Mean of -[w y log sig(l) + (1-y) log(1-sig(l))], stable softplus form."""
    if pos_weight <= 0:
        raise ContractError("pos_weight must be positive")
    y = np.asarray(labels, dtype=logits.dtype)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0/1")
    yk = tape.constant(y)
    one_m = tape.constant(1.0 - y)
    pos_term = ad.mul(tape, yk, ad.softplus(tape, ad.neg(tape, logits)))
    neg_term = ad.mul(tape, one_m, ad.softplus(tape, logits))
    combined = ad.add(tape, ad.scale(tape, pos_term, pos_weight), neg_term)
    return ad.mean(tape, combined)


def total_loss(tape, l_c, l_a, l_s, weights: LossWeights):
    """L = L_C + lambda_A L_A + lambda_S L_S."""
    out = l_c
    if l_a is not None:
        out = ad.add(tape, out, ad.scale(tape, l_a, weights.lambda_a))
    if l_s is not None:
        out = ad.add(tape, out, ad.scale(tape, l_s, weights.lambda_s))
    return out


@dataclass
class BatchLossResult:
    loss: object
    l_c: float
    l_a: float
    l_s: float
    new_moments: MomentEstimates
    batch_means: tuple | None


def batch_loss(tape, u, v, logits, labels, moments: MomentEstimates,
               weights: LossWeights, pos_weight: float) -> BatchLossResult:
    """Assemble the combined objective for one batch of latent pairs.

    Labels are 1 for matched (target-user) pairs. With no positives in the
    batch the moment update is skipped and only the BCE term contributes.
    The EMA history enters as a constant; the fresh batch mean stays on the
    tape so current positives receive alignment/spread gradients.
    """
    labels = np.asarray(labels)
    pos_idx = np.nonzero(labels == 1)[0]
    neg_idx = np.nonzero(labels == 0)[0]
    l_c = weighted_bce(tape, logits, labels, pos_weight)

    if pos_idx.size == 0:
        loss = total_loss(tape, l_c, None, None, weights)
        return BatchLossResult(loss, float(l_c.value), 0.0, 0.0,
                               moments.copy(), None)

    dtype = u.dtype
    pos_u = ad.take_rows(tape, u, pos_idx)
    pos_v = ad.take_rows(tape, v, pos_idx)
    u_mean = ad.mean(tape, pos_u, axis=0)
    v_mean = ad.mean(tape, pos_v, axis=0)
    mu_u = ad.add(tape,
                  tape.constant(weights.alpha * moments.mu_u, dtype=dtype),
                  ad.scale(tape, u_mean, 1.0 - weights.alpha))
    mu_v = ad.add(tape,
                  tape.constant(weights.beta * moments.mu_v, dtype=dtype),
                  ad.scale(tape, v_mean, 1.0 - weights.beta))
    # undo the zero-init EMA bias inside the losses only; cosine terms are
    # scale-invariant and the correction decays to 1
    k = moments.count + 1
    mu_u = ad.scale(tape, mu_u, 1.0 / (1.0 - weights.alpha ** k))
    mu_v = ad.scale(tape, mu_v, 1.0 / (1.0 - weights.beta ** k))

    batch_means = (np.asarray(u_mean.value, dtype=np.float64),
                   np.asarray(v_mean.value, dtype=np.float64))
    new_moments = ema_update(moments, batch_means, weights.alpha, weights.beta)

    # zero penalty factors disable their terms entirely (pure-BCE mode)
    l_a = l_s = None
    if weights.lambda_a != 0:
        neg_u = ad.take_rows(tape, u, neg_idx)
        neg_v = ad.take_rows(tape, v, neg_idx)
        l_a = alignment_loss(tape, mu_u, mu_v, neg_u, neg_v, weights.tau)
    if weights.lambda_s != 0:
        l_s = spread_loss(tape, pos_u, pos_v, mu_u, mu_v)
    loss = total_loss(tape, l_c, l_a, l_s, weights)
    return BatchLossResult(loss, float(l_c.value),
                           0.0 if l_a is None else float(l_a.value),
                           0.0 if l_s is None else float(l_s.value),
                           new_moments, batch_means)
