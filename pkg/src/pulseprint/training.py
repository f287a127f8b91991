"""Per-user authenticator training: pairing, augmentation, the batch loop.

One binary model is trained per target user. Positive pairs cross-match the
target's beats and fingerprints many-to-many; negatives mix in other users'
data. Moments are carried across batches and epoch boundaries; every run is
reproducible from its seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import metrics as me
from . import model as mo
from .container import read_container
from .errors import ConfigError, ContractError, DataError, NumericGuardError
from .fingerprint import FP_SIZE, flatten
from .ppg import BEAT_LEN, cubic_resample, resample_beat


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class SubjectData:
    beats: np.ndarray    # (n, 300)
    prints: np.ndarray   # (n, 64, 64)
    ids: list[str]       # stable per-item identifiers


@dataclass
class Dataset:
    subjects: dict[str, SubjectData]

    def users(self):
        return sorted(self.subjects)


def load_dataset(preprocessed_dir: str) -> Dataset:
    """Read every subject's beat/fingerprint containers under a directory."""
    subjects = {}
    for subject in sorted(os.listdir(preprocessed_dir)):
        subj_dir = os.path.join(preprocessed_dir, subject)
        if not os.path.isdir(subj_dir):
            continue
        beats, prints, ids = [], [], []
        for rec in sorted(os.listdir(subj_dir)):
            rec_dir = os.path.join(subj_dir, rec)
            bpath = os.path.join(rec_dir, "beats.bin")
            fpath = os.path.join(rec_dir, "fingerprints.bin")
            if not (os.path.exists(bpath) and os.path.exists(fpath)):
                continue
            bts = read_container(bpath)
            fps = read_container(fpath)
            for (bn, bv), (fn, fv) in zip(sorted(bts.items()), sorted(fps.items())):
                beats.append(bv)
                prints.append(fv)
                ids.append(f"{subject}/{rec}/{bn.split('_')[-1]}")
        if beats:
            subjects[subject] = SubjectData(
                np.stack(beats), np.stack(prints), ids
            )
    if not subjects:
        raise DataError(f"no preprocessed subjects under {preprocessed_dir}")
    return Dataset(subjects)


@dataclass
class Split:
    train_idx: dict[str, np.ndarray]
    val_idx: dict[str, np.ndarray]


def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> Split:
    """Seeded per-user split over items; validation never trains."""
    train_idx, val_idx = {}, {}
    for i, user in enumerate(dataset.users()):
        n = len(dataset.subjects[user].ids)
        order = np.random.default_rng([seed, 17, i]).permutation(n)
        n_val = max(1, int(round(val_fraction * n)))
        val_idx[user] = np.sort(order[:n_val])
        train_idx[user] = np.sort(order[n_val:])
    return Split(train_idx, val_idx)


@dataclass
class Pair:
    beat_user: str
    beat_idx: int
    print_user: str
    print_idx: int
    label: int

    def ids(self, dataset):
        return (dataset.subjects[self.beat_user].ids[self.beat_idx],
                dataset.subjects[self.print_user].ids[self.print_idx])


NEG_MIX_EVAL = (0.3, 0.3, 0.4)


def build_pairs(target_user: str, dataset: Dataset, idx_map: dict,
                dup_factor: int, neg_ratio: float, rng,
                neg_mix=NEG_MIX_EVAL) -> list[Pair]:
    """Positive cross-matches within the target plus mismatched negatives.

    Negatives draw impostor-beat/target-print, target-beat/impostor-print
    and impostor/impostor pairs in the neg_mix proportion.
    """
    if target_user not in dataset.subjects:
        raise DataError(f"unknown target user {target_user!r}")
    t_idx = np.asarray(idx_map[target_user])
    n_items = len(t_idx)
    if n_items == 0:
        raise DataError("target split is empty")
    combos = n_items * n_items
    n_pos = min(dup_factor * n_items, combos)
    picks = rng.choice(combos, size=n_pos, replace=False)
    pairs = [
        Pair(target_user, int(t_idx[p // n_items]),
             target_user, int(t_idx[p % n_items]), 1)
        for p in picks
    ]

    impostors = [(u, int(i)) for u in dataset.users() if u != target_user
                 for i in idx_map[u]]
    if not impostors:
        raise DataError("no negatives available: dataset has a single user")
    n_neg = max(1, int(round(neg_ratio * n_pos)))
    kinds = rng.choice(3, size=n_neg, p=list(neg_mix))
    for kind in kinds:
        iu, ii = impostors[rng.integers(len(impostors))]
        ti = int(t_idx[rng.integers(n_items)])
        if kind == 0:
            pairs.append(Pair(iu, ii, target_user, ti, 0))
        elif kind == 1:
            pairs.append(Pair(target_user, ti, iu, ii, 0))
        else:
            ju, ji = impostors[rng.integers(len(impostors))]
            pairs.append(Pair(iu, ii, ju, ji, 0))
    return pairs


@dataclass
class PairBatch:
    xu: np.ndarray | None   # (M, 300); None when the variant skips beats
    xv: np.ndarray | None   # (M, 4096); None when the variant skips prints
    labels: np.ndarray      # (M,) in {0, 1}
    pair_ids: list

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ContractError("a batch needs at least 2 pairs")
        if not (self.labels == 0).any():
            raise ContractError("a batch needs at least one negative pair")


def batch_pair_lists(pairs: list[Pair], batch_size: int, rng) -> list[list[Pair]]:
    """Stratified batches: positives and negatives spread evenly.

    Keeps every batch's label mix near the global ratio and guarantees each
    batch at least one negative; a trailing singleton folds into the last
    batch.
    """
    pos = [p for p in pairs if p.label == 1]
    neg = [p for p in pairs if p.label == 0]
    rng.shuffle(pos)
    rng.shuffle(neg)
    total = len(pairs)
    n_batches = max(1, -(-total // batch_size))
    n_batches = min(n_batches, max(1, len(neg)))
    buckets = [[] for _ in range(n_batches)]
    for i, p in enumerate(pos):
        buckets[i % n_batches].append(p)
    for i, p in enumerate(neg):
        buckets[i % n_batches].append(p)
    buckets = [b for b in buckets if b]
    if len(buckets) > 1 and len(buckets[-1]) < 2:
        buckets[-2].extend(buckets.pop())
    for b in buckets:
        rng.shuffle(b)
    return buckets


def make_pairs(target_user: str, dataset: Dataset, ratio: float = 1.0,
               dup_factor: int = 4, batch_size: int = 256, seed: int = 0):
    """Stream of PairBatch over the target's training split (no augmentation)."""
    if target_user not in dataset.subjects:
        raise DataError(f"unknown target user {target_user!r}")
    if len(dataset.subjects[target_user].ids) < 10:
        raise DataError("target needs at least 10 beats and 10 fingerprints")
    split = split_dataset(dataset, val_fraction=0.2, seed=seed)
    rng = np.random.default_rng([seed, 19])
    pairs = build_pairs(target_user, dataset, split.train_idx, dup_factor,
                        ratio, rng)
    for bucket in batch_pair_lists(pairs, batch_size, rng):
        yield assemble_batch(bucket, dataset, augment=None)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    ppg_scale: bool = True
    ppg_jitter: bool = True
    ppg_stretch: bool = True
    fp_flip: bool = True
    fp_rotate: bool = True
    fp_crop: bool = True
    fp_noise: bool = True

    def any_ppg(self):
        return self.ppg_scale or self.ppg_jitter or self.ppg_stretch

    def any_fp(self):
        return self.fp_flip or self.fp_rotate or self.fp_crop or self.fp_noise


AUGMENT_OFF = AugmentConfig(*(False,) * 7)


def augment_ppg(beat: np.ndarray, seed, toggles: AugmentConfig = AugmentConfig()):
    """Amplitude scale, additive jitter, time stretch + re-resample to 300."""
    if not toggles.any_ppg():
        return np.array(beat, copy=True)
    rng = np.random.default_rng(seed)
    y = np.asarray(beat, dtype=np.float64).copy()
    if toggles.ppg_scale:
        y *= rng.uniform(0.9, 1.1)
    if toggles.ppg_jitter:
        y += rng.normal(0.0, 0.01, size=y.shape)
    if toggles.ppg_stretch:
        factor = rng.uniform(0.95, 1.05)
        y = cubic_resample(y, int(round(BEAT_LEN * factor)))
    return resample_beat(y)


def hflip_image(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def bilinear_sample(img: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Sample img at fractional coordinates; zero outside the frame."""
    h, w = img.shape
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    ty = yy - y0
    tx = xx - x0

    def at(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    return ((1 - ty) * (1 - tx) * at(y0, x0) + (1 - ty) * tx * at(y0, x0 + 1)
            + ty * (1 - tx) * at(y0 + 1, x0) + ty * tx * at(y0 + 1, x0 + 1))


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center, bilinear interpolation, zero padding."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.radians(degrees)
    cosr, sinr = np.cos(rad), np.sin(rad)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = cosr * yy + sinr * xx + cy
    src_x = -sinr * yy + cosr * xx + cx
    return bilinear_sample(np.asarray(img, dtype=np.float64), src_y, src_x)


def crop_resize(img: np.ndarray, area_fraction: float, off_y: float, off_x: float) -> np.ndarray:
    """Crop a window of the given area fraction and resize back, bilinear."""
    h, w = img.shape
    s = np.sqrt(area_fraction)
    ch, cw = max(2, int(round(h * s))), max(2, int(round(w * s)))
    top = int(round(off_y * (h - ch)))
    left = int(round(off_x * (w - cw)))
    yy, xx = np.meshgrid(
        top + np.linspace(0, ch - 1, h), left + np.linspace(0, cw - 1, w),
        indexing="ij",
    )
    return bilinear_sample(np.asarray(img, dtype=np.float64), yy, xx)


def augment_fingerprint(fp: np.ndarray, seed,
                        toggles: AugmentConfig = AugmentConfig()):
    """Random subset of flip / rotate / crop-resize / noise, clipped to [0, 1]."""
    if not toggles.any_fp():
        return np.array(fp, copy=True)
    rng = np.random.default_rng(seed)
    out = np.asarray(fp, dtype=np.float64).copy()
    if toggles.fp_flip and rng.random() < 0.5:
        out = hflip_image(out)
    if toggles.fp_rotate and rng.random() < 0.5:
        out = rotate_image(out, rng.uniform(-10.0, 10.0))
    if toggles.fp_crop and rng.random() < 0.5:
        out = crop_resize(out, rng.uniform(0.9, 1.0), rng.random(), rng.random())
    if toggles.fp_noise and rng.random() < 0.5:
        out = out + rng.normal(0.0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# batch assembly and the training loop
# ---------------------------------------------------------------------------

def assemble_batch(bucket: list[Pair], dataset: Dataset, augment=None,
                   need_u: bool = True, need_v: bool = True) -> PairBatch:
    """Materialize (xu, xv) arrays for one batch; augment is (beat_fn, fp_fn).

    A skipped modality is never read from the dataset (single-modality
    variants must not touch the other pipeline's output).
    """
    xu = np.empty((len(bucket), BEAT_LEN)) if need_u else None
    xv = np.empty((len(bucket), FP_SIZE * FP_SIZE)) if need_v else None
    labels = np.empty(len(bucket), dtype=int)
    ids = []
    for j, p in enumerate(bucket):
        if need_u:
            beat = dataset.subjects[p.beat_user].beats[p.beat_idx]
            if augment is not None:
                beat = augment[0](beat, j)
            xu[j] = beat
        if need_v:
            fp = dataset.subjects[p.print_user].prints[p.print_idx]
            if augment is not None:
                fp = augment[1](fp, j)
            xv[j] = flatten(fp)
        labels[j] = p.label
        ids.append(p.ids(dataset))
    return PairBatch(xu, xv, labels, ids)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    dup_factor: int = 4
    neg_ratio: float = 1.0
    neg_mix: tuple = NEG_MIX_EVAL
    val_fraction: float = 0.2
    weights: lo.LossWeights = field(default_factory=lo.LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: mo.ModelConfig = field(default_factory=mo.ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 2:
            raise ConfigError("batch size must be >= 2")


@dataclass
class TrainResult:
    params: dict
    cfg: TrainConfig
    moments: lo.MomentEstimates
    loss_rows: list        # (epoch, batch, l_c, l_a, l_s, l)
    moment_rows: list      # (epoch, batch, n_pos, u_mean, v_mean, mu_u, mu_v)
    val_scores: me.ScoreSet
    val_eer: float
    val_accuracy: float
    target_sims: np.ndarray | None
    impostor_sims: np.ndarray | None


def clip_gradients(params, max_norm: float):
    """Scale all gradients down to a shared global L2 norm cap.

    Tames the early spread-loss spike (moment norms start near zero).
    """
    if max_norm <= 0:
        return
    total = 0.0
    params = list(params)
    for p in params:
        g = p.grad.astype(np.float64, copy=False)
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= np.asarray(factor, dtype=p.grad.dtype)


def _epoch_batches(pairs, cfg, epoch):
    rng = np.random.default_rng([cfg.seed, 23, epoch])
    return batch_pair_lists(pairs, cfg.batch, rng)


def train(target_user: str, dataset: Dataset, cfg: TrainConfig,
          out_dir: str | None = None) -> TrainResult:
    """Per-user training loop.

    Per batch: forward both modalities, EMA moment update (epoch 0 starts
    from zero; later epochs continue from the previous epoch's final
    moments), combined loss, backward, Adam step, stability projection.
    Deterministic under a fixed seed; aborts on non-finite loss.
    """
    subj = dataset.subjects.get(target_user)
    if subj is None:
        raise DataError(f"unknown target user {target_user!r}")
    if len(subj.ids) < 10:
        raise DataError("target needs at least 10 beats and 10 fingerprints")

    split = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    pair_rng = np.random.default_rng([cfg.seed, 19])
    train_pairs = build_pairs(target_user, dataset, split.train_idx,
                              cfg.dup_factor, cfg.neg_ratio, pair_rng,
                              neg_mix=cfg.neg_mix)
    val_pairs = build_pairs(target_user, dataset, split.val_idx,
                            cfg.dup_factor, cfg.neg_ratio,
                            np.random.default_rng([cfg.seed, 29]))
    val_ids = {i for p in val_pairs for i in p.ids(dataset)}

    n_pos = sum(p.label for p in train_pairs)
    n_neg = len(train_pairs) - n_pos
    pos_weight = max(n_neg, 1) / max(n_pos, 1)

    variant = cfg.model.variant
    params = mo.init_model(cfg.model, cfg.seed)
    if variant == "fused":
        first = _epoch_batches(train_pairs, cfg, 0)[0]
        calib = assemble_batch(first, dataset, augment=None)
        mo.calibrate_projections(params, cfg.model, calib.xu, calib.xv)
    state = ad.AdamState()
    moments = lo.MomentEstimates.zeros(cfg.model.d)
    loss_rows, moment_rows = [], []

    for epoch in range(cfg.epochs):
        for b_idx, bucket in enumerate(_epoch_batches(train_pairs, cfg, epoch)):
            aug = None
            if cfg.augment.any_ppg() or cfg.augment.any_fp():
                aug = (
                    lambda beat, j, e=epoch, bi=b_idx: augment_ppg(
                        beat, [cfg.seed, 31, e, bi, j], cfg.augment),
                    lambda fp, j, e=epoch, bi=b_idx: augment_fingerprint(
                        fp, [cfg.seed, 37, e, bi, j], cfg.augment),
                )
            batch = assemble_batch(bucket, dataset, aug,
                                   need_u=variant in ("ppg", "fused"),
                                   need_v=variant in ("fingerprint", "fused"))
            for bid in batch.pair_ids:
                if bid[0] in val_ids or bid[1] in val_ids:
                    raise ContractError("validation item leaked into training")

            for p in params.values():
                p.zero_grad()
            tape = ad.Tape()
            u, v, logits = mo.forward(tape, params, cfg.model, batch.xu, batch.xv)
            if variant == "fused":
                result = lo.batch_loss(tape, u, v, logits, batch.labels,
                                       moments, cfg.weights, pos_weight)
                loss = result.loss
                l_c, l_a, l_s = result.l_c, result.l_a, result.l_s
                if result.batch_means is not None:
                    moment_rows.append((epoch, b_idx, int(batch.labels.sum()),
                                        result.batch_means[0], result.batch_means[1],
                                        result.new_moments.mu_u.copy(),
                                        result.new_moments.mu_v.copy()))
                moments = result.new_moments
            else:
                loss = lo.weighted_bce(tape, logits, batch.labels, pos_weight)
                l_c, l_a, l_s = float(loss.value), 0.0, 0.0
            total = float(loss.value)
            if not np.isfinite(total):
                raise NumericGuardError("training diverged: non-finite loss")
            ad.backward(tape, loss)
            clip_gradients(params.values(), cfg.grad_clip)
            ad.adam_step(params.values(), state, cfg.lr)
            mo.stabilize(params, cfg.model)
            loss_rows.append((epoch, b_idx, l_c, l_a, l_s, total))

    val_batch = assemble_batch(val_pairs, dataset, augment=None,
                               need_u=variant in ("ppg", "fused"),
                               need_v=variant in ("fingerprint", "fused"))
    scores, us, vs = mo.score_pairs(params, cfg.model, val_batch.xu, val_batch.xv)
    score_set = me.ScoreSet(scores, val_batch.labels)
    curve = me.roc(score_set)
    val_eer = me.eer(curve)
    val_acc = me.accuracy(score_set)

    target_sims = impostor_sims = None
    if variant == "fused":
        target_sims = np.array([_cos(moments.mu_u, moments.mu_v)])
        impostor_sims = _impostor_probe(target_user, dataset, split, params,
                                        cfg.model, moments)

    result = TrainResult(params, cfg, moments, loss_rows, moment_rows,
                         score_set, val_eer, val_acc, target_sims, impostor_sims)
    if out_dir is not None:
        write_train_outputs(out_dir, result)
    return result


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _impostor_probe(target_user, dataset, split, params, model_cfg, moments):
    """Cosine similarity of the target moments against pure impostor latents.

    Probes coherent (beat_i, print_i) pairs of each non-target user's
    validation items, so both latents come from impostor data only.
    """
    pairs = []
    for user in dataset.users():
        if user == target_user:
            continue
        for i in split.val_idx[user]:
            pairs.append(Pair(user, int(i), user, int(i), 0))
    if not pairs:
        return None
    xu = np.stack([dataset.subjects[p.beat_user].beats[p.beat_idx] for p in pairs])
    xv = np.stack([flatten(dataset.subjects[p.print_user].prints[p.print_idx])
                   for p in pairs])
    _, us, vs = mo.score_pairs(params, model_cfg, xu, xv)
    sims = []
    for x, mu in ((us, moments.mu_u), (vs, moments.mu_v)):
        nx = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        sims.append(nx @ (mu / max(np.linalg.norm(mu), 1e-12)))
    return np.concatenate(sims)


def write_train_outputs(out_dir: str, result: TrainResult):
    os.makedirs(out_dir, exist_ok=True)
    mo.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                       result.params, result.cfg.model)
    with open(os.path.join(out_dir, "loss_log.csv"), "w") as fh:
        fh.write("epoch,batch,l_c,l_a,l_s,l\n")
        for row in result.loss_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]!r},{row[5]!r}\n")
    d = result.moments.mu_u.shape[0]
    with open(os.path.join(out_dir, "moments.csv"), "w") as fh:
        cols = ["epoch", "batch", "n_pos"]
        for group in ("u_mean", "v_mean", "mu_u", "mu_v"):
            cols += [f"{group}_{i}" for i in range(d)]
        fh.write(",".join(cols) + "\n")
        for epoch, b_idx, n_pos, um, vm, mu, mv in result.moment_rows:
            vals = [str(epoch), str(b_idx), str(n_pos)]
            for vec in (um, vm, mu, mv):
                vals += [repr(float(x)) for x in vec]
            fh.write(",".join(vals) + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"val_eer,{result.val_eer!r}\n")
        fh.write(f"val_accuracy,{result.val_accuracy!r}\n")
