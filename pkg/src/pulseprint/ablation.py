"""Ablation harness: trains modality variants under identical seeds/splits.

FLOP counting convention (shared by the analytic estimate and its test
oracle): one real multiply-accumulate = 2 FLOPs; complex*complex multiply
= 6; complex add = 2; complex*real multiply = 2; transcendental evaluations
(exp, tanh, sin, cos) = 1; layer norm = 8 FLOPs per element; GELU = 14 per
element; discretization = 20 per (channel, state) entry. Counts are per
sample, forward only.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from . import metrics as me
from .errors import ConfigError, ContractError
from .model import ModelConfig
from .training import Dataset, SubjectData, TrainConfig, train

ABLATION_VARIANTS = ("ppg", "fingerprint", "fused")


def encoder_flops(length: int, d: int, d_h: int, n_blocks: int) -> int:
    """Per-sample forward FLOPs of one encoder stack (embedding included)."""
    embed = 2 * length * d
    per_block = (
        8 * length * d                    # layer norm
        + 20 * d * d_h                    # discretization
        + length * d * (10 * d_h + 8 * d_h)  # scan: state update + readout
        + 14 * length * d                 # activation
        + 2 * length * d * d + length * d  # mixing matrix + bias
        + length * d                      # residual add
    )
    return embed + n_blocks * per_block


def attention_flops(len_q: int, len_k: int, d: int, heads: int) -> int:
    """One cross-attention direction: projections, scores, softmax, output."""
    proj = 2 * len_q * d * d + 2 * 2 * len_k * d * d   # Q plus K and V
    scores = 2 * len_q * len_k * d                     # h heads of width d/h
    softmax = 5 * len_q * len_k * heads
    weighted = 2 * len_q * len_k * d
    out = 2 * len_q * d * d
    return proj + scores + softmax + weighted + out


def classifier_flops(d: int) -> int:
    mid = max(d // 2, 1)
    return 2 * d * mid + mid + 14 * mid + 2 * mid + 1


def estimate_flops(cfg: ModelConfig) -> int:
    """Per-sample forward cost of the configured variant."""
    total = classifier_flops(cfg.d)
    pool_proj = 2 * cfg.d * cfg.d + 3 * cfg.d
    if cfg.variant in ("ppg", "fused"):
        total += encoder_flops(cfg.len_u, cfg.d, cfg.d_h, cfg.n_blocks)
        total += pool_proj + cfg.len_u * cfg.d
    if cfg.variant in ("fingerprint", "fused"):
        total += encoder_flops(cfg.len_v, cfg.d, cfg.d_h, cfg.n_blocks)
        total += pool_proj + cfg.len_v * cfg.d
    if cfg.variant == "fused":
        total += attention_flops(cfg.len_u, cfg.len_v, cfg.d, cfg.heads)
        total += attention_flops(cfg.len_v, cfg.len_u, cfg.d, cfg.heads)
        total += cfg.d  # fusion add
    return total


class _ForbiddenModality:
    """Stand-in asserting a modality's data is never touched."""

    def __init__(self, what):
        self.what = what

    def __getitem__(self, idx):
        raise ContractError(f"{self.what} accessed by a variant that must skip it")

    def __len__(self):
        return 0


def _dataset_view(dataset: Dataset, variant: str) -> Dataset:
    if variant == "fused":
        return dataset
    subjects = {}
    for user, sd in dataset.subjects.items():
        if variant == "ppg":
            subjects[user] = SubjectData(sd.beats, _ForbiddenModality("fingerprints"), sd.ids)
        else:
            subjects[user] = SubjectData(_ForbiddenModality("beats"), sd.prints, sd.ids)
    return Dataset(subjects)


def ablation_run(dataset: Dataset, base_cfg: TrainConfig, users=None,
                 variants=ABLATION_VARIANTS, out_dir: str | None = None):
    """Train every (variant, user) combination with the shared seed/splits.

    Returns per-variant summaries plus per-user EER/ACC detail. ppg-only and
    fingerprint-only runs get a dataset view whose other modality raises on
    access.
    """
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    users = list(users) if users is not None else dataset.users()
    rows = []
    detail = {}
    for variant in variants:
        cfg = replace(base_cfg, model=replace(base_cfg.model, variant=variant))
        view = _dataset_view(dataset, variant)
        per_user = {}
        for user in users:
            result = train(user, view, cfg)
            per_user[user] = (result.val_accuracy, result.val_eer)
        detail[variant] = per_user
        accs = [a for a, _ in per_user.values()]
        eers = [e for _, e in per_user.values()]
        modality = {"ppg": "ppg", "fingerprint": "fingerprint",
                    "fused": "ppg+fingerprint"}[variant]
        rows.append((variant, modality, float(np.mean(accs)),
                     float(np.mean(eers)), estimate_flops(cfg.model)))
    if out_dir is not None:
        write_report(out_dir, rows)
    return rows, detail


def write_report(out_dir: str, rows):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write("variant,modality,acc,eer,flops\n")
        for variant, modality, acc, eer, flops in rows:
            fh.write(f"{variant},{modality},{acc!r},{eer!r},{flops}\n")
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        for variant, modality, acc, eer, flops in rows:
            fh.write(
                f"{variant:12s} modality={modality:16s} "
                f"ACC={acc:.4f} EER={eer:.4f} FLOPs={flops / 1e6:.2f}M\n"
            )


def score_set_eer(scores, labels) -> float:
    return me.eer(me.roc(me.ScoreSet(scores, labels)))
