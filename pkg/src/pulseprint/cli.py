"""Operator entry point: synth, preprocess, train, evaluate, ablate, gradcheck.

Every run writes a manifest (command, seed, resolved config, versions) next
to its outputs; manifests carry no timestamps so identical seeds reproduce
identical directories. Exit codes: 0 success, 1 usage, 2 data/quality,
3 numeric guard.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from . import ablation as ab
from . import config as cf
from . import metrics as me
from . import model as mo
from . import synth as sy
from . import training as tr
from .container import write_container
from .errors import (ConfigError, ContractError, DataError, InputError,
                     MetricError, NumericGuardError, QualityError, UsageError)
from .fingerprint import frame_edge_map
from .ppg import extract_beats
from .synth import read_recording


def write_manifest(out_dir: str, command: str, seed, values: dict, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"command={command}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"pulseprint_version={__version__}\n")
        fh.write(f"numpy_version={np.__version__}\n")
        for k, v in sorted((extra or {}).items()):
            fh.write(f"{k}={v}\n")
        fh.write(cf.format_config(values))


def _require(condition, message):
    if not condition:
        raise UsageError(message)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, values):
    _require(args.out, "synth needs --out DIR")
    n = values.get("synth.subjects", 2)
    recs = values.get("synth.recordings", 1)
    duration = values.get("synth.duration_s", 10.0)
    fps = values.get("synth.fps", 60.0)
    size = values.get("synth.size", 80)
    spread = values.get("synth.spread", 0.7)
    if n < 1:
        raise UsageError("synth.subjects must be >= 1")
    if recs < 1:
        raise UsageError("synth.recordings must be >= 1")
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    profiles = sy.sample_profiles(n, spread, seed)
    for i, profile in enumerate(profiles):
        for r in range(recs):
            rec_profile = profile if r == 0 else sy.SubjectProfile(
                **{**profile.__dict__, "seed": profile.seed + 100000 * r}
            )
            rec_dir = os.path.join(args.out, f"subject_{i:02d}", f"rec_{r:02d}")
            sy.write_recording(rec_dir, rec_profile, duration, fps, size)
    write_manifest(args.out, "synth", seed, values)
    print(f"wrote {n} subjects x {recs} recordings to {args.out}")
    return 0


def cmd_preprocess(args, values):
    _require(args.in_dir, "preprocess needs --in DIR")
    _require(args.out, "preprocess needs --out DIR")
    if not os.path.exists(os.path.join(args.in_dir, "manifest.txt")):
        raise UsageError(f"{args.in_dir}: missing manifest.txt (not a dataset?)")
    detrend_s = values.get("pre.detrend_window_s", 2.0)
    cutoff = values.get("pre.lowpass_hz", 4.0)
    corr_min = values.get("pre.corr_min", 0.80)
    report = []
    any_ok = False
    for subject in sorted(os.listdir(args.in_dir)):
        subj_dir = os.path.join(args.in_dir, subject)
        if not os.path.isdir(subj_dir):
            continue
        for rec in sorted(os.listdir(subj_dir)):
            rec_dir = os.path.join(subj_dir, rec)
            if not os.path.isdir(rec_dir):
                continue
            out_rec = os.path.join(args.out, subject, rec)
            try:
                found, kept = preprocess_recording(
                    rec_dir, out_rec, detrend_s, cutoff, corr_min)
                report.append((f"{subject}/{rec}", "ok", found, kept))
                any_ok = True
            except (QualityError, InputError) as exc:
                report.append((f"{subject}/{rec}", f"failed: {exc}", 0, 0))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "quality.txt"), "w") as fh:
        for name, status, found, kept in report:
            fh.write(f"{name}: {status} beats_found={found} beats_kept={kept}\n")
    write_manifest(args.out, "preprocess", values.get("seed", 0), values,
                   extra={"input": args.in_dir})
    if not any_ok:
        raise QualityError("every recording failed preprocessing")
    print(f"preprocessed {sum(1 for r in report if r[1] == 'ok')}/{len(report)} recordings")
    return 0


def preprocess_recording(rec_dir: str, out_dir: str, detrend_s: float,
                         cutoff: float, corr_min: float):
    """Both pipelines for one recording: beats.bin + fingerprints.bin."""
    stack = read_recording(rec_dir)
    waves, spans, found = extract_beats(stack, detrend_s, cutoff, corr_min)
    edges = np.stack([frame_edge_map(f) for f in stack.frames])
    from .fingerprint import beat_synchronized_fingerprint

    prints = [beat_synchronized_fingerprint(stack, span, edges=edges)
              for span in spans]
    os.makedirs(out_dir, exist_ok=True)
    write_container(os.path.join(out_dir, "beats.bin"),
                    {f"beat_{i:04d}": w for i, w in enumerate(waves)})
    write_container(os.path.join(out_dir, "fingerprints.bin"),
                    {f"fp_{i:04d}": p for i, p in enumerate(prints)})
    with open(os.path.join(out_dir, "quality.txt"), "w") as fh:
        fh.write(f"beats_found={found}\nbeats_kept={len(waves)}\n")
    return found, len(waves)


def cmd_train(args, values):
    _require(args.in_dir, "train needs --in DIR (preprocessed data)")
    _require(args.out, "train needs --out DIR")
    _require(args.target_user, "train needs --target-user ID")
    if not os.path.isdir(args.in_dir):
        raise UsageError(f"{args.in_dir}: no such directory; run preprocess first")
    cfg = cf.train_config_from(values, args.seed, args.variant)
    dataset = tr.load_dataset(args.in_dir)
    result = tr.train(args.target_user, dataset, cfg, out_dir=args.out)
    write_manifest(args.out, "train", cfg.seed, values,
                   extra={"input": args.in_dir, "target_user": args.target_user,
                          "variant": cfg.model.variant})
    print(f"val EER {result.val_eer:.4f}  val ACC {result.val_accuracy:.4f}")
    return 0


def cmd_evaluate(args, values):
    _require(args.in_dir, "evaluate needs --in DIR (a train run directory)")
    _require(args.out, "evaluate needs --out DIR")
    ckpt = os.path.join(args.in_dir, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise UsageError(f"{ckpt}: not found; point --in at a train run directory")
    run_meta = _read_manifest(os.path.join(args.in_dir, "manifest.txt"))
    data_dir = values.get("eval.data") or run_meta.get("input")
    _require(data_dir, "no data directory: set eval.data or keep the run manifest")
    target = args.target_user or run_meta.get("target_user")
    _require(target, "no target user: pass --target-user or keep the run manifest")
    seed = args.seed if args.seed is not None else int(run_meta.get("seed", 0))

    params, model_cfg = mo.load_checkpoint(ckpt)
    dataset = tr.load_dataset(data_dir)
    val_fraction = values.get("val_fraction", 0.2)
    split = tr.split_dataset(dataset, val_fraction, seed)
    val_pairs = tr.build_pairs(target, dataset, split.val_idx,
                               values.get("dup_factor", 4),
                               values.get("neg_ratio", 1.0),
                               np.random.default_rng([seed, 29]))
    batch = tr.assemble_batch(val_pairs, dataset, augment=None,
                              need_u=model_cfg.variant in ("ppg", "fused"),
                              need_v=model_cfg.variant in ("fingerprint", "fused"))
    scores, _, _ = mo.score_pairs(params, model_cfg, batch.xu, batch.xv)
    score_set = me.ScoreSet(scores, batch.labels)
    curve = me.roc(score_set)
    val_eer = me.eer(curve)
    val_acc = me.accuracy(score_set)
    os.makedirs(args.out, exist_ok=True)
    me.roc_to_csv(os.path.join(args.out, "roc.csv"), curve)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"eer,{val_eer!r}\n")
        fh.write(f"accuracy,{val_acc!r}\n")
    write_manifest(args.out, "evaluate", seed, values,
                   extra={"input": args.in_dir, "target_user": target})
    print(f"EER {val_eer * 100:.2f}%  ACC {val_acc * 100:.2f}%")
    return 0


def cmd_ablate(args, values):
    _require(args.in_dir, "ablate needs --in DIR (preprocessed data)")
    _require(args.out, "ablate needs --out DIR")
    if not os.path.isdir(args.in_dir):
        raise UsageError(f"{args.in_dir}: no such directory; run preprocess first")
    cfg = cf.train_config_from(values, args.seed, None)
    dataset = tr.load_dataset(args.in_dir)
    rows, _ = ab.ablation_run(dataset, cfg, out_dir=args.out)
    write_manifest(args.out, "ablate", cfg.seed, values,
                   extra={"input": args.in_dir})
    for variant, modality, acc, eer_v, flops in rows:
        print(f"{variant:12s} ACC={acc:.4f} EER={eer_v:.4f} FLOPs={flops / 1e6:.2f}M")
    return 0


def cmd_gradcheck(args, values):
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    err = mo.gradcheck(seed=seed)
    print(f"gradcheck max relative error: {err:.3e}")
    if args.out:
        write_manifest(args.out, "gradcheck", seed, values,
                       extra={"max_relative_error": repr(err)})
    if err >= 1e-4:
        raise NumericGuardError(f"gradient check failed: {err:.3e} >= 1e-4")
    return 0


def _read_manifest(path):
    meta = {}
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and "=" in line:
                    k, v = line.split("=", 1)
                    meta[k] = v
    return meta


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulseprint",
        description="Camera PPG + fingerprint authentication pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--in", dest="in_dir", default=None, help="input directory")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--target-user", default=None, help="target subject id")
        p.add_argument("--variant", default=None,
                       choices=("ppg", "fingerprint", "fused"))
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        values = cf.parse_config(args.config)
        return COMMANDS[args.command](args, values)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, QualityError, InputError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NumericGuardError as exc:
        print(f"numeric guard: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"internal contract violated: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
