"""CLI surface: subcommands, manifests, determinism, exit codes."""

import os

import numpy as np
import pytest

from pulseprint import cli
from pulseprint.container import read_container


def run_cli(*argv):
    return cli.run(list(argv))


def write_config(path, **kv):
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")
    return str(path)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    """Two-subject, 10 s dataset shared by the subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "synth.cfg", **{
        "synth.subjects": 2, "synth.recordings": 1, "synth.duration_s": 10.0,
        "synth.fps": 60.0, "synth.size": 64, "synth.spread": 0.8, "seed": 5,
    })
    out = str(root / "data")
    assert run_cli("synth", "--config", cfg, "--out", out) == 0
    return out, cfg, root


class TestSynth:
    def test_layout_and_frame_count(self, synth_dir):
        out, _, _ = synth_dir
        subjects = sorted(d for d in os.listdir(out)
                          if d.startswith("subject_"))
        assert subjects == ["subject_00", "subject_01"]
        frames = [f for f in os.listdir(os.path.join(out, "subject_00", "rec_00"))
                  if f.endswith(".pgm") and f.startswith("frame_")]
        assert len(frames) == 600
        assert os.path.exists(os.path.join(out, "manifest.txt"))

    def test_byte_identical_rerun(self, synth_dir, tmp_path):
        out, cfg, _ = synth_dir
        again = str(tmp_path / "data2")
        assert run_cli("synth", "--config", cfg, "--out", again) == 0
        assert tree_bytes(out) == tree_bytes(again)

    def test_zero_subjects_usage_error(self, tmp_path):
        cfg = write_config(tmp_path / "bad.cfg", **{"synth.subjects": 0})
        assert run_cli("synth", "--config", cfg, "--out", str(tmp_path / "x")) == 1

    def test_unknown_flag_rejected(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path / "y"), "--bogus") == 1

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "bad2.cfg", banana=1)
        assert run_cli("synth", "--config", cfg, "--out", str(tmp_path / "z")) == 1


@pytest.fixture(scope="module")
def preprocessed_dir(synth_dir):
    out, _, root = synth_dir
    pre = str(root / "pre")
    assert run_cli("preprocess", "--in", out, "--out", pre) == 0
    return pre


class TestPreprocess:
    def test_outputs_and_quality_report(self, preprocessed_dir):
        pre = preprocessed_dir
        beats = read_container(os.path.join(pre, "subject_00", "rec_00", "beats.bin"))
        prints = read_container(
            os.path.join(pre, "subject_00", "rec_00", "fingerprints.bin"))
        assert len(beats) == len(prints) >= 3
        for arr in beats.values():
            assert arr.shape == (300,)
            assert arr.min() >= 0.0 and arr.max() <= 1.0
        for arr in prints.values():
            assert arr.shape == (64, 64)
        report = open(os.path.join(pre, "quality.txt")).read()
        assert "beats_found=" in report and "beats_kept=" in report

    def test_idempotent_rerun(self, preprocessed_dir, synth_dir, tmp_path):
        out, _, _ = synth_dir
        again = str(tmp_path / "pre2")
        assert run_cli("preprocess", "--in", out, "--out", again) == 0
        a = tree_bytes(preprocessed_dir)
        b = tree_bytes(again)
        a.pop("manifest.txt"), b.pop("manifest.txt")  # differ by input path
        assert a == b

    def test_degenerate_recording_marked_failed(self, tmp_path):
        from pulseprint import synth as sy
        profile = sy.sample_profiles(1, 0.5, seed=9)[0]
        rec = tmp_path / "data" / "subject_00" / "rec_00"
        sy.write_recording(str(rec), profile, 6.0, 60.0, 64)
        # overwrite frames with constants: no pulse, no edges
        flat = sy.gen_fingertip_video(profile, 6.0, 60.0, 64, modulation_depth=0.0)
        from pulseprint.fingerprint import write_pgm
        frames = np.full_like(flat.frames, 120)
        for t in range(frames.shape[0]):
            write_pgm(rec / f"frame_{t:06d}.pgm", frames[t])
        with open(tmp_path / "data" / "manifest.txt", "w") as fh:
            fh.write("command=synth\nseed=9\n")
        code = run_cli("preprocess", "--in", str(tmp_path / "data"),
                       "--out", str(tmp_path / "pre"))
        assert code == 2  # the only recording failed
        report = open(tmp_path / "pre" / "quality.txt").read()
        assert "failed" in report

    def test_missing_manifest_usage_error(self, tmp_path):
        assert run_cli("preprocess", "--in", str(tmp_path), "--out",
                       str(tmp_path / "o")) == 1


@pytest.fixture(scope="module")
def train_run(preprocessed_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "train.cfg", **{
        "epochs": 2, "batch": 16, "lr": 1e-3, "dup_factor": 2, "seed": 4,
        "model.d": 4, "model.d_h": 2, "model.n_blocks": 1, "model.heads": 2,
        "model.dtype": "float32",
        "aug.ppg.scale": "false", "aug.ppg.jitter": "false",
        "aug.ppg.stretch": "false", "aug.fp.flip": "false",
        "aug.fp.rotate": "false", "aug.fp.crop": "false", "aug.fp.noise": "false",
    })
    out = str(root / "run0")
    code = run_cli("train", "--config", cfg, "--in", preprocessed_dir,
                   "--out", out, "--target-user", "subject_00")
    assert code == 0
    return out, cfg


class TestTrainCli:
    def test_outputs(self, train_run):
        out, _ = train_run
        for name in ("checkpoint.bin", "loss_log.csv", "moments.csv",
                     "metrics.csv", "manifest.txt"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_loss_log_columns(self, train_run):
        out, _ = train_run
        lines = open(os.path.join(out, "loss_log.csv")).read().splitlines()
        assert lines[0] == "epoch,batch,l_c,l_a,l_s,l"
        assert len(lines) >= 3

    def test_bce_only_flagged_run(self, preprocessed_dir, tmp_path):
        cfg = write_config(tmp_path / "bce.cfg", **{
            "epochs": 2, "batch": 16, "lr": 1e-3, "dup_factor": 2, "seed": 4,
            "lambda_a": 0.0, "lambda_s": 0.0,
            "model.d": 4, "model.d_h": 2, "model.n_blocks": 1, "model.heads": 2,
            "model.dtype": "float32",
        })
        out = str(tmp_path / "run-bce")
        assert run_cli("train", "--config", cfg, "--in", preprocessed_dir,
                       "--out", out, "--target-user", "subject_00") == 0
        rows = open(os.path.join(out, "loss_log.csv")).read().splitlines()[1:]
        for row in rows:
            _, _, l_c, l_a, l_s, total = row.split(",")
            assert float(l_a) == 0.0 and float(l_s) == 0.0
            assert float(total) == pytest.approx(float(l_c))

    def test_missing_inputs_usage_error(self, tmp_path):
        assert run_cli("train", "--in", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "o"),
                       "--target-user", "subject_00") == 1


class TestEvaluateCli:
    def test_evaluate_from_run_dir(self, train_run, tmp_path):
        out, _ = train_run
        dest = str(tmp_path / "eval")
        assert run_cli("evaluate", "--in", out, "--out", dest) == 0
        metrics = dict(
            line.split(",") for line in
            open(os.path.join(dest, "metrics.csv")).read().splitlines()[1:]
        )
        assert 0.0 <= float(metrics["eer"]) <= 0.5
        roc_lines = open(os.path.join(dest, "roc.csv")).read().splitlines()
        assert roc_lines[0] == "threshold,far,frr"

    def test_missing_checkpoint_usage_error(self, tmp_path):
        assert run_cli("evaluate", "--in", str(tmp_path),
                       "--out", str(tmp_path / "e")) == 1


class TestGradcheckCli:
    def test_passes_and_exit_zero(self, capsys):
        assert run_cli("gradcheck", "--seed", "0") == 0
        text = capsys.readouterr().out
        assert "max relative error" in text
