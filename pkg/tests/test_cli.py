import json
import os
import subprocess
import sys

import numpy as np
import pytest

from scopetrack.cli import main
from scopetrack.config import ConfigError, load_config


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demos")
    # a one-clip corpus keeps CLI tests fast
    from scopetrack.demos import generate_demo, save_clip
    from tests.test_demos import circle_task

    clip = generate_demo(circle_task(), np.random.default_rng(0))
    clip.name = "c0"
    save_clip(clip, out / "c0.jsonl")
    return out


@pytest.fixture(scope="module")
def tracker_ckpt(tmp_path_factory, demo_dir):
    out = tmp_path_factory.mktemp("tracker")
    cfg = {"ppo": {"n_envs": 4, "horizon": 8, "iterations": 2, "minibatch": 32}}
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["--config", str(cfg_path), "--out", str(out), "--seed", "1",
               "train-tracker", "--demos", str(demo_dir)])
    assert rc == 0
    return out / "tracker.json", cfg_path


def test_gen_demos_writes_corpus(tmp_path):
    rc = main(["--out", str(tmp_path), "gen-demos"])
    assert rc == 0
    files = [f for f in os.listdir(tmp_path) if f.endswith(".jsonl")]
    assert len(files) == 18
    index = json.loads((tmp_path / "corpus_index.json").read_text())
    assert len(index) == 18


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": {}}))
    rc = main(["--config", str(bad), "--out", str(tmp_path), "gen-demos"])
    assert rc == 2


def test_io_error_exit_code(tmp_path):
    rc = main(["--out", str(tmp_path), "train-tracker", "--demos",
               str(tmp_path / "missing")])
    assert rc == 4


def test_train_tracker_outputs(tracker_ckpt):
    ckpt_path, _ = tracker_ckpt
    assert ckpt_path.exists()
    out = ckpt_path.parent
    assert (out / "training_log.csv").exists()
    assert (out / "training_curves.png").exists()


def test_eval_byte_identical(tracker_ckpt, demo_dir, tmp_path):
    ckpt_path, cfg_path = tracker_ckpt
    outs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        rc = main(["--config", str(cfg_path), "--out", str(d), "--seed", "9",
                   "eval", "--demos", str(demo_dir), "--checkpoint", str(ckpt_path),
                   "--rollouts", "2"])
        assert rc == 0
        outs.append(d)
    a, b = outs
    assert (a / "eval_report.csv").read_bytes() == (b / "eval_report.csv").read_bytes()
    assert (a / "eval_summary.json").read_bytes() == (b / "eval_summary.json").read_bytes()
    assert (a / "eval_report.png").exists()


def test_rollout_dump(tracker_ckpt, demo_dir, tmp_path):
    ckpt_path, cfg_path = tracker_ckpt
    rc = main(["--config", str(cfg_path), "--out", str(tmp_path), "rollout",
               "--clip", str(demo_dir / "c0.jsonl"), "--checkpoint", str(ckpt_path)])
    assert rc == 0
    lines = (tmp_path / "trajectory.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["frames"] == len(lines) - 1
    rec = json.loads(lines[1])
    assert {"frame", "obj", "tips", "contact", "wrist"} <= set(rec)
    assert (tmp_path / "rollout.png").exists()


def test_distill_smoke(tracker_ckpt, demo_dir, tmp_path):
    ckpt_path, _ = tracker_ckpt
    cfg = {
        "ppo": {"n_envs": 4, "horizon": 8, "iterations": 2, "minibatch": 32},
        "distill": {"n_envs": 2, "horizon": 6, "iterations": 2, "minibatch": 16,
                    "updates_per_iter": 2, "n_rays": 8, "teacher_gate": 0.0},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["--config", str(cfg_path), "--out", str(tmp_path), "distill",
               "--demos", str(demo_dir), "--teacher", str(ckpt_path)])
    assert rc == 0
    assert (tmp_path / "student.json").exists()
    log = (tmp_path / "distill_log.csv").read_text().splitlines()
    assert log[0] == "iteration,L_rec,L_KL,beta,student_success_rate"
    assert len(log) == 3


def test_unknown_reward_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"reward": {"lam_obj_pos": 5.0, "typo_key": 1}}))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "scopetrack.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-demos" in proc.stdout
