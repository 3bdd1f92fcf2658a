import json

import numpy as np
import pytest

from scopetrack.config import Config, PpoConfig
from scopetrack.demos import default_keyjoint_map, generate_demo, TIP_IDS
from scopetrack.metrics import (
    RolloutRecord,
    contact_ratio,
    evaluate,
    tracking_metrics,
    tracking_success,
    vision_success,
)
from scopetrack.model import default_robot
from scopetrack.ppo import Trainer
from tests.test_demos import circle_task


@pytest.fixture(scope="module")
def setup():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    clip.name = "c0"
    return model, clip, default_keyjoint_map(model)


def perfect_rollout(clip, kmap, offset=np.zeros(2), rot_offset=0.0):
    T = len(clip)
    frames = np.arange(T)
    tips = [TIP_IDS[f] for f in kmap.demo_fingers]
    obj = clip.obj.copy()
    obj[:, :2] += offset
    obj[:, 2] += rot_offset
    return RolloutRecord(
        clip_name=clip.name, frames=frames, obj=obj,
        tip_pos=clip.joint_pos[:, tips].copy(),
        contact_any=clip.c_flags.any(axis=1),
        obj_vel=np.zeros((T, 3)),
        terminated=False, term_frame=T - 1,
        start_obj_y=float(clip.obj[0, 1]),
    )


def test_tracking_metrics_perfect(setup):
    model, clip, kmap = setup
    m = tracking_metrics(perfect_rollout(clip, kmap), clip, kmap)
    assert m["mean_r_err"] == pytest.approx(0.0, abs=1e-12)
    assert m["mean_t_err"] == pytest.approx(0.0, abs=1e-12)
    assert m["mean_e_finger"] == pytest.approx(0.0, abs=1e-12)


def test_tracking_metrics_constant_offsets(setup):
    model, clip, kmap = setup
    m = tracking_metrics(perfect_rollout(clip, kmap, offset=np.array([0.05, 0.0])),
                         clip, kmap)
    assert np.allclose(m["t_err"], 0.05)
    m = tracking_metrics(perfect_rollout(clip, kmap, rot_offset=np.pi / 2), clip, kmap)
    assert np.allclose(m["r_err"], np.pi / 2)


def test_tracking_success_cases(setup):
    model, clip, kmap = setup
    cfg = Config()
    assert tracking_success(perfect_rollout(clip, kmap), clip, cfg.eval)
    # large object deviation fails
    bad = perfect_rollout(clip, kmap, offset=np.array([0.2, 0.0]))
    assert not tracking_success(bad, clip, cfg.eval)
    # early termination fails
    term = perfect_rollout(clip, kmap)
    term.terminated = True
    assert not tracking_success(term, clip, cfg.eval)
    # dropped below the table fails
    drop = perfect_rollout(clip, kmap)
    drop.obj = drop.obj.copy()
    drop.obj[30, 1] = -0.05
    assert not tracking_success(drop, clip, cfg.eval)


def test_vision_success_scripted(setup):
    model, clip, kmap = setup
    cfg = Config()
    # the reference itself: lifted, held with contact, replaced at rest
    assert vision_success(perfect_rollout(clip, kmap), cfg.eval)
    # no contact ever -> fail, ratio 0
    r = perfect_rollout(clip, kmap)
    r.contact_any = np.zeros(len(clip), dtype=bool)
    assert not vision_success(r, cfg.eval)
    assert contact_ratio(r, clip.grasp_onset) == 0.0
    # never returns to the table -> fail
    r2 = perfect_rollout(clip, kmap)
    r2.obj = r2.obj.copy()
    r2.obj[:, 1] += 0.0
    r2.obj[-1, 1] = r2.start_obj_y + 0.2
    assert not vision_success(r2, cfg.eval)


def test_contact_ratio_half(setup):
    model, clip, kmap = setup
    r = perfect_rollout(clip, kmap)
    post = r.frames >= clip.grasp_onset
    n_post = int(post.sum())
    half = np.zeros(len(clip), dtype=bool)
    idx = np.nonzero(post)[0]
    half[idx[: n_post // 2]] = True
    r.contact_any = half
    expected = (n_post // 2) / n_post
    assert contact_ratio(r, clip.grasp_onset) == pytest.approx(expected)


@pytest.fixture(scope="module")
def tiny_ckpt(setup):
    model, clip, kmap = setup
    cfg = Config()
    cfg.ppo = PpoConfig(n_envs=2, horizon=4, iterations=0)
    tr = Trainer(cfg, [clip], seed=0)
    return cfg, tr.checkpoint(0)


def test_evaluate_empty(tiny_ckpt, setup, tmp_path):
    model, clip, kmap = setup
    cfg, ck = tiny_ckpt
    report = evaluate(ck, cfg, [clip], n_rollouts=0, seed=0, out_dir=tmp_path)
    assert report.per_clip == []
    assert (tmp_path / "eval_report.csv").exists()
    assert (tmp_path / "eval_summary.json").exists()


def test_evaluate_deterministic_and_aggregates(tiny_ckpt, setup, tmp_path):
    model, clip, kmap = setup
    cfg, ck = tiny_ckpt
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    r1 = evaluate(ck, cfg, [clip], n_rollouts=2, seed=7, out_dir=d1)
    r2 = evaluate(ck, cfg, [clip], n_rollouts=2, seed=7, out_dir=d2)
    assert (d1 / "eval_report.csv").read_bytes() == (d2 / "eval_report.csv").read_bytes()
    assert (d1 / "eval_summary.json").read_bytes() == (d2 / "eval_summary.json").read_bytes()
    # aggregate equals the mean of per-clip rows
    for key, val in r1.aggregate.items():
        vals = [row[key] for row in r1.per_clip]
        if np.any(np.isfinite(vals)):
            assert val == pytest.approx(np.nanmean(vals))


def test_evaluate_dimension_mismatch_rejected(tiny_ckpt, setup):
    model, clip, kmap = setup
    cfg, ck = tiny_ckpt
    import copy
    bad_cfg = copy.deepcopy(cfg)
    bad_cfg.ppo.horizon_set = [1]          # different goal dimension
    with pytest.raises(ValueError):
        evaluate(ck, bad_cfg, [clip], n_rollouts=1, seed=0)
