"""The vectorized feature/reward engine must agree with the per-state
reference implementations in demos/reward."""

import numpy as np
import pytest

from scopetrack.config import Config
from scopetrack.demos import default_keyjoint_map, generate_demo, goal_features
from scopetrack.features import CorpusArrays, FeatureExtractor, POS_SCALE
from scopetrack.model import EnvParams, default_robot
from scopetrack.reward import RewardWeights, breakdown
from scopetrack.sim import BatchSim
from tests.test_demos import circle_task


@pytest.fixture(scope="module")
def setup():
    model = default_robot()
    cfg = Config()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    clip.name = "c0"
    kmap = default_keyjoint_map(model)
    corpus = CorpusArrays([clip], kmap, cfg.reward)
    fx = FeatureExtractor(model, corpus, cfg.reward)
    sim = BatchSim(model, cfg.env, [clip.shape] * 3)
    rng = np.random.default_rng(4)
    for i, t in enumerate((0, 40, 80)):
        sim.reset_env(i, clip.wrist[t] + rng.normal(0, 0.01, 3),
                      rng.normal(0, 0.1, model.n_joints),
                      clip.obj[t] + rng.normal(0, 0.01, 3))
    # step a little so flags/velocities are realistic
    for _ in range(3):
        sim.step(rng.uniform(-0.3, 0.3, (3, model.action_dim)))
    return model, cfg, clip, kmap, corpus, fx, sim


def test_goal_block_matches_per_state_oracle(setup):
    model, cfg, clip, kmap, corpus, fx, sim = setup
    env_t = np.array([3, 43, 83])
    obs = fx.observations(sim, np.zeros(3, dtype=np.int64), env_t)
    for i in range(3):
        st = sim.get_state(i)
        gf = goal_features(st, clip, int(env_t[i]), ks=fx.ks, kmap=kmap, model=model)
        # rebuild the batched goal block in oracle order with the same scales
        per_k = []
        for j, k in enumerate(fx.ks):
            per_k += [
                gf.tip_rot_delta[j],
                (gf.tip_pos_delta[j] * POS_SCALE).ravel(),
                [gf.obj_rot_delta[j]],
                gf.obj_pos_delta[j] * POS_SCALE,
                (gf.d_delta[j] * POS_SCALE).ravel(),
                gf.c_delta[j],
                gf.ref_wrist[j, :2] * POS_SCALE, [gf.ref_wrist[j, 2]],
                (gf.ref_tip_pos[j] * POS_SCALE).ravel(),
                gf.ref_tip_rot[j],
                gf.ref_obj[j, :2] * POS_SCALE, [gf.ref_obj[j, 2]],
            ]
        oracle = np.concatenate([np.atleast_1d(p) for p in per_k])
        got = obs[i, fx.state_dim:]
        assert got.shape == oracle.shape
        assert np.max(np.abs(got - oracle)) < 1e-10


def test_reward_matches_per_state_oracle(setup):
    model, cfg, clip, kmap, corpus, fx, sim = setup
    env_t = np.array([3, 43, 83])
    cmd = np.random.default_rng(0).uniform(-0.1, 0.1, (3, model.action_dim))
    prev = np.zeros_like(cmd)
    vel = np.concatenate([sim.wristd, sim.qd], axis=1)
    acc = vel / cfg.env.control_timestep
    comps, r_energy, total, w = fx.reward_terms(
        sim, np.zeros(3, dtype=np.int64), env_t, cmd, prev, vel, acc)
    for i in range(3):
        st = sim.get_state(i)
        bd = breakdown(st, clip, int(env_t[i]), kmap, cfg.reward, model,
                       cmd=cmd[i], cmd_prev=prev[i], joint_vel=vel[i], joint_acc=acc[i])
        got = np.array([c[i] for c in comps])
        assert np.max(np.abs(got - bd.components())) < 1e-12
        assert r_energy[i] == pytest.approx(bd.r_energy, abs=1e-12)
        assert total[i] == pytest.approx(bd.total, abs=1e-12)
        assert w[i] == pytest.approx(bd.w_dist, abs=1e-15)


def test_contact_match_oracle(setup):
    model, cfg, clip, kmap, corpus, fx, sim = setup
    env_t = np.array([3, 43, 83])
    got = fx.contact_match(sim, np.zeros(3, dtype=np.int64), env_t)
    for i in range(3):
        st = sim.get_state(i)
        links = [int(model.keypoint_link[k]) for k in kmap.robot_ids]
        robot_c = st.contact[links].astype(float)
        ref_c = clip.c_flags[env_t[i]][kmap.demo_fingers].astype(float)
        assert got[i] == bool(np.all(robot_c == ref_c))


def test_observation_finiteness_and_dim(setup):
    model, cfg, clip, kmap, corpus, fx, sim = setup
    obs = fx.observations(sim, np.zeros(3, dtype=np.int64), np.array([0, 1, 119]))
    assert obs.shape == (3, fx.obs_dim)
    assert np.all(np.isfinite(obs))
