import numpy as np
import pytest

from scopetrack.demos import generate_demo
from scopetrack.envelope import (
    InitStateCache,
    Mode,
    Reason,
    TerminationEnvelope,
    check_termination,
    initial_state,
    record_rollout,
    sample_init,
    update_envelope,
)
from scopetrack.model import default_robot
from scopetrack.reward import RewardBreakdown
from tests.test_demos import circle_task


def bd(j=1.0, p=1.0, r=1.0, d=1.0):
    return RewardBreakdown(r_joint_pos=j, r_joint_rot=1.0, r_obj_pos=p,
                           r_obj_rot=r, r_dist=d, r_contact=1.0,
                           r_energy=0.0, w_dist=1.0, total=1.0)


def test_check_termination_clean():
    env = TerminationEnvelope.fixed(100, kappa_init=[0.2, 0.2, 0.2, 0.2])
    ok, reason = check_termination(bd(), env, 5, [True] * 20)
    assert not ok and reason is Reason.NONE


def test_check_termination_object_pos():
    env = TerminationEnvelope.fixed(100, kappa_init=[0.2, 0.2, 0.2, 0.2])
    ok, reason = check_termination(bd(p=0.1), env, 5, [True] * 20)
    assert ok and reason is Reason.OBJECT_POS


def test_check_termination_reason_priority():
    env = TerminationEnvelope.fixed(100, kappa_init=[0.2, 0.2, 0.2, 0.2])
    ok, reason = check_termination(bd(j=0.0, p=0.0, r=0.0, d=0.0), env, 5, [False] * 20)
    assert ok and reason is Reason.HAND_POS


def test_contact_window_exactly_11():
    env = TerminationEnvelope(n_frames=100)  # adaptive start: kappa = 0
    # 10 consecutive mismatches then a match: no termination
    hist = [False] * 10 + [True]
    ok, _ = check_termination(bd(), env, 20, hist)
    assert not ok
    # 11 consecutive mismatches: criterion (V)
    ok, reason = check_termination(bd(), env, 20, [True, True] + [False] * 11)
    assert ok and reason is Reason.CONTACT
    # exactly 10 in total history: never fires
    ok, _ = check_termination(bd(), env, 20, [False] * 10)
    assert not ok


def test_record_rollout_counting():
    env = TerminationEnvelope(n_frames=100)
    for _ in range(10):
        record_rollout(env, (10, 50), failed=False)
    assert env.n_total[50] == 10
    assert env.n_total[9] == 0
    for _ in range(3):
        record_rollout(env, (10, 50), failed=True, fail_frame=50)
    assert env.n_fail[50] == 3
    assert env.n_fail[30] == 0
    assert np.all(env.n_fail <= env.n_total)


def test_record_rollout_validation():
    env = TerminationEnvelope(n_frames=100)
    with pytest.raises(ValueError):
        record_rollout(env, (10, 200), failed=False)
    with pytest.raises(ValueError):
        record_rollout(env, (10, 50), failed=True, fail_frame=99)


def test_update_envelope_fail_ratio_paper_formula():
    env = TerminationEnvelope(n_frames=4, kappa_init=[0.8, 0.8, 0.8, 0.8],
                              mode=Mode.FAIL_RATIO)
    env.n_total[:] = 4.0
    env.n_fail[:] = 1.0
    update_envelope(env, decay=False)
    assert np.allclose(env.kappa, 0.2)


def test_update_envelope_boundaries():
    for mode, at_zero, at_one in ((Mode.FAIL_RATIO, 0.0, 0.5),
                                  (Mode.SUCCESS_RATIO, 0.5, 0.0)):
        env = TerminationEnvelope(n_frames=2, mode=mode)
        env.n_total[:] = 10.0
        env.n_fail[:] = 0.0
        update_envelope(env, decay=False)
        assert np.allclose(env.kappa, at_zero)
        env.n_fail[:] = 10.0
        update_envelope(env, decay=False)
        assert np.allclose(env.kappa, at_one)


def test_update_envelope_unvisited_frames_keep_kappa():
    env = TerminationEnvelope(n_frames=3, mode=Mode.FAIL_RATIO)
    env.kappa[:, 2] = 0.33
    env.n_total[:2] = 5.0
    env.n_fail[:2] = 5.0
    update_envelope(env, decay=False)
    assert np.allclose(env.kappa[:, :2], 0.5)
    assert np.allclose(env.kappa[:, 2], 0.33)


def test_update_envelope_monotone_in_ratio():
    prev = None
    for ratio in np.linspace(0, 1, 11):
        env = TerminationEnvelope(n_frames=1, mode=Mode.FAIL_RATIO)
        env.n_total[:] = 100.0
        env.n_fail[:] = ratio * 100.0
        update_envelope(env, decay=False)
        if prev is not None:
            assert env.kappa[0, 0] >= prev - 1e-12
        prev = env.kappa[0, 0]


def test_kappa_bounds_after_random_updates():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ki = rng.uniform(0.01, 1.0)
        env = TerminationEnvelope(n_frames=5, kappa_init=[ki] * 4,
                                  mode=rng.choice([Mode.FAIL_RATIO, Mode.SUCCESS_RATIO]))
        env.n_total[:] = rng.integers(1, 50, size=5).astype(float)
        env.n_fail[:] = env.n_total * rng.uniform(0, 1, size=5)
        update_envelope(env)
        assert np.all(env.kappa >= 0.0)
        assert np.all(env.kappa <= ki + 1e-12)


def test_widest_scope_never_terminates():
    env = TerminationEnvelope(n_frames=10)  # kappa all zero
    for t in range(10):
        ok, _ = check_termination(bd(j=1e-9, p=1e-9, r=1e-9, d=1e-9), env, t, [True])
        assert not ok


def test_tightest_scope_terminates_imperfection():
    env = TerminationEnvelope.fixed(10, kappa_init=[1.0] * 4)
    ok, _ = check_termination(bd(j=0.999), env, 0, [True])
    assert ok


def test_initial_state_contract():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    for frame in (0, 40, len(clip) - 1):
        st = initial_state(clip, model, frame)
        assert np.allclose(st.joint_rot, 0.0)
        assert np.allclose(st.wrist_pose, clip.wrist[frame])
        assert np.allclose(st.obj_pose, clip.obj[frame])
        assert np.allclose(st.wrist_vel, 0.0)
        assert st.t == frame


def test_sample_init_empty_cache_fallback():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    env = TerminationEnvelope(n_frames=len(clip))
    cache = InitStateCache(n_frames=len(clip))
    frame, st = sample_init(cache, env, np.random.default_rng(0), clip, model)
    assert 0 <= frame < len(clip)
    assert np.allclose(st.joint_rot, 0.0)


def test_sample_init_priority_distribution():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    T = len(clip)
    env = TerminationEnvelope(n_frames=T)
    cache = InitStateCache(n_frames=T, eps_priority=0.05)
    # uniform priorities over 4 designated frames, everything else impossible
    cache.eps_priority = 0.0
    env.n_total[:] = 1.0
    frames = [10, 20, 30, 40]
    env.n_fail[frames] = 1.0
    # all after grasp onset? force onset 0 so no down-weighting
    clip.grasp_onset = 0
    rng = np.random.default_rng(42)
    n = 100_000
    p = cache.priorities(env, clip.grasp_onset)
    p = p / p.sum()
    draws = rng.choice(T, size=n, p=p)
    counts = np.array([(draws == f).sum() for f in frames])
    # each frequency within 3 sigma of 0.25
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(counts / n - 0.25) < 3 * sigma + 1e-12)


def test_sample_init_deterministic_priority():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    clip.grasp_onset = 0
    env = TerminationEnvelope(n_frames=len(clip))
    cache = InitStateCache(n_frames=len(clip), eps_priority=0.0)
    env.n_total[:] = 1.0
    env.n_fail[2] = 1.0
    for _ in range(20):
        frame, _ = sample_init(cache, env, np.random.default_rng(1), clip, model)
        assert frame == 2


def test_cache_threshold_and_fifo():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    cache = InitStateCache(n_frames=len(clip), capacity=16)
    st = initial_state(clip, model, 5)
    cache.cache_state(5, st, quality=0.2)
    assert 5 not in cache.slots
    marks = []
    for i in range(17):
        s = st.copy()
        s.wrist_pose = s.wrist_pose.copy()
        s.wrist_pose[0] = float(i)
        cache.cache_state(5, s, quality=1.0)
        marks.append(float(i))
    bucket = cache.slots[5]
    assert len(bucket) == 16
    assert bucket[0].wrist_pose[0] == 1.0   # oldest (0.0) evicted
    assert bucket[-1].wrist_pose[0] == 16.0


def test_cached_state_round_trip_exact():
    model = default_robot()
    clip = generate_demo(circle_task(), np.random.default_rng(0))
    cache = InitStateCache(n_frames=len(clip))
    st = initial_state(clip, model, 7)
    cache.cache_state(7, st, quality=1.0)
    back = cache.slots[7][0]
    assert back.allclose(st)


def test_envelope_json_round_trip():
    env = TerminationEnvelope(n_frames=5, mode=Mode.FAIL_RATIO)
    env.n_total[:] = 3.0
    env.n_fail[2] = 1.0
    update_envelope(env)
    back = TerminationEnvelope.from_json(env.to_json())
    assert np.array_equal(back.kappa, env.kappa)
    assert np.array_equal(back.n_fail, env.n_fail)
    assert back.mode == env.mode


def test_record_update_commute_disjoint_frames():
    a = TerminationEnvelope(n_frames=10, mode=Mode.FAIL_RATIO)
    b = TerminationEnvelope(n_frames=10, mode=Mode.FAIL_RATIO)
    record_rollout(a, (0, 3), failed=True, fail_frame=2)
    record_rollout(a, (6, 9), failed=False)
    record_rollout(b, (6, 9), failed=False)
    record_rollout(b, (0, 3), failed=True, fail_frame=2)
    update_envelope(a, decay=False)
    update_envelope(b, decay=False)
    assert np.array_equal(a.kappa, b.kappa)
