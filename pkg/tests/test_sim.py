import numpy as np
import pytest

from scopetrack.geom import Pose2
from scopetrack.model import EnvParams, ModelError, PdCommand, RobotModel, SimState, default_robot
from scopetrack.shapes import Circle, make_box
from scopetrack.sim import (
    BatchSim,
    apply_mimic,
    contact_flags,
    nearest_surface_vectors,
    randomize,
    raycast_depth,
    step,
)


@pytest.fixture(scope="module")
def model():
    return default_robot()


def rest_state(model, wrist=(0.0, 0.3, 0.0), obj=(0.0, 0.03, 0.0), shape=Circle(0.03)):
    """Hand at rest at zero joint angles, object resting at `obj`."""
    sim = BatchSim(model, EnvParams(), [shape])
    sim.reset_env(0, np.asarray(wrist, float), np.zeros(model.n_joints), np.asarray(obj, float))
    return sim.get_state(0)


# -- apply_mimic -------------------------------------------------------------


def test_apply_mimic_scaling(model):
    m = RobotModel(**{**model.__dict__, "mimic": {1: [(2, 1.2)], 3: [(4, 0.0)]}})
    full = apply_mimic(m, np.array([0.5, 0.7]))
    assert full[0] == pytest.approx(0.5)      # driver passes through
    assert full[1] == pytest.approx(0.6)      # coefficient 1.2
    assert full[3] == pytest.approx(0.0)      # coefficient 0


def test_apply_mimic_identity_coupling(model):
    full = apply_mimic(model, np.array([0.3, -0.4]))
    assert np.allclose(full, [0.3, 0.3, -0.4, -0.4])


def test_apply_mimic_linear(model):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=2), rng.normal(size=2)
    assert np.allclose(
        apply_mimic(model, 2.0 * a + 3.0 * b),
        2.0 * apply_mimic(model, a) + 3.0 * apply_mimic(model, b),
    )


def test_mimic_unknown_driver_rejected(model):
    with pytest.raises(ModelError):
        RobotModel(**{**model.__dict__, "mimic": {2: [(4, 1.0)]}})


# -- step ---------------------------------------------------------------------


def test_step_ballistic_oracle(model):
    # free object far from everything: dv_y = -g * control_dt after one step
    state = rest_state(model, wrist=(0.0, 1.0, 0.0), obj=(0.0, 0.5, 0.0))
    params = EnvParams()
    out = step(state, PdCommand.zero(model), params, model, Circle(0.03))
    assert out.obj_vel[1] == pytest.approx(-9.81 / 30.0, abs=1e-6)
    assert out.obj_vel[0] == pytest.approx(0.0, abs=1e-12)


def test_step_zero_gravity_fixed_point(model):
    params = EnvParams(gravity=0.0)
    state = rest_state(model, wrist=(0.0, 0.5, 0.0), obj=(0.3, 0.2, 0.0))
    out = step(state, PdCommand.zero(model), params, model, Circle(0.03))
    assert np.max(np.abs(out.wrist_pose - state.wrist_pose)) < 1e-9
    assert np.max(np.abs(out.joint_rot - state.joint_rot)) < 1e-9
    assert np.max(np.abs(out.obj_pose - state.obj_pose)) < 1e-9


def test_step_resting_penetration_below_offset(model):
    # object dropped onto the static palm link: steady-state penetration
    # must stay under the contact offset (static equilibrium m g / k_n)
    params = EnvParams()
    shape = Circle(0.03)
    sim = BatchSim(model, params, [shape])
    sim.reset_env(0, np.array([0.0, 0.10, 0.0]), np.zeros(model.n_joints),
                  np.array([0.0, 0.10 + 0.012 + 0.03 + 0.001, 0.0]))
    cmd = np.zeros((1, model.action_dim))
    for _ in range(60):
        sim.step(cmd)
    state = sim.get_state(0)
    # settled in contact on the palm
    assert state.contact[0]
    assert abs(state.obj_vel[1]) < 5e-3
    pen = sim.max_penetration
    assert pen <= params.contact_offset


def test_step_rejects_bad_command_shape(model):
    sim = BatchSim(model, EnvParams(), [Circle(0.03)])
    with pytest.raises(ValueError):
        sim.step(np.zeros((1, 99)))


# -- nearest_surface_vectors ---------------------------------------------------


def test_nearest_surface_vectors_radial(model):
    state = rest_state(model)
    state.joint_pos[model.key_joints[0]] = [0.0, 2.0]
    state.joint_pos[model.key_joints[1]] = [3.0, 4.0]
    state.obj_pose = np.array([0.0, 0.0, 0.0])
    vec, sd = nearest_surface_vectors(state, model, Circle(1.0))
    assert np.allclose(vec[0], [0.0, -1.0])
    assert sd[0] == pytest.approx(1.0)
    assert np.allclose(vec[1], [-2.4, -3.2])
    assert sd[1] == pytest.approx(4.0)


def test_nearest_surface_vectors_center_tiebreak(model):
    state = rest_state(model)
    state.joint_pos[model.key_joints[0]] = [0.0, 0.0]
    state.obj_pose = np.array([0.0, 0.0, 0.0])
    vec, sd = nearest_surface_vectors(state, model, Circle(1.0))
    assert np.allclose(vec[0], [1.0, 0.0])
    assert sd[0] == pytest.approx(-1.0)


# -- contact_flags --------------------------------------------------------------


def test_contact_flags_separated_all_false(model):
    state = rest_state(model, wrist=(0.0, 0.5, 0.0), obj=(0.4, 0.03, 0.0))
    out = step(state, PdCommand.zero(model), EnvParams(), model, Circle(0.03))
    assert not contact_flags(out, model).any()


def test_contact_flags_object_resting_on_link(model):
    params = EnvParams()
    sim = BatchSim(model, params, [Circle(0.03)])
    sim.reset_env(0, np.array([0.0, 0.10, 0.0]), np.zeros(model.n_joints),
                  np.array([0.0, 0.10 + 0.012 + 0.03 + 0.001, 0.0]))
    cmd = np.zeros((1, model.action_dim))
    for _ in range(30):
        sim.step(cmd)
    flags = sim.get_state(0).contact
    assert flags[0]            # the palm carries the object
    assert not flags[2] and not flags[4]   # distal links untouched


def test_contact_flags_grazing_zero_force(model):
    # exact touch without penetration: no normal force, no flag
    state = rest_state(model, wrist=(0.0, 0.5, 0.0), obj=(0.0, 0.5 - 0.012 - 0.03, 0.0))
    params = EnvParams(gravity=0.0)
    out = step(state, PdCommand.zero(model), params, model, Circle(0.03))
    assert not out.contact.any()


# -- randomize -------------------------------------------------------------------


def test_randomize_degenerate_range():
    p = EnvParams(randomization={
        "friction_scale": [0.9, 0.9], "restitution_scale": [1.0, 1.0],
        "density_scale": [1.0, 1.0], "shape_scale": [1.0, 1.0],
        "point_noise": [0.0, 0.0]})
    out = randomize(p, np.random.default_rng(0))
    assert out.friction == pytest.approx(0.9 * p.friction)


def test_randomize_friction_bounds():
    p = EnvParams()
    rng = np.random.default_rng(7)
    draws = np.array([randomize(p, rng).friction for _ in range(10_000)])
    assert draws.min() >= 0.7 * p.friction - 1e-12
    assert draws.max() <= 1.1 * p.friction + 1e-12
    # well spread across the range
    assert draws.min() < 0.72 * p.friction and draws.max() > 1.08 * p.friction


def test_randomize_deterministic():
    p = EnvParams()
    a = randomize(p, np.random.default_rng(123))
    b = randomize(p, np.random.default_rng(123))
    assert a == b


# -- raycast_depth -----------------------------------------------------------------


def test_raycast_empty_scene(model):
    state = rest_state(model)
    pts = raycast_depth(state, model, None, Pose2(0.0, 1.0, -np.pi / 2), 1.0, 32)
    assert pts.shape == (0, 2)


def test_raycast_camera_facing_arc(model):
    # camera above looking down at a circle, hand far away
    state = rest_state(model, wrist=(5.0, 5.0, 0.0), obj=(0.0, 0.0, 0.0))
    pts = raycast_depth(state, model, Circle(0.5), Pose2(0.0, 3.0, -np.pi / 2), 0.8, 64)
    assert len(pts) > 10
    assert np.all(pts[:, 1] > 0.0)          # only the camera-facing arc
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-9)


def test_raycast_occlusion_by_hand(model):
    # palm link directly between camera and the object blocks everything
    state = rest_state(model, wrist=(0.0, 1.5, 0.0), obj=(0.0, 0.0, 0.0))
    pts = raycast_depth(state, model, Circle(0.1), Pose2(0.0, 3.0, -np.pi / 2),
                        0.06, 16, params=EnvParams())
    assert pts.shape == (0, 2)


def test_raycast_noise_amplitude(model):
    state = rest_state(model, wrist=(5.0, 5.0, 0.0), obj=(0.0, 0.0, 0.0))
    params = EnvParams(point_noise=0.01)
    rng = np.random.default_rng(0)
    pts = raycast_depth(state, model, Circle(0.5), Pose2(0.0, 3.0, -np.pi / 2),
                        0.8, 64, rng=rng, params=params)
    err = np.abs(np.linalg.norm(pts, axis=1) - 0.5)
    assert np.max(err) <= 0.01 * np.sqrt(2) + 1e-12
    assert np.max(err) > 0.0


# -- invariants ---------------------------------------------------------------------


def test_momentum_conservation_free_object(model):
    params = EnvParams(gravity=0.0, friction=0.0)
    sim = BatchSim(model, params, [Circle(0.03)])
    sim.reset_env(0, np.array([0.0, 2.0, 0.0]), np.zeros(model.n_joints),
                  np.array([-1.0, 1.0, 0.0]), obj_vel=np.array([0.013, 0.007, 0.11]))
    cmd = np.zeros((1, model.action_dim))
    p0 = sim.obj_mass[0] * sim.objd[0, :2].copy()
    for _ in range(1000):
        sim.step(cmd)
    p1 = sim.obj_mass[0] * sim.objd[0, :2]
    assert np.max(np.abs(p1 - p0)) < 1e-8


def test_step_determinism_bit_identical(model):
    def run():
        params = EnvParams()
        sim = BatchSim(model, params, [Circle(0.03), make_box(0.05, 0.05)])
        sim.reset_env(0, np.array([0.0, 0.12, 0.0]), np.zeros(model.n_joints),
                      np.array([0.0, 0.03, 0.0]))
        sim.reset_env(1, np.array([0.1, 0.12, 0.1]), np.zeros(model.n_joints),
                      np.array([0.1, 0.025, 0.0]))
        rng = np.random.default_rng(42)
        traj = []
        for k in range(40):
            cmd = rng.uniform(-1, 1, size=(2, model.action_dim)) * 0.02
            sim.step(cmd)
            traj.append((sim.wrist.copy(), sim.q.copy(), sim.obj.copy(), sim.objd.copy()))
        return traj

    t1, t2 = run(), run()
    for (w1, q1, o1, v1), (w2, q2, o2, v2) in zip(t1, t2):
        assert np.array_equal(w1, w2) and np.array_equal(q1, q2)
        assert np.array_equal(o1, o2) and np.array_equal(v1, v2)


def test_state_round_trip_bit_identical(model):
    sim = BatchSim(model, EnvParams(), [Circle(0.03)])
    sim.reset_env(0, np.array([0.02, 0.11, 0.05]), np.full(model.n_joints, 0.2),
                  np.array([0.0, 0.03, 0.1]))
    sim.step(np.full((1, model.action_dim), 0.05))
    s = sim.get_state(0)
    sim2 = BatchSim(model, EnvParams(), [Circle(0.03)])
    sim2.set_state(0, s)
    assert sim2.get_state(0).allclose(s)


def test_backends_agree(model):
    # the JIT kernel and the numpy reference implement one force model;
    # trajectories must track each other closely through contact
    c, box = Circle(0.03), make_box(0.05, 0.05)
    shapes = [c, box, c, box]

    def build(backend):
        sim = BatchSim(model, EnvParams(), shapes, backend=backend)
        for i in range(4):
            sim.reset_env(i, np.array([0.01 * i, 0.12, 0.0]), np.zeros(model.n_joints),
                          np.array([0.0, 0.03, 0.0]))
        return sim

    sa, sb = build("numba"), build("numpy")
    if sa.backend != "numba":
        pytest.skip("numba unavailable")
    cmd = np.zeros((4, model.action_dim))
    cmd[:, 3] = 0.4
    cmd[:, 4] = -0.4
    for _ in range(30):
        sa.step(cmd)
        sb.step(cmd)
    assert np.max(np.abs(sa.obj - sb.obj)) < 1e-4
    assert np.max(np.abs(sa.wrist - sb.wrist)) < 1e-4
    assert np.array_equal(sa.flags, sb.flags)


def test_robot_model_json_round_trip(model):
    doc = model.to_json()
    back = RobotModel.from_json(doc)
    assert back.to_json() == doc
    with pytest.raises(ModelError):
        RobotModel.from_json({**doc, "schema_version": 99})


def test_env_params_json_round_trip():
    p = EnvParams()
    back = EnvParams.from_json(p.to_json())
    assert back == p
    with pytest.raises(ModelError):
        EnvParams.from_json({**p.to_json(), "bogus_key": 1})
    with pytest.raises(ModelError):
        EnvParams(control_timestep=0.017)
