"""Robot and environment data model: articulated planar hand, simulator
parameters, PD commands, and full simulator state snapshots.

The default robot is a floating 3-DoF wrist carrying a palm and two
2-link fingers; each finger's distal joint mimics its proximal driver.
The demonstrator skeleton (demos module) intentionally has more finger
DoFs than this robot, so retargeting is lossy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

ROBOT_SCHEMA_VERSION = 1
ENV_SCHEMA_VERSION = 1


class ModelError(ValueError):
    """Invalid robot/environment description."""


@dataclass
class RobotModel:
    """Planar articulated hand: capsule links on a kinematic tree rooted at
    a floating wrist.

    Arrays are indexed by link; link 0 is the palm (parent -1, pinned to the
    wrist frame). Every non-root link rotates about a revolute joint placed
    at `joint_origin` in its parent's frame. `keypoints` are named points
    (link index + local offset) whose world positions form J^h; `key_joints`
    select the fingertip keypoints used by the demonstrator mapping.
    """

    link_names: list[str]
    parent: np.ndarray            # (L,) int, -1 for the palm
    joint_origin: np.ndarray      # (L, 2) joint position in parent frame
    link_seg: np.ndarray          # (L, 2, 2) capsule endpoints, link frame
    link_radius: np.ndarray       # (L,)
    link_mass: np.ndarray         # (L,)
    actuated: list[int]           # joint indices (== link indices, root excluded)
    mimic: dict[int, list[tuple[int, float]]]  # driver joint -> [(mimic joint, coeff)]
    keypoint_names: list[str]
    keypoint_link: np.ndarray     # (K,) int
    keypoint_offset: np.ndarray   # (K, 2)
    key_joints: list[int]         # keypoint ids (fingertips)
    kp_lin: float = 100.0         # N/m, wrist translation   (PD defaults 100/10)
    kd_lin: float = 10.0          # N s/m
    kp_ang: float = 100.0         # N m/rad, wrist rotation + finger joints
    kd_ang: float = 10.0          # N m s/rad
    effort_lin: float = 60.0      # N, wrist force clamp
    effort_ang: float = 15.0      # N m, wrist torque clamp
    effort_finger: float = 8.0    # N m, finger torque clamp
    joint_inertia: np.ndarray = None  # (L,) effective inertia per joint DoF
    wrist_inertia: float = 2e-3   # kg m^2, rotational

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.joint_origin = np.asarray(self.joint_origin, dtype=np.float64)
        self.link_seg = np.asarray(self.link_seg, dtype=np.float64)
        self.link_radius = np.asarray(self.link_radius, dtype=np.float64)
        self.link_mass = np.asarray(self.link_mass, dtype=np.float64)
        self.keypoint_link = np.asarray(self.keypoint_link, dtype=np.int64)
        self.keypoint_offset = np.asarray(self.keypoint_offset, dtype=np.float64)
        L = len(self.link_names)
        if self.parent[0] != -1 or np.any(self.parent[1:] >= np.arange(1, L)):
            raise ModelError("links must be topologically ordered with palm first")
        joints = set(range(1, L))
        for j in self.actuated:
            if j not in joints:
                raise ModelError(f"actuated joint {j} not a joint index")
        mimicked = set()
        for driver, pairs in self.mimic.items():
            if driver not in self.actuated:
                raise ModelError(f"mimic driver {driver} is not an actuated joint")
            for m, coeff in pairs:
                if m not in joints or m in self.actuated:
                    raise ModelError(f"mimic joint {m} invalid or actuated")
                if not np.isfinite(coeff):
                    raise ModelError("mimic coupling coefficient must be finite")
                mimicked.add(m)
        free = joints - set(self.actuated) - mimicked
        if free:
            raise ModelError(f"joints {sorted(free)} neither actuated nor mimicked")
        for k in self.key_joints:
            if not 0 <= k < len(self.keypoint_names):
                raise ModelError(f"key joint id {k} out of range")
        if self.joint_inertia is None:
            # link inertia about its joint plus a reflected-actuator floor
            seg_len = np.linalg.norm(self.link_seg[:, 1] - self.link_seg[:, 0], axis=-1)
            self.joint_inertia = np.maximum(self.link_mass * seg_len**2 / 3.0, 1.5e-3)
        else:
            self.joint_inertia = np.asarray(self.joint_inertia, dtype=np.float64)

    @property
    def n_links(self) -> int:
        return len(self.link_names)

    @property
    def n_joints(self) -> int:
        return self.n_links - 1

    @property
    def n_actuated(self) -> int:
        return len(self.actuated)

    @property
    def action_dim(self) -> int:
        return 3 + self.n_actuated

    @property
    def wrist_mass(self) -> float:
        return float(np.sum(self.link_mass))

    def mimic_matrix(self) -> np.ndarray:
        """(n_joints, n_actuated) matrix mapping actuated targets to full
        per-joint targets; actuated joints pass through, mimics scale their
        driver's target by the coupling coefficient."""
        m = np.zeros((self.n_joints, self.n_actuated))
        for col, j in enumerate(self.actuated):
            m[j - 1, col] = 1.0
            for mim, coeff in self.mimic.get(j, []):
                m[mim - 1, col] = coeff
        return m

    def ancestor_joints(self, link: int) -> list[int]:
        """Joint (= link) indices on the chain from the palm to `link`."""
        chain = []
        while link > 0:
            chain.append(link)
            link = int(self.parent[link])
        return chain[::-1]

    def to_json(self) -> dict:
        return {
            "schema_version": ROBOT_SCHEMA_VERSION,
            "link_names": self.link_names,
            "parent": self.parent.tolist(),
            "joint_origin": self.joint_origin.tolist(),
            "link_seg": self.link_seg.tolist(),
            "link_radius": self.link_radius.tolist(),
            "link_mass": self.link_mass.tolist(),
            "actuated": list(self.actuated),
            "mimic": {str(k): [[m, c] for m, c in v] for k, v in self.mimic.items()},
            "keypoint_names": self.keypoint_names,
            "keypoint_link": self.keypoint_link.tolist(),
            "keypoint_offset": self.keypoint_offset.tolist(),
            "key_joints": list(self.key_joints),
            "gains": {"kp_lin": self.kp_lin, "kd_lin": self.kd_lin,
                      "kp_ang": self.kp_ang, "kd_ang": self.kd_ang},
            "effort": {"lin": self.effort_lin, "ang": self.effort_ang,
                       "finger": self.effort_finger},
            "joint_inertia": self.joint_inertia.tolist(),
            "wrist_inertia": self.wrist_inertia,
        }

    @staticmethod
    def from_json(doc: dict) -> "RobotModel":
        if doc.get("schema_version") != ROBOT_SCHEMA_VERSION:
            raise ModelError(f"unsupported robot schema version {doc.get('schema_version')!r}")
        gains = doc["gains"]
        effort = doc["effort"]
        return RobotModel(
            link_names=list(doc["link_names"]),
            parent=doc["parent"],
            joint_origin=doc["joint_origin"],
            link_seg=doc["link_seg"],
            link_radius=doc["link_radius"],
            link_mass=doc["link_mass"],
            actuated=[int(a) for a in doc["actuated"]],
            mimic={int(k): [(int(m), float(c)) for m, c in v] for k, v in doc["mimic"].items()},
            keypoint_names=list(doc["keypoint_names"]),
            keypoint_link=doc["keypoint_link"],
            keypoint_offset=doc["keypoint_offset"],
            key_joints=[int(k) for k in doc["key_joints"]],
            kp_lin=float(gains["kp_lin"]), kd_lin=float(gains["kd_lin"]),
            kp_ang=float(gains["kp_ang"]), kd_ang=float(gains["kd_ang"]),
            effort_lin=float(effort["lin"]), effort_ang=float(effort["ang"]),
            effort_finger=float(effort["finger"]),
            joint_inertia=doc["joint_inertia"],
            wrist_inertia=float(doc["wrist_inertia"]),
        )


def default_robot() -> RobotModel:
    """Two-finger planar gripper: palm capsule plus 2x2 finger links, one
    distal mimic per finger (coefficient 1.0), fingertips as key joints."""
    prox_len, dist_len = 0.05, 0.04
    mount = 0.05
    return RobotModel(
        link_names=["palm", "l_prox", "l_dist", "r_prox", "r_dist"],
        parent=[-1, 0, 1, 0, 3],
        joint_origin=[[0.0, 0.0], [-mount, 0.0], [0.0, -prox_len], [mount, 0.0], [0.0, -prox_len]],
        link_seg=[
            [[-mount, 0.0], [mount, 0.0]],
            [[0.0, 0.0], [0.0, -prox_len]],
            [[0.0, 0.0], [0.0, -dist_len]],
            [[0.0, 0.0], [0.0, -prox_len]],
            [[0.0, 0.0], [0.0, -dist_len]],
        ],
        link_radius=[0.012, 0.008, 0.006, 0.008, 0.006],
        link_mass=[0.10, 0.02, 0.02, 0.02, 0.02],
        actuated=[1, 3],
        mimic={1: [(2, 1.0)], 3: [(4, 1.0)]},
        keypoint_names=["wrist", "l_base", "l_mid", "l_tip", "r_base", "r_mid", "r_tip"],
        keypoint_link=[0, 0, 1, 2, 0, 3, 4],
        keypoint_offset=[
            [0.0, 0.0],
            [-mount, 0.0],
            [0.0, -prox_len],
            [0.0, -dist_len],
            [mount, 0.0],
            [0.0, -prox_len],
            [0.0, -dist_len],
        ],
        key_joints=[3, 6],
    )


@dataclass
class EnvParams:
    """Simulator parameters; Table-A defaults, Table-B randomization ranges."""

    gravity: float = 9.81
    sim_timestep: float = 1.0 / 60.0
    control_timestep: float = 1.0 / 30.0
    physics_substeps: int = 8
    friction: float = 0.9
    restitution: float = 0.7
    density: float = 50.0
    contact_offset: float = 0.02
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    shape_scale: float = 1.0
    point_noise: float = 0.005
    table_y: float = 0.0
    randomization: dict = field(default_factory=lambda: {
        "friction_scale": [0.7, 1.1],
        "restitution_scale": [0.7, 1.1],
        "density_scale": [0.5, 2.0],
        "shape_scale": [0.512, 1.0],
        "point_noise": [0.0, 0.01],
    })

    def __post_init__(self):
        ratio = self.control_timestep / self.sim_timestep
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ModelError("control_timestep must be an integer multiple of sim_timestep")
        if self.physics_substeps < 1:
            raise ModelError("physics_substeps must be >= 1")
        if self.friction < 0 or self.restitution < 0:
            raise ModelError("friction and restitution must be >= 0")
        for name, (lo, hi) in self.randomization.items():
            if lo > hi:
                raise ModelError(f"randomization range for {name} has low > high")

    @property
    def sim_steps_per_control(self) -> int:
        return int(round(self.control_timestep / self.sim_timestep))

    def to_json(self) -> dict:
        return {
            "schema_version": ENV_SCHEMA_VERSION,
            "gravity": self.gravity,
            "sim_timestep": self.sim_timestep,
            "control_timestep": self.control_timestep,
            "physics_substeps": self.physics_substeps,
            "friction": self.friction,
            "restitution": self.restitution,
            "density": self.density,
            "contact_offset": self.contact_offset,
            "contact_stiffness": self.contact_stiffness,
            "contact_damping": self.contact_damping,
            "shape_scale": self.shape_scale,
            "point_noise": self.point_noise,
            "table_y": self.table_y,
            "randomization": self.randomization,
        }

    @staticmethod
    def from_json(doc: dict) -> "EnvParams":
        if doc.get("schema_version") != ENV_SCHEMA_VERSION:
            raise ModelError(f"unsupported env schema version {doc.get('schema_version')!r}")
        known = {f for f in EnvParams.__dataclass_fields__}
        extra = set(doc) - known - {"schema_version"}
        if extra:
            raise ModelError(f"unknown EnvParams fields: {sorted(extra)}")
        kwargs = {k: doc[k] for k in doc if k != "schema_version"}
        return EnvParams(**kwargs)


@dataclass
class PdCommand:
    """One control-step command: wrist residual offset plus absolute
    actuated finger joint targets."""

    wrist_offset: np.ndarray   # (3,) dx, dy, dtheta
    finger_targets: np.ndarray  # (n_actuated,) rad

    def __post_init__(self):
        self.wrist_offset = np.asarray(self.wrist_offset, dtype=np.float64)
        self.finger_targets = np.asarray(self.finger_targets, dtype=np.float64)
        if self.wrist_offset.shape != (3,):
            raise ModelError("wrist_offset must have shape (3,)")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.wrist_offset, self.finger_targets])

    @staticmethod
    def zero(model: RobotModel) -> "PdCommand":
        return PdCommand(np.zeros(3), np.zeros(model.n_actuated))


@dataclass
class SimState:
    """Full simulator state snapshot for one environment.

    `friction_anchors`/`anchor_active` are the grip-contact memory (hand
    link <-> object tangential anchors); they make states Markov so cached
    and restored states reproduce bit-identically.
    """

    wrist_pose: np.ndarray     # (3,)
    wrist_vel: np.ndarray      # (3,)
    joint_rot: np.ndarray      # (J,) wrapped finger joint angles
    joint_vel: np.ndarray      # (J,)
    joint_pos: np.ndarray      # (K, 2) keypoint world positions
    joint_lin_vel: np.ndarray  # (K, 2)
    joint_ang_vel: np.ndarray  # (K,) carrying-link angular velocity
    obj_pose: np.ndarray       # (3,)
    obj_vel: np.ndarray        # (3,)
    d_vec: np.ndarray          # (n_key, 2) joint -> nearest object surface
    d_sig: np.ndarray          # (n_key,) signed distance (negative inside)
    contact: np.ndarray        # (L,) bool, force-based per hand link
    t: int = 0
    friction_anchors: np.ndarray = None  # (L, 2, 2) anchor pts (obj frame, link frame)
    anchor_active: np.ndarray = None     # (L,) bool

    def __post_init__(self):
        for name in ("wrist_pose", "wrist_vel", "joint_rot", "joint_vel", "joint_pos",
                     "joint_lin_vel", "joint_ang_vel", "obj_pose", "obj_vel",
                     "d_vec", "d_sig"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.contact = np.asarray(self.contact, dtype=bool)
        n_links = self.contact.shape[0]
        if self.friction_anchors is None:
            self.friction_anchors = np.zeros((n_links, 2, 2))
        else:
            self.friction_anchors = np.asarray(self.friction_anchors, dtype=np.float64)
        if self.anchor_active is None:
            self.anchor_active = np.zeros(n_links, dtype=bool)
        else:
            self.anchor_active = np.asarray(self.anchor_active, dtype=bool)

    def copy(self) -> "SimState":
        return SimState(**{
            k: (v.copy() if isinstance(v, np.ndarray) else v)
            for k, v in self.__dict__.items()
        })

    def allclose(self, other: "SimState", tol: float = 0.0) -> bool:
        for k, v in self.__dict__.items():
            w = getattr(other, k)
            if isinstance(v, np.ndarray):
                if v.dtype == bool:
                    if not np.array_equal(v, w):
                        return False
                elif tol == 0.0:
                    if not np.array_equal(v, w):
                        return False
                elif not np.allclose(v, w, atol=tol, rtol=0):
                    return False
            elif v != w:
                return False
        return True
