"""Tracking reward: kinematic/dynamic state matching, energy regularization,
and distance-modulated weighting.

Matching components are exp(-lambda * squared error) over the key-joint
mapping, each in (0, 1]. The kinematic hand weights are pre-multiplied by a
weight w(D) in [0, 1] proportional to the reference hand-object distance, so
tracking pressure relaxes near contact; the energy multiplier grows as
(1 - w(D)) so motions stay smooth exactly where tracking is relaxed. Both
are deterministic functions of the clip alone (stationary from the policy's
perspective); a rollout-distance variant is selectable for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .demos import KeyJointMap, ReferenceClip, project_keyjoints
from .geom import wrap_angle
from .model import RobotModel, SimState


@dataclass
class RewardWeights:
    lam_joint_pos: float = 50.0     # 1/m^2, hand key-joint positions
    lam_joint_rot: float = 2.0      # 1/rad^2
    lam_obj_pos: float = 100.0      # 1/m^2
    lam_obj_rot: float = 2.0        # 1/rad^2
    lam_dist: float = 100.0         # 1/m^2
    lam_contact: float = 0.5
    mix: np.ndarray = field(default_factory=lambda: np.full(6, 1.0 / 6.0))
    w_dact: float = 0.05            # penalty on consecutive PD-target changes
    w_acc: float = 1e-4
    w_vel: float = 1e-3
    w_energy0: float = 0.1          # baseline energy weight
    d0: float = 0.20                # m, distance scale of w(D)
    distance_weight_source: str = "reference"   # or "rollout"
    use_distance_weight: bool = True

    def __post_init__(self):
        self.mix = np.asarray(self.mix, dtype=np.float64)
        if self.mix.shape != (6,) or np.any(self.mix < 0):
            raise ValueError("mix must be 6 nonnegative coefficients")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.distance_weight_source not in ("reference", "rollout"):
            raise ValueError("distance_weight_source must be 'reference' or 'rollout'")

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["mix"] = self.mix.tolist()
        return d

    @staticmethod
    def from_json(doc: dict) -> "RewardWeights":
        known = set(RewardWeights.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown RewardWeights fields: {sorted(extra)}")
        return RewardWeights(**doc)


@dataclass
class RewardBreakdown:
    r_joint_pos: float
    r_joint_rot: float
    r_obj_pos: float
    r_obj_rot: float
    r_dist: float
    r_contact: float
    r_energy: float
    w_dist: float
    total: float

    def components(self) -> np.ndarray:
        return np.array([self.r_joint_pos, self.r_joint_rot, self.r_obj_pos,
                         self.r_obj_rot, self.r_dist, self.r_contact])


def distance_weight(d, d0: float):
    """w(D) = clamp(d / d0, 0, 1); negative (penetrating) distances give 0."""
    if d0 <= 0:
        raise ValueError("d0 must be positive")
    return np.clip(np.asarray(d, dtype=np.float64) / d0, 0.0, 1.0)


def reference_distance_weight(clip: ReferenceClip, t, kmap: KeyJointMap,
                              d0: float):
    """w(D) from the mean signed key-joint distance of the reference frame;
    a function of the clip alone, keeping the reward stationary."""
    d = np.mean(clip.d_sig[t][..., kmap.demo_fingers], axis=-1)
    return distance_weight(d, d0)


def energy_multiplier(w_dist, weights: RewardWeights):
    """Energy scale w_E0 + (1 - w(D)): strongest near contact."""
    return weights.w_energy0 + (1.0 - np.asarray(w_dist, dtype=np.float64))


# ---------------------------------------------------------------------------
# batched cores (leading dims broadcast); the SimState API wraps these


def match_rewards_arrays(robot_pos, robot_rot, robot_d, robot_c,
                         obj_pose, ref_pos, ref_rot, ref_d, ref_c, ref_obj,
                         w_dist, weights: RewardWeights):
    """Matching components from pre-projected features.

    robot_pos/ref_pos: (..., n, 2); robot_rot/ref_rot: (..., n);
    robot_d/ref_d: (..., n, 2); robot_c/ref_c: (..., n) floats;
    obj_pose/ref_obj: (..., 3); w_dist: (...,).
    Returns six arrays shaped (...,).
    """
    w = np.asarray(w_dist, dtype=np.float64) if weights.use_distance_weight else 1.0
    e_jp = np.sum((ref_pos - robot_pos) ** 2, axis=(-2, -1))
    e_jr = np.sum(wrap_angle(ref_rot - robot_rot) ** 2, axis=-1)
    e_op = np.sum((ref_obj[..., :2] - obj_pose[..., :2]) ** 2, axis=-1)
    e_or = wrap_angle(ref_obj[..., 2] - obj_pose[..., 2]) ** 2
    e_d = np.sum((ref_d - robot_d) ** 2, axis=(-2, -1))
    e_c = np.mean((ref_c - robot_c) ** 2, axis=-1)
    return (
        np.exp(-weights.lam_joint_pos * w * e_jp),
        np.exp(-weights.lam_joint_rot * w * e_jr),
        np.exp(-weights.lam_obj_pos * e_op),
        np.exp(-weights.lam_obj_rot * e_or),
        np.exp(-weights.lam_dist * e_d),
        np.exp(-weights.lam_contact * e_c),
    )


def energy_penalty_arrays(cmd, cmd_prev, joint_vel, joint_acc, w_dist,
                          weights: RewardWeights):
    """-(w_E0 + (1 - w(D))) * (w_dact |dcmd|^2 + w_acc |acc|^2 + w_vel |vel|^2)."""
    w = np.asarray(w_dist, dtype=np.float64) if weights.use_distance_weight else 1.0
    term = (weights.w_dact * np.sum((cmd - cmd_prev) ** 2, axis=-1)
            + weights.w_acc * np.sum(joint_acc ** 2, axis=-1)
            + weights.w_vel * np.sum(joint_vel ** 2, axis=-1))
    return -energy_multiplier(w, weights) * term


def total_reward_arrays(components, r_energy, mix):
    """Weighted component sum plus the energy term."""
    comp = np.stack(components, axis=-1)
    return comp @ np.asarray(mix, dtype=np.float64) + r_energy


# ---------------------------------------------------------------------------
# per-state API


def match_rewards(state: SimState, clip: ReferenceClip, t: int,
                  kmap: KeyJointMap, weights: RewardWeights,
                  model: RobotModel):
    """Six matching components for frame t; kinematic hand weights are
    pre-multiplied by w(D) per the configured distance source."""
    robot = project_keyjoints(kmap, state, model=model)
    demo = project_keyjoints(kmap, clip, t=t)
    if weights.distance_weight_source == "reference":
        w = reference_distance_weight(clip, t, kmap, weights.d0)
    else:
        w = distance_weight(np.mean(state.d_sig), weights.d0)
    comps = match_rewards_arrays(
        robot["pos"], robot["rot"], robot["d_vec"], robot["contact"],
        state.obj_pose, demo["pos"], demo["rot"], demo["d_vec"], demo["contact"],
        clip.obj[t], w, weights,
    )
    return tuple(float(c) for c in comps)


def energy_penalty(cmd, cmd_prev, joint_vel, joint_acc, weights: RewardWeights,
                   w_dist) -> float:
    cmd = np.asarray(cmd, dtype=np.float64)
    cmd_prev = np.asarray(cmd_prev, dtype=np.float64)
    if cmd.shape != cmd_prev.shape:
        raise ValueError("command vectors must share a shape")
    return float(energy_penalty_arrays(cmd, cmd_prev, np.asarray(joint_vel),
                                       np.asarray(joint_acc), w_dist, weights))


def total_reward(components, mix, r_energy: float = 0.0) -> float:
    comp = np.asarray(components, dtype=np.float64)
    mix = np.asarray(mix, dtype=np.float64)
    if np.any(mix < 0):
        raise ValueError("mixing coefficients must be nonnegative")
    return float(comp @ mix + r_energy)


def breakdown(state: SimState, clip: ReferenceClip, t: int, kmap: KeyJointMap,
              weights: RewardWeights, model: RobotModel, cmd=None, cmd_prev=None,
              joint_vel=None, joint_acc=None) -> RewardBreakdown:
    """Full reward evaluation for one state against its reference frame."""
    comps = match_rewards(state, clip, t, kmap, weights, model)
    if weights.distance_weight_source == "reference":
        w = float(reference_distance_weight(clip, t, kmap, weights.d0))
    else:
        w = float(distance_weight(np.mean(state.d_sig), weights.d0))
    if cmd is None:
        r_energy = 0.0
    else:
        r_energy = energy_penalty(cmd, cmd_prev, joint_vel, joint_acc, weights, w)
    return RewardBreakdown(
        *comps, r_energy=r_energy, w_dist=w,
        total=total_reward(comps, weights.mix, r_energy),
    )
