"""Batched observation and reward assembly over a demonstration corpus.

Clips are stacked into flat per-frame arrays indexed by (clip id, frame);
feature extraction gathers reference rows for the goal horizon, projects
the robot's key joints, and canonicalizes every continuous quantity in the
wrist frame. The per-state functions in `demos`/`reward` define the
semantics; these vectorized twins are cross-checked against them in tests.
"""

from __future__ import annotations

import numpy as np

from .demos import DEFAULT_HORIZON_SET, KeyJointMap, ReferenceClip, TIP_IDS
from .geom import wrap_angle
from .model import RobotModel
from .reward import RewardWeights, energy_multiplier, match_rewards_arrays, \
    energy_penalty_arrays, total_reward_arrays
from .sim import BatchSim

# obs scaling constants: keep inputs O(1) at desk scale
POS_SCALE = 5.0
VEL_SCALE = 0.5


class CorpusArrays:
    """Stacked per-frame reference arrays for a list of clips."""

    def __init__(self, clips: list[ReferenceClip], kmap: KeyJointMap,
                 weights: RewardWeights):
        self.clips = clips
        self.kmap = kmap
        self.n_clips = len(clips)
        lens = np.array([len(c) for c in clips], dtype=np.int64)
        self.lengths = lens
        self.offsets = np.concatenate([[0], np.cumsum(lens)[:-1]])
        self.grasp_onset = np.array([c.grasp_onset for c in clips], dtype=np.int64)
        fingers = kmap.demo_fingers
        tips = [TIP_IDS[f] for f in fingers]

        self.wrist = np.concatenate([c.wrist for c in clips])                  # (F, 3)
        self.tip_pos = np.concatenate([c.joint_pos[:, tips] for c in clips])   # (F, n, 2)
        self.tip_rot = np.concatenate([c.tip_rotations()[:, fingers] for c in clips])
        self.obj = np.concatenate([c.obj for c in clips])                      # (F, 3)
        self.d_vec = np.concatenate([c.d_vec[:, fingers] for c in clips])      # (F, n, 2)
        self.d_sig = np.concatenate([c.d_sig[:, fingers] for c in clips])      # (F, n)
        self.c_ref = np.concatenate([c.c_flags[:, fingers] for c in clips]).astype(np.float64)
        # stationary distance weight and energy multiplier per frame
        mean_d = np.mean(self.d_sig, axis=1)
        self.w_dist = np.clip(mean_d / weights.d0, 0.0, 1.0)
        self.energy_mult = energy_multiplier(self.w_dist, weights)

    def gidx(self, clip_id, t):
        """Global frame index with end-clamping."""
        t = np.minimum(t, self.lengths[clip_id] - 1)
        return self.offsets[clip_id] + t


class FeatureExtractor:
    """Observation, goal-feature, and reward arrays for a BatchSim batch."""

    def __init__(self, model: RobotModel, corpus: CorpusArrays,
                 weights: RewardWeights, ks=DEFAULT_HORIZON_SET):
        self.model = model
        self.corpus = corpus
        self.weights = weights
        self.ks = tuple(ks)
        self.n_key = len(corpus.kmap)
        self.key_links = [int(model.keypoint_link[k]) for k in corpus.kmap.robot_ids]
        self.key_ids = list(corpus.kmap.robot_ids)
        n = self.n_key
        self.state_dim = 4 + 3 + 2 * model.n_joints + 2 * len(model.keypoint_names) \
            + 7 + 3 * n + model.n_links
        self.goal_dim = len(self.ks) * (n + 2 * n + 1 + 2 + 2 * n + n + 3 + 2 * n + n + 3)
        self.obs_dim = self.state_dim + self.goal_dim

    # -- robot-side projected features ---------------------------------------

    def robot_proj(self, sim: BatchSim):
        kp = sim.keypoint_pos                       # (E, K, 2)
        tip_pos = kp[:, self.key_ids]               # (E, n, 2)
        tip_rot = wrap_angle(sim.link_ang[:, self.key_links])
        c_proj = sim.flags[:, self.key_links].astype(np.float64)
        return kp, tip_pos, tip_rot, c_proj

    # -- observation ----------------------------------------------------------

    def observations(self, sim: BatchSim, clip_id: np.ndarray, t: np.ndarray) -> np.ndarray:
        E = sim.E
        co = self.corpus
        kp, tip_pos, tip_rot, c_proj = self.robot_proj(sim)
        th = sim.wrist[:, 2]
        cth, sth = np.cos(th), np.sin(th)

        def rot_inv_v(v):
            return np.stack([cth[:, None] * v[..., 0] + sth[:, None] * v[..., 1],
                             -sth[:, None] * v[..., 0] + cth[:, None] * v[..., 1]], axis=-1)

        def to_wrist(p):
            return rot_inv_v(p - sim.wrist[:, None, :2])

        parts = [
            sim.wrist[:, :2] * POS_SCALE, cth[:, None], sth[:, None],
            rot_inv_v(sim.wristd[:, None, :2])[:, 0] * VEL_SCALE,
            sim.wristd[:, 2:3] * VEL_SCALE,
            sim.q, sim.qd * VEL_SCALE,
            (to_wrist(kp) * POS_SCALE).reshape(E, -1),
            to_wrist(sim.obj[:, None, :2])[:, 0] * POS_SCALE,
            np.cos(sim.obj[:, 2] - th)[:, None], np.sin(sim.obj[:, 2] - th)[:, None],
            rot_inv_v(sim.objd[:, None, :2])[:, 0] * VEL_SCALE,
            sim.objd[:, 2:3] * VEL_SCALE,
            (rot_inv_v(sim.d_vec) * POS_SCALE).reshape(E, -1),
            sim.d_sig * POS_SCALE,
            sim.flags.astype(np.float64),
        ]
        state = np.concatenate(parts, axis=1)

        goal_parts = []
        for k in self.ks:
            g = co.gidx(clip_id, t + k)
            ref_tip = co.tip_pos[g]
            ref_rot = co.tip_rot[g]
            ref_obj = co.obj[g]
            ref_d = co.d_vec[g]
            ref_c = co.c_ref[g]
            ref_wr = co.wrist[g]
            goal_parts += [
                wrap_angle(ref_rot - tip_rot),
                (rot_inv_v(ref_tip - tip_pos) * POS_SCALE).reshape(E, -1),
                wrap_angle(ref_obj[:, 2] - sim.obj[:, 2])[:, None],
                rot_inv_v((ref_obj[:, :2] - sim.obj[:, :2])[:, None])[:, 0] * POS_SCALE,
                (rot_inv_v(ref_d - sim.d_vec) * POS_SCALE).reshape(E, -1),
                ref_c - c_proj,
                to_wrist(ref_wr[:, None, :2])[:, 0] * POS_SCALE,
                wrap_angle(ref_wr[:, 2] - th)[:, None],
                (to_wrist(ref_tip) * POS_SCALE).reshape(E, -1),
                wrap_angle(ref_rot - th[:, None]),
                to_wrist(ref_obj[:, None, :2])[:, 0] * POS_SCALE,
                wrap_angle(ref_obj[:, 2] - th)[:, None],
            ]
        goal = np.concatenate(goal_parts, axis=1)
        return np.concatenate([state, goal], axis=1)

    # -- reward ----------------------------------------------------------------

    def reward_terms(self, sim: BatchSim, clip_id: np.ndarray, t: np.ndarray,
                     cmd: np.ndarray, prev_cmd: np.ndarray,
                     joint_vel: np.ndarray, joint_acc: np.ndarray):
        """Components, energy, totals, and the (reference-frame) distance
        weight for the CURRENT states against reference frames `t`."""
        co = self.corpus
        g = co.gidx(clip_id, t)
        _, tip_pos, tip_rot, c_proj = self.robot_proj(sim)
        if self.weights.distance_weight_source == "reference":
            w = co.w_dist[g]
        else:
            w = np.clip(np.mean(sim.d_sig, axis=1) / self.weights.d0, 0.0, 1.0)
        comps = match_rewards_arrays(
            tip_pos, tip_rot, sim.d_vec, c_proj, sim.obj,
            co.tip_pos[g], co.tip_rot[g], co.d_vec[g], co.c_ref[g], co.obj[g],
            w, self.weights,
        )
        r_energy = energy_penalty_arrays(cmd, prev_cmd, joint_vel, joint_acc, w, self.weights)
        total = total_reward_arrays(comps, r_energy, self.weights.mix)
        return comps, r_energy, total, w

    def contact_match(self, sim: BatchSim, clip_id: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Per-env boolean: projected contact flags equal the reference's."""
        g = self.corpus.gidx(clip_id, t)
        c_proj = sim.flags[:, self.key_links].astype(np.float64)
        return np.all(c_proj == self.corpus.c_ref[g], axis=1)
