"""Stage two: vision-based generative control distilled from the tracker.

The student sees only partial observations (proprioception, a raycast
point cloud with tagged key-joint points, a short history, a phase flag)
plus a sparse goal (masked windows of the reference). An encoder over the
privileged state produces a residual latent around a state-dependent
prior; the decoder maps (latent, partial obs) to actions. Training is
online imitation: the student rolls out, the frozen tracker labels every
visited state, and L = |a - a~|^2 + beta * KL(enc-shifted || prior) is
minimized with beta ramped up over the first half of training. At
inference the encoder is dropped and latents come from the prior alone,
with the episode noise held fixed.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import PolicyCheckpoint
from .config import Config, DistillConfig
from .demos import ReferenceClip, TIP_IDS, default_keyjoint_map
from .features import CorpusArrays, FeatureExtractor, POS_SCALE, VEL_SCALE
from .geom import wrap_angle
from .model import RobotModel, SimState
from .nn import Adam, Mlp, Module, PointSetEncoder, Tensor, as_tensor, concat
from .sim import BatchSim

GOAL_COMPONENTS = ("wrist", "object", "fingers")


# ---------------------------------------------------------------------------
# partial observation


@dataclass
class PartialObs:
    """Deployment-grade observation: no privileged object state, no joint
    velocities, no contact flags."""

    proprio: np.ndarray        # (P,) wrist pose + local joint rotations
    history: np.ndarray        # (H, P) previous proprio frames, zero-padded
    phase: bool                # past grasp onset
    points: np.ndarray         # (N, 4) wrist-frame points with tag channels
    point_mask: np.ndarray     # (N,) validity

    def feature_vector(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.history.ravel(),
                               [1.0 if self.phase else 0.0]])


def proprio_dim(model: RobotModel) -> int:
    return 4 + model.n_joints


def _proprio_arrays(wrist: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(E, 4 + J): scaled wrist position, wrist heading, joint angles."""
    return np.concatenate([
        wrist[:, :2] * POS_SCALE,
        np.cos(wrist[:, 2:3]), np.sin(wrist[:, 2:3]),
        q,
    ], axis=1)


def observe(state: SimState, model: RobotModel, camera, history: np.ndarray,
            clip: ReferenceClip, t: int, params=None, rng=None,
            n_rays: int = 64, fov: float = 1.1) -> PartialObs:
    """Assemble one PartialObs from a state snapshot (functional surface;
    the batched rollout path mirrors this)."""
    from .sim import raycast_depth

    proprio = _proprio_arrays(state.wrist_pose[None], state.joint_rot[None])[0]
    pts_world = raycast_depth(state, model, clip.shape, camera, fov, n_rays,
                              rng=rng, params=params)
    th = state.wrist_pose[2]
    c, s = math.cos(th), math.sin(th)

    def to_wrist(p):
        d = p - state.wrist_pose[:2]
        return np.stack([c * d[..., 0] + s * d[..., 1],
                         -s * d[..., 0] + c * d[..., 1]], axis=-1)

    obj_pts = to_wrist(pts_world) * POS_SCALE if len(pts_world) else np.zeros((0, 2))
    joint_pts = to_wrist(state.joint_pos[model.key_joints]) * POS_SCALE
    n_obj, n_j = len(obj_pts), len(joint_pts)
    points = np.zeros((n_obj + n_j, 4))
    points[:n_obj, :2] = obj_pts
    points[:n_obj, 2] = 1.0
    points[n_obj:, :2] = joint_pts
    points[n_obj:, 3] = 1.0
    return PartialObs(
        proprio=proprio,
        history=np.asarray(history, dtype=np.float64),
        phase=bool(t >= clip.grasp_onset),
        points=points,
        point_mask=np.ones(n_obj + n_j, dtype=bool),
    )


# ---------------------------------------------------------------------------
# sparse goals


@dataclass
class SparseGoal:
    """Masked reference windows; values are world-frame, canonicalized at
    feature-assembly time. Masked components carry zeros with the mask bit
    cleared (the bit is the token channel, never a magic value)."""

    bits: np.ndarray           # (3,) wrist / object / fingers
    wrist_win: np.ndarray      # (W, 3)
    obj_win: np.ndarray        # (W, 3)
    finger_win: np.ndarray     # (W, n, 2)

    def vector(self, wrist_pose: np.ndarray) -> np.ndarray:
        return goal_vectors(self.bits[None], self.wrist_win[None],
                            self.obj_win[None], self.finger_win[None],
                            wrist_pose[None])[0]


def goal_dim(window: int, n_key: int) -> int:
    return 3 + window * 3 + window * 3 + window * n_key * 2


def goal_vectors(bits, wrist_win, obj_win, finger_win, wrist_pose) -> np.ndarray:
    """Canonicalize goal windows in each env's wrist frame and flatten.
    bits: (E, 3); windows world-frame; masked components already zeroed."""
    E, W = wrist_win.shape[0], wrist_win.shape[1]
    th = wrist_pose[:, 2]
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]

    def to_wrist(p):
        dx = p[..., 0] - wrist_pose[:, None, 0]
        dy = p[..., 1] - wrist_pose[:, None, 1]
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    out = [np.asarray(bits, dtype=np.float64)]
    for win, is_pose in ((wrist_win, True), (obj_win, True)):
        rel = to_wrist(win[..., :2]) * POS_SCALE
        ang = wrap_angle(win[..., 2] - th[:, None])
        block = np.concatenate([rel, ang[..., None]], axis=-1)
        out.append(block.reshape(E, -1))
    fw = finger_win.reshape(E, W, -1, 2)
    dxy = np.stack([
        c[..., None] * (fw[..., 0] - wrist_pose[:, None, None, 0])
        + s[..., None] * (fw[..., 1] - wrist_pose[:, None, None, 1]),
        -s[..., None] * (fw[..., 0] - wrist_pose[:, None, None, 0])
        + c[..., None] * (fw[..., 1] - wrist_pose[:, None, None, 1]),
    ], axis=-1) * POS_SCALE
    out.append(dxy.reshape(E, -1))
    vec = np.concatenate(out, axis=1)
    # masked components stay exactly zero in the value channels
    mask_w = np.repeat(bits[:, 0:1], W * 3, axis=1)
    mask_o = np.repeat(bits[:, 1:2], W * 3, axis=1)
    mask_f = np.repeat(bits[:, 2:3], fw.shape[2] * W * 2, axis=1)
    full_mask = np.concatenate([np.ones((E, 3)), mask_w, mask_o, mask_f], axis=1)
    return vec * full_mask


def mask_goal(clip: ReferenceClip, t: int, mask_spec, rng: np.random.Generator | None,
              window: int = 15, kmap=None) -> SparseGoal:
    """Build a sparse goal at frame t.

    `mask_spec` is either a dict of unmask probabilities (training mode:
    bits sampled with `rng`) or a list of component names to unmask
    (inference mode: fixed)."""
    if kmap is None:
        raise ValueError("mask_goal needs the key-joint map")
    unknown = set(mask_spec) - set(GOAL_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown goal components: {sorted(unknown)}")
    if isinstance(mask_spec, dict):
        if rng is None:
            raise ValueError("training-mode masking needs an rng")
        bits = np.array([1.0 if rng.random() < mask_spec.get(c, 0.0) else 0.0
                         for c in GOAL_COMPONENTS])
    else:
        bits = np.array([1.0 if c in mask_spec else 0.0 for c in GOAL_COMPONENTS])
    idx = np.minimum(t + np.arange(window), len(clip) - 1)
    tips = [TIP_IDS[f] for f in kmap.demo_fingers]
    wrist_win = clip.wrist[idx] * bits[0]
    obj_win = clip.obj[idx] * bits[1]
    finger_win = clip.joint_pos[idx][:, tips] * bits[2]
    return SparseGoal(bits=bits, wrist_win=wrist_win, obj_win=obj_win,
                      finger_win=finger_win)


# ---------------------------------------------------------------------------
# networks


class StudentPolicy:
    """Prior + decoder + shared point encoder (+ training-only encoder)."""

    def __init__(self, model: RobotModel, cfg: DistillConfig, privileged_dim: int,
                 rng: np.random.Generator, n_key: int = 2):
        self.cfg = cfg
        self.model = model
        self.latent = cfg.latent_dim
        p = proprio_dim(model)
        self.obs_feat_dim = p * (1 + cfg.history) + 1
        self.goal_feat_dim = goal_dim(cfg.window, n_key)
        self.point_out = 128
        self.privileged_dim = privileged_dim
        self.point_encoder = PointSetEncoder(4, rng, out_dim=self.point_out, prefix="penc")
        self.prior = Mlp([self.obs_feat_dim + self.point_out + self.goal_feat_dim,
                          256, 256, 256, 2 * self.latent], rng, prefix="prior")
        self.decoder = Mlp([self.latent + self.obs_feat_dim + self.point_out,
                            256, 256, 256, model.action_dim], rng,
                           final_bias=False, prefix="dec")
        self.encoder = Mlp([privileged_dim, 256, 256, 256, 2 * self.latent],
                           rng, prefix="enc")

    # -- forward pieces (Tensor-valued for training) -------------------------

    def point_features(self, points: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.point_encoder(points, mask)

    def _split(self, out: Tensor):
        # slicing helper that keeps gradients: multiply by selection matrices
        d = out.data.shape[-1] // 2
        sel_mu = np.zeros((2 * d, d))
        sel_mu[:d, :] = np.eye(d)
        sel_ls = np.zeros((2 * d, d))
        sel_ls[d:, :] = np.eye(d)
        return out @ sel_mu, out @ sel_ls

    def prior_params(self, obs_feat, point_feat, goal_feat):
        h = concat([as_tensor(obs_feat), as_tensor(point_feat), as_tensor(goal_feat)], axis=-1)
        mu, log_std = self._split(self.prior(h))
        return mu, log_std.clip(-5.0, 2.0)

    def encoder_params(self, privileged):
        mu, log_std = self._split(self.encoder(as_tensor(privileged)))
        return mu, log_std.clip(-5.0, 2.0)

    def decode(self, z, obs_feat, point_feat) -> Tensor:
        h = concat([as_tensor(z), as_tensor(obs_feat), as_tensor(point_feat)], axis=-1)
        return self.decoder(h)

    def modules(self, with_encoder: bool = True):
        mods = [self.point_encoder, self.prior, self.decoder]
        if with_encoder:
            mods.append(self.encoder)
        return mods

    # -- checkpointing ---------------------------------------------------------

    def to_checkpoint(self, metadata: dict) -> PolicyCheckpoint:
        ck = PolicyCheckpoint(kind="student")
        ck.set_section("prior", self.prior.state_dict())
        ck.set_section("decoder", self.decoder.state_dict())
        ck.set_section("point_encoder", self.point_encoder.state_dict())
        ck.set_section("encoder", self.encoder.state_dict())
        ck.metadata = dict(metadata)
        ck.metadata.update({
            "privileged_dim": self.privileged_dim,
            "latent_dim": self.latent,
        })
        return ck

    @staticmethod
    def from_checkpoint(ck: PolicyCheckpoint, cfg: Config) -> "StudentPolicy":
        rng = np.random.default_rng(0)
        student = StudentPolicy(cfg.robot, cfg.distill,
                                int(ck.metadata["privileged_dim"]), rng)
        student.prior.load_state_dict(ck.section("prior"))
        student.decoder.load_state_dict(ck.section("decoder"))
        student.point_encoder.load_state_dict(ck.section("point_encoder"))
        if "encoder" in ck.sections:
            student.encoder.load_state_dict(ck.section("encoder"))
        return student


# -- spec-surface functional ops ----------------------------------------------


def encode(student: StudentPolicy, privileged: np.ndarray):
    """Training-only: (mu_q, log_sigma_q) from the privileged state+goal."""
    mu, ls = student.encoder_params(privileged)
    return mu.data, ls.data


def prior(student: StudentPolicy, obs: PartialObs, goal: SparseGoal,
          wrist_pose: np.ndarray):
    """(mu_p, log_sigma_p) from partial observation and sparse goal only."""
    pf = student.point_features(obs.points[None], obs.point_mask[None])
    mu, ls = student.prior_params(obs.feature_vector()[None], pf,
                                  goal.vector(wrist_pose)[None])
    return mu.data[0], ls.data[0]


def sample_latent(mu_p, mu_q, sigma_q, eps):
    """z = mu_p + mu_q + sigma_q * eps with the episode-fixed noise."""
    return np.asarray(mu_p) + np.asarray(mu_q) + np.asarray(sigma_q) * np.asarray(eps)


def kl_loss(mu_p, sigma_p, mu_q, sigma_q) -> float:
    """KL( N(mu_p + mu_q, sigma_q^2) || N(mu_p, sigma_p^2) ), diagonal:
    the mean shift is exactly mu_q."""
    sp2 = np.asarray(sigma_p, dtype=np.float64) ** 2
    sq2 = np.asarray(sigma_q, dtype=np.float64) ** 2
    mq = np.asarray(mu_q, dtype=np.float64)
    per = 0.5 * (sq2 / sp2 + mq**2 / sp2 - 1.0 - np.log(sq2 / sp2))
    return float(np.sum(per))


def kl_loss_tensor(mu_q: Tensor, log_sq: Tensor, mu_p: Tensor, log_sp: Tensor) -> Tensor:
    """Batched Tensor KL, summed over latent dims, mean over the batch."""
    var_ratio = ((log_sq - log_sp) * 2.0).exp()
    mean_term = mu_q.square() * (log_sp * (-2.0)).exp()
    per = (var_ratio + mean_term - 1.0 - (log_sq - log_sp) * 2.0) * 0.5
    return per.sum(axis=-1).mean()


def decode(student: StudentPolicy, z, obs: PartialObs) -> np.ndarray:
    """Deterministic action from (latent, partial obs)."""
    pf = student.point_features(obs.points[None], obs.point_mask[None])
    return student.decode(np.asarray(z)[None], obs.feature_vector()[None], pf).data[0]


def act_inference(student: StudentPolicy, obs: PartialObs, goal: SparseGoal,
                  eps: np.ndarray, wrist_pose: np.ndarray) -> np.ndarray:
    """Prior-only inference: z = mu_p + sigma_p * eps (episode-fixed eps)."""
    pf = student.point_features(obs.points[None], obs.point_mask[None])
    mu, ls = student.prior_params(obs.feature_vector()[None], pf,
                                  goal.vector(wrist_pose)[None])
    z = mu.data[0] + np.exp(ls.data[0]) * np.asarray(eps)
    return student.decode(z[None], obs.feature_vector()[None], pf).data[0]


def beta_schedule(iteration: int, total: int, beta_max: float) -> float:
    """Linear 0 -> beta_max over the first half of training, flat after."""
    half = max(1, total // 2)
    return beta_max * min(1.0, iteration / half)


# ---------------------------------------------------------------------------
# batched student rollouts


class _StudentRollout:
    """Shared machinery for DAgger collection and inference evaluation."""

    def __init__(self, cfg: Config, clips: list[ReferenceClip], E: int,
                 seed_rng: np.random.Generator, env_clip=None):
        self.cfg = cfg
        self.clips = clips
        self.model = cfg.robot
        self.kmap = default_keyjoint_map(self.model)
        self.corpus = CorpusArrays(clips, self.kmap, cfg.reward)
        self.fx = FeatureExtractor(self.model, self.corpus, cfg.reward,
                                   ks=cfg.ppo.horizon_set)
        self.E = E
        self.rng = seed_rng
        self.env_clip = (np.array([i % len(clips) for i in range(E)], dtype=np.int64)
                         if env_clip is None else env_clip)
        self.sim = BatchSim(self.model, cfg.env, [clips[c].shape for c in self.env_clip])
        d = cfg.distill
        self.H = d.history
        self.P = proprio_dim(self.model)
        self.hist = np.zeros((E, self.H, self.P))
        self.eps = np.zeros((E, d.latent_dim))
        self.camera = np.zeros((E, 3))
        self.bits = np.zeros((E, 3))
        self.env_t = np.zeros(E, dtype=np.int64)
        self.ep_obj = [[] for _ in range(E)]     # per-episode (y, contact, speed)
        self.bounds = np.asarray(cfg.ppo.action_bounds)
        self.n_pts = d.n_rays + len(self.kmap)

    def sample_camera(self):
        d = self.cfg.distill
        b = np.radians(self.rng.uniform(d.camera_bearing[0], d.camera_bearing[1]))
        r = self.rng.uniform(d.camera_range[0], d.camera_range[1])
        pos = np.array([r * math.cos(b), r * math.sin(b)])
        facing = math.atan2(-pos[1], -pos[0])
        return np.array([pos[0], pos[1], facing])

    def reset_env(self, i: int, mask_mode: str):
        c = int(self.env_clip[i])
        clip = self.clips[c]
        self.sim.reset_env(i, clip.wrist[0], np.zeros(self.model.n_joints), clip.obj[0])
        self.env_t[i] = 0
        self.hist[i] = 0.0
        self.eps[i] = self.rng.standard_normal(self.cfg.distill.latent_dim)
        self.camera[i] = self.sample_camera()
        d = self.cfg.distill
        if mask_mode == "train":
            self.bits[i] = [1.0 if self.rng.random() < d.mask_probs.get(cn, 0.0) else 0.0
                            for cn in GOAL_COMPONENTS]
        else:
            self.bits[i] = [1.0 if cn in d.inference_mask else 0.0
                            for cn in GOAL_COMPONENTS]
        self.ep_obj[i] = []

    def student_inputs(self, rng_noise):
        """(obs_feat, points, point_mask, goal_vec) batched arrays."""
        d = self.cfg.distill
        proprio = _proprio_arrays(self.sim.wrist, self.sim.q)
        phase = (self.env_t >= self.corpus.grasp_onset[self.env_clip]).astype(np.float64)
        obs_feat = np.concatenate(
            [proprio, self.hist.reshape(self.E, -1), phase[:, None]], axis=1)

        pts_world, hit = self.sim.raycast(self.camera, d.fov, d.n_rays, rng=rng_noise)
        th = self.sim.wrist[:, 2]
        c, s = np.cos(th)[:, None], np.sin(th)[:, None]

        def to_wrist(p):
            dx = p[..., 0] - self.sim.wrist[:, None, 0]
            dy = p[..., 1] - self.sim.wrist[:, None, 1]
            return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

        points = np.zeros((self.E, self.n_pts, 4))
        points[:, :d.n_rays, :2] = to_wrist(pts_world) * POS_SCALE
        points[:, :d.n_rays, 2] = 1.0
        kp = self.sim.keypoint_pos[:, self.kmap.robot_ids]
        points[:, d.n_rays:, :2] = to_wrist(kp) * POS_SCALE
        points[:, d.n_rays:, 3] = 1.0
        mask = np.concatenate([hit, np.ones((self.E, len(self.kmap)), dtype=bool)], axis=1)
        points[:, :d.n_rays] *= hit[..., None]

        idx = np.minimum(self.env_t[:, None] + np.arange(d.window)[None, :],
                         self.corpus.lengths[self.env_clip][:, None] - 1)
        g = self.corpus.offsets[self.env_clip][:, None] + idx
        tips_w = self.corpus.tip_pos[g]               # (E, W, n, 2)
        wrist_win = self.corpus.wrist[g] * self.bits[:, 0, None, None]
        obj_win = self.corpus.obj[g] * self.bits[:, 1, None, None]
        finger_win = tips_w * self.bits[:, 2, None, None, None]
        goal_vec = goal_vectors(self.bits, wrist_win, obj_win, finger_win, self.sim.wrist)
        return obs_feat, points, mask, goal_vec, proprio

    def push_history(self, proprio: np.ndarray):
        self.hist = np.concatenate([proprio[:, None, :], self.hist[:, :-1]], axis=1)

    def record_step(self):
        for i in range(self.E):
            self.ep_obj[i].append((
                float(self.sim.obj[i, 1]),
                bool(self.sim.flags[i].any()),
                float(np.linalg.norm(self.sim.objd[i, :2])),
                float(self.sim.obj[i, 0]),
                float(self.sim.obj[i, 2]),
            ))


def run_student_rollouts(student: StudentPolicy, cfg: Config,
                         clips: list[ReferenceClip], reps: int, seed: int):
    """Prior-only inference rollouts, one env per (clip, repetition);
    returns metrics.RolloutRecord list ordered clip-major."""
    from .metrics import RolloutRecord

    pairs = [(ci, r) for ci in range(len(clips)) for r in range(reps)]
    if not pairs:
        return []
    env_clip = np.array([p[0] for p in pairs], dtype=np.int64)
    roll = _StudentRollout(cfg, clips, len(pairs), np.random.default_rng(seed),
                           env_clip=env_clip)
    for i in range(roll.E):
        roll.reset_env(i, "inference")
    noise_rng = np.random.default_rng(seed + 1)
    lengths = roll.corpus.lengths[env_clip]
    T_max = int(lengths.max())
    recs = [dict(frames=[], obj=[], tip=[], cont=[], vel=[]) for _ in range(roll.E)]
    for _step in range(T_max - 1):
        obs_feat, points, mask, goal_vec, proprio = roll.student_inputs(noise_rng)
        pf = student.point_features(points, mask)
        mu_p, ls_p = student.prior_params(obs_feat, pf, goal_vec)
        z = mu_p.data + np.exp(ls_p.data) * roll.eps
        act = student.decode(z, obs_feat, pf).data
        cmds = np.clip(act, -1.0, 1.0) * roll.bounds[None, :]
        roll.push_history(proprio)
        roll.sim.step(cmds)
        roll.env_t = np.minimum(roll.env_t + 1, lengths - 1)
        kp = roll.sim.keypoint_pos[:, roll.kmap.robot_ids]
        for i in range(roll.E):
            if len(recs[i]["frames"]) >= lengths[i] - 1:
                continue
            recs[i]["frames"].append(int(roll.env_t[i]))
            recs[i]["obj"].append(roll.sim.obj[i].copy())
            recs[i]["tip"].append(kp[i].copy())
            recs[i]["cont"].append(bool(roll.sim.flags[i].any()))
            recs[i]["vel"].append(roll.sim.objd[i].copy())
    out = []
    for i, (ci, _r) in enumerate(pairs):
        rec = recs[i]
        out.append(RolloutRecord(
            clip_name=clips[ci].name or str(ci),
            frames=np.asarray(rec["frames"], dtype=np.int64),
            obj=np.asarray(rec["obj"]),
            tip_pos=np.asarray(rec["tip"]),
            contact_any=np.asarray(rec["cont"], dtype=bool),
            obj_vel=np.asarray(rec["vel"]),
            terminated=False,
            term_frame=int(rec["frames"][-1]),
            start_obj_y=float(clips[ci].obj[0, 1]),
            max_penetration=roll.sim.max_penetration,
        ))
    return out


# ---------------------------------------------------------------------------
# DAgger training


DISTILL_LOG_COLUMNS = ["iteration", "L_rec", "L_KL", "beta", "student_success_rate"]


def dagger_train(teacher_ck: PolicyCheckpoint, cfg: Config,
                 clips: list[ReferenceClip], seed: int, out_dir=None,
                 progress=None, skip_teacher_gate: bool = False):
    """Online imitation of the tracker; returns (student checkpoint, log).

    The student is rolled out in the simulator; the teacher labels every
    visited state with its mean action from the privileged observation.
    """
    from .metrics import RolloutRecord, evaluate, vision_success
    from .ppo import load_tracker

    if teacher_ck.kind != "tracker":
        raise ValueError("teacher checkpoint must be a tracker")
    teacher, _ = load_tracker(teacher_ck, cfg)
    if int(teacher_ck.metadata["action_dim"]) != cfg.robot.action_dim:
        raise ValueError("teacher/student action dimension mismatch")
    if not skip_teacher_gate:
        gate = evaluate(teacher_ck, cfg, clips, n_rollouts=2, seed=seed + 777)
        rate = gate.aggregate.get("success_rate", 0.0)
        if rate < cfg.distill.teacher_gate:
            raise ValueError(
                f"teacher fails its evaluation gate: success {rate:.3f} < "
                f"{cfg.distill.teacher_gate}")

    d = cfg.distill
    ss = np.random.SeedSequence(seed)
    r_init, r_roll, r_noise, r_buf = [np.random.default_rng(s) for s in ss.spawn(4)]
    roll = _StudentRollout(cfg, clips, d.n_envs, r_roll)
    student = StudentPolicy(cfg.robot, d, roll.fx.obs_dim, r_init,
                            n_key=len(roll.kmap))
    opt = Adam(student.modules(), lr=d.lr)
    for i in range(roll.E):
        roll.reset_env(i, "train")

    n_feat = student.obs_feat_dim
    n_goal = student.goal_feat_dim
    cap = d.buffer_size
    buf = {
        "obs": np.zeros((cap, n_feat), dtype=np.float32),
        "goal": np.zeros((cap, n_goal), dtype=np.float32),
        "points": np.zeros((cap, roll.n_pts, 4), dtype=np.float32),
        "mask": np.zeros((cap, roll.n_pts), dtype=bool),
        "priv": np.zeros((cap, roll.fx.obs_dim), dtype=np.float32),
        "teacher": np.zeros((cap, cfg.robot.action_dim), dtype=np.float32),
        "eps": np.zeros((cap, d.latent_dim), dtype=np.float32),
    }
    size = 0
    head = 0

    rows = []
    success_window = []
    last_rate = 0.0
    t0 = time.perf_counter()
    for it in range(d.iterations):
        beta = beta_schedule(it, d.iterations, d.beta_max)
        # ---- collect ----
        for _h in range(d.horizon):
            obs_feat, points, mask, goal_vec, proprio = roll.student_inputs(r_noise)
            priv = roll.fx.observations(roll.sim, roll.env_clip, roll.env_t)
            a_star = teacher.mean_action(priv)
            pf = student.point_features(points, mask)
            mu_p, _ = student.prior_params(obs_feat, pf, goal_vec)
            mu_q, ls_q = student.encoder_params(priv)
            z = mu_p.data + mu_q.data + np.exp(ls_q.data) * roll.eps
            act = student.decode(z, obs_feat, pf).data
            for i in range(roll.E):
                j = head % cap
                buf["obs"][j] = obs_feat[i]
                buf["goal"][j] = goal_vec[i]
                buf["points"][j] = points[i]
                buf["mask"][j] = mask[i]
                buf["priv"][j] = priv[i]
                buf["teacher"][j] = a_star[i]
                buf["eps"][j] = roll.eps[i]
                head += 1
                size = min(size + 1, cap)
            cmds = np.clip(act, -1.0, 1.0) * roll.bounds[None, :]
            roll.push_history(proprio)
            roll.sim.step(cmds)
            roll.env_t += 1
            roll.record_step()
            lengths = roll.corpus.lengths[roll.env_clip]
            for i in range(roll.E):
                off_world = (abs(roll.sim.obj[i, 0]) > 1.0
                             or roll.sim.obj[i, 1] < cfg.env.table_y - 0.2)
                if roll.env_t[i] >= lengths[i] - 1 or roll.sim.nonfinite[i] or off_world:
                    ep = np.asarray(roll.ep_obj[i])
                    rec = RolloutRecord(
                        clip_name="", frames=np.arange(len(ep)),
                        obj=np.stack([ep[:, 3], ep[:, 0], ep[:, 4]], axis=1),
                        tip_pos=np.zeros((len(ep), 1, 2)),
                        contact_any=ep[:, 1].astype(bool),
                        obj_vel=np.stack([ep[:, 2], np.zeros(len(ep)), np.zeros(len(ep))], axis=1),
                        terminated=False, term_frame=len(ep) - 1,
                        start_obj_y=float(roll.clips[int(roll.env_clip[i])].obj[0, 1]),
                    )
                    success_window.append(vision_success(rec, cfg.eval, cfg.env.table_y))
                    if len(success_window) > 64:
                        success_window.pop(0)
                    roll.reset_env(i, "train")

        # ---- update ----
        l_rec_sum = 0.0
        l_kl_sum = 0.0
        for _u in range(d.updates_per_iter):
            mb = r_buf.integers(0, size, size=min(d.minibatch, size))
            pf = student.point_features(buf["points"][mb].astype(np.float64),
                                        buf["mask"][mb])
            mu_p, ls_p = student.prior_params(buf["obs"][mb].astype(np.float64), pf,
                                              buf["goal"][mb].astype(np.float64))
            mu_q, ls_q = student.encoder_params(buf["priv"][mb].astype(np.float64))
            eps_mb = buf["eps"][mb].astype(np.float64)
            z = mu_p + mu_q + ls_q.exp() * eps_mb
            act = student.decode(z, buf["obs"][mb].astype(np.float64), pf)
            diff = act - buf["teacher"][mb].astype(np.float64)
            l_rec = diff.square().sum(axis=-1).mean()
            l_kl = kl_loss_tensor(mu_q, ls_q, mu_p, ls_p)
            loss = l_rec + beta * l_kl
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite distillation loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            l_rec_sum += float(l_rec.data)
            l_kl_sum += float(l_kl.data)

        if success_window:
            last_rate = float(np.mean(success_window))
        row = {
            "iteration": it,
            "L_rec": l_rec_sum / d.updates_per_iter,
            "L_KL": l_kl_sum / d.updates_per_iter,
            "beta": beta,
            "student_success_rate": last_rate,
        }
        rows.append(row)
        if progress is not None:
            progress(row)

    ck = student.to_checkpoint({
        "iterations": d.iterations,
        "teacher_iteration": teacher_ck.metadata.get("iteration"),
        "obs_dim": roll.fx.obs_dim,
        "action_dim": cfg.robot.action_dim,
        "wallclock_s": time.perf_counter() - t0,
    })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "distill_log.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=DISTILL_LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return ck, rows
