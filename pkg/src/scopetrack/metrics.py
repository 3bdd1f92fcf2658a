"""Evaluation: per-frame tracking errors, success definitions for both
pipeline stages, and the deterministic evaluation harness.

Tracking errors are reported under both averaging modes (successful
rollouts only, and all frames of all rollouts); low success rates bias the
all-frames mode toward easy approach segments, so the two are kept side by
side and tagged rather than compared.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import PolicyCheckpoint
from .config import Config
from .demos import ReferenceClip, default_keyjoint_map
from .envelope import TerminationEnvelope
from .features import CorpusArrays, FeatureExtractor
from .geom import rot_diff
from .sim import BatchSim


@dataclass
class RolloutRecord:
    """One evaluation rollout aligned to its clip's frames."""

    clip_name: str
    frames: np.ndarray        # (T,) reference frame indices
    obj: np.ndarray           # (T, 3)
    tip_pos: np.ndarray       # (T, n, 2)
    contact_any: np.ndarray   # (T,) any hand link in contact
    obj_vel: np.ndarray       # (T, 3)
    terminated: bool
    term_frame: int           # frame of termination (or last frame)
    start_obj_y: float
    max_penetration: float = 0.0
    term_reason: str = "none"
    wrist: np.ndarray | None = None
    joint_rot: np.ndarray | None = None


def tracking_metrics(rollout: RolloutRecord, clip: ReferenceClip, kmap=None):
    """Per-frame (R_err, T_err, E_finger) against the reference plus means."""
    if kmap is None:
        raise ValueError("tracking_metrics needs the key-joint map")
    T = len(rollout.frames)
    fr = rollout.frames
    from .demos import TIP_IDS

    tips = [TIP_IDS[f] for f in kmap.demo_fingers]
    r_err = np.abs(rot_diff(rollout.obj[:, 2], clip.obj[fr, 2]))
    t_err = np.linalg.norm(rollout.obj[:, :2] - clip.obj[fr, :2], axis=1)
    e_fing = np.mean(np.linalg.norm(rollout.tip_pos - clip.joint_pos[fr][:, tips], axis=2), axis=1)
    return {
        "r_err": r_err, "t_err": t_err, "e_finger": e_fing,
        "mean_r_err": float(r_err.mean()), "mean_t_err": float(t_err.mean()),
        "mean_e_finger": float(e_fing.mean()),
    }


def tracking_success(rollout: RolloutRecord, clip: ReferenceClip,
                     eval_cfg, table_y: float = 0.0) -> bool:
    """Reached the final clip frame with no termination under the frozen
    envelope, bounded translation error, and the object never dropped below
    the table plane."""
    if rollout.terminated:
        return False
    if rollout.frames[-1] < len(clip) - 1:
        return False
    t_err = np.linalg.norm(rollout.obj[:, :2] - clip.obj[rollout.frames, :2], axis=1)
    if t_err.max() >= eval_cfg.max_t_err:
        return False
    if rollout.obj[:, 1].min() < table_y - eval_cfg.drop_margin:
        return False
    return True


def vision_success(rollout: RolloutRecord, eval_cfg, table_y: float = 0.0) -> bool:
    """Lift of at least lift_min held with continuous contact for
    hold_steps, and the object back at rest on the table at the end."""
    lift = rollout.obj[:, 1] - rollout.start_obj_y
    lifted = lift >= eval_cfg.lift_min
    holding = lifted & rollout.contact_any
    run = 0
    best = 0
    for h in holding:
        run = run + 1 if h else 0
        best = max(best, run)
    if best < eval_cfg.hold_steps:
        return False
    end_speed = float(np.linalg.norm(rollout.obj_vel[-1, :2]))
    back_down = lift[-1] <= eval_cfg.lift_min * 0.5
    return bool(back_down and end_speed < eval_cfg.rest_speed)


def contact_ratio(rollout: RolloutRecord, grasp_onset: int) -> float:
    """Fraction of post-onset frames with any hand-object contact flag."""
    post = rollout.frames >= grasp_onset
    if not post.any():
        return 0.0
    return float(rollout.contact_any[post].mean())


# ---------------------------------------------------------------------------
# batched tracker rollouts


def run_tracker_rollouts(policy, cfg: Config, clips: list[ReferenceClip],
                         reps: int, seed: int, record_full: bool = False,
                         start_frame: int = 0) -> list[RolloutRecord]:
    """Deterministic mean-action rollouts, one env per (clip, repetition),
    each from the reference start frame, cut by the frozen evaluation
    envelope."""
    model = cfg.robot
    kmap = default_keyjoint_map(model)
    corpus = CorpusArrays(clips, kmap, cfg.reward)
    fx = FeatureExtractor(model, corpus, cfg.reward, ks=cfg.ppo.horizon_set)
    kappa_eval = np.asarray(cfg.rse.kappa_eval, dtype=np.float64)

    pairs = [(ci, r) for ci in range(len(clips)) for r in range(reps)]
    E = len(pairs)
    if E == 0:
        return []
    env_clip = np.array([p[0] for p in pairs], dtype=np.int64)
    sim = BatchSim(model, cfg.env, [clips[c].shape for c in env_clip])
    rng = np.random.default_rng(seed)
    for i, (ci, _r) in enumerate(pairs):
        clip = clips[ci]
        sim.reset_env(i, clip.wrist[start_frame], np.zeros(model.n_joints),
                      clip.obj[start_frame])
        sim.t[i] = start_frame
    env_t = np.full(E, start_frame, dtype=np.int64)
    alive = np.ones(E, dtype=bool)
    terminated = np.zeros(E, dtype=bool)
    term_frame = np.full(E, -1, dtype=np.int64)
    term_reason = np.full(E, "none", dtype=object)
    mismatch = np.zeros(E, dtype=np.int64)
    bounds = np.asarray(cfg.ppo.action_bounds)

    lengths = corpus.lengths[env_clip]
    T_max = int(lengths.max()) - start_frame
    recs = [dict(frames=[], obj=[], tip=[], cont=[], vel=[], wrist=[], q=[]) for _ in range(E)]

    prev_cmd = np.zeros((E, model.action_dim))
    for _step in range(T_max - 1):
        obs = fx.observations(sim, env_clip, env_t)
        actions = policy.mean_action(obs)
        cmds = np.clip(actions, -1.0, 1.0) * bounds[None, :]
        cmds[~alive] = prev_cmd[~alive]
        sim.step(cmds)
        prev_cmd = cmds
        env_t = np.minimum(env_t + 1, lengths - 1)
        comps, _e, _tot, _w = fx.reward_terms(
            sim, env_clip, env_t, cmds, cmds, np.zeros((E, 7)), np.zeros((E, 7)))
        comp_mat = np.stack([comps[0], comps[2], comps[3], comps[4]])
        below_mat = comp_mat < kappa_eval[:, None]
        below = below_mat.any(axis=0)
        match = fx.contact_match(sim, env_clip, env_t)
        mismatch = np.where(match, 0, mismatch + 1)
        contact_fire = mismatch >= cfg.rse.window
        fire = below | contact_fire | sim.nonfinite
        newly = alive & fire
        terminated |= newly
        term_frame[newly] = env_t[newly]
        names = ("HAND_POS", "OBJECT_POS", "OBJECT_ROT", "DISTANCE")
        for i in np.nonzero(newly)[0]:
            if sim.nonfinite[i]:
                term_reason[i] = "NUMERIC"
            elif below_mat[:, i].any():
                term_reason[i] = names[int(np.argmax(below_mat[:, i]))]
            else:
                term_reason[i] = "CONTACT"
        alive &= ~fire

        kp, tip_pos, _rot, _c = fx.robot_proj(sim)
        for i in range(E):
            rec = recs[i]
            if "done" in rec:
                continue
            done_i = env_t[i] >= lengths[i] - 1
            rec["frames"].append(int(env_t[i]))
            rec["obj"].append(sim.obj[i].copy())
            rec["tip"].append(tip_pos[i].copy())
            rec["cont"].append(bool(sim.flags[i].any()))
            rec["vel"].append(sim.objd[i].copy())
            if record_full:
                rec["wrist"].append(sim.wrist[i].copy())
                rec["q"].append(sim.q[i].copy())
            if terminated[i] or done_i:
                rec["done"] = True
        if all("done" in r for r in recs):
            break

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
            terminated=bool(terminated[i]),
            term_frame=int(term_frame[i]) if terminated[i] else int(rec["frames"][-1]),
            start_obj_y=float(clips[ci].obj[start_frame, 1]),
            max_penetration=sim.max_penetration,
            term_reason=str(term_reason[i]),
            wrist=np.asarray(rec["wrist"]) if record_full else None,
            joint_rot=np.asarray(rec["q"]) if record_full else None,
        ))
    return out


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    kind: str
    per_clip: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    seed: int = 0
    n_rollouts: int = 0

    def to_json(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "n_rollouts": self.n_rollouts,
                "aggregate": self.aggregate, "per_clip": self.per_clip}


CSV_COLUMNS = ["clip", "n_rollouts", "success_rate", "contact_ratio",
               "r_err_successful", "t_err_successful", "e_finger_successful",
               "r_err_all_frames", "t_err_all_frames", "e_finger_all_frames"]


def evaluate(ck: PolicyCheckpoint, cfg: Config, clips: list[ReferenceClip],
             n_rollouts: int, seed: int, out_dir=None) -> EvalReport:
    """Evaluate a checkpoint over the corpus; deterministic given the seed.
    Writes eval_report.csv and eval_summary.json under out_dir when given."""
    model = cfg.robot
    kmap = default_keyjoint_map(model)
    report = EvalReport(kind=ck.kind, seed=seed, n_rollouts=n_rollouts)
    if n_rollouts > 0 and clips:
        if ck.kind == "tracker":
            from .ppo import load_tracker

            policy, _ = load_tracker(ck, cfg)
            if policy.obs_dim != FeatureExtractor(
                    model, CorpusArrays(clips, kmap, cfg.reward), cfg.reward,
                    ks=cfg.ppo.horizon_set).obs_dim:
                raise ValueError("checkpoint/corpus observation dimension mismatch")
            rollouts = run_tracker_rollouts(policy, cfg, clips, n_rollouts, seed)
        else:
            from .distill import StudentPolicy, run_student_rollouts

            student = StudentPolicy.from_checkpoint(ck, cfg)
            rollouts = run_student_rollouts(student, cfg, clips, n_rollouts, seed)

        for ci, clip in enumerate(clips):
            rs = rollouts[ci * n_rollouts:(ci + 1) * n_rollouts]
            succ = []
            row = {"clip": clip.name or str(ci), "n_rollouts": n_rollouts}
            metrics_all = {"r": [], "t": [], "e": []}
            metrics_succ = {"r": [], "t": [], "e": []}
            ratios = []
            for r in rs:
                m = tracking_metrics(r, clip, kmap)
                ok = (tracking_success(r, clip, cfg.eval, cfg.env.table_y)
                      if ck.kind == "tracker"
                      else vision_success(r, cfg.eval, cfg.env.table_y))
                succ.append(ok)
                ratios.append(contact_ratio(r, clip.grasp_onset))
                metrics_all["r"].append(m["r_err"])
                metrics_all["t"].append(m["t_err"])
                metrics_all["e"].append(m["e_finger"])
                if ok:
                    metrics_succ["r"].append(m["mean_r_err"])
                    metrics_succ["t"].append(m["mean_t_err"])
                    metrics_succ["e"].append(m["mean_e_finger"])
            row["success_rate"] = float(np.mean(succ))
            row["contact_ratio"] = float(np.mean(ratios))
            row["r_err_all_frames"] = float(np.mean(np.concatenate(metrics_all["r"])))
            row["t_err_all_frames"] = float(np.mean(np.concatenate(metrics_all["t"])))
            row["e_finger_all_frames"] = float(np.mean(np.concatenate(metrics_all["e"])))
            row["r_err_successful"] = float(np.mean(metrics_succ["r"])) if metrics_succ["r"] else float("nan")
            row["t_err_successful"] = float(np.mean(metrics_succ["t"])) if metrics_succ["t"] else float("nan")
            row["e_finger_successful"] = float(np.mean(metrics_succ["e"])) if metrics_succ["e"] else float("nan")
            report.per_clip.append(row)

        keys = [k for k in CSV_COLUMNS if k not in ("clip", "n_rollouts")]
        agg = {}
        for k in keys:
            vals = np.array([row[k] for row in report.per_clip], dtype=np.float64)
            agg[k] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
        report.aggregate = agg

    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval_report.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(report.per_clip)
        with open(os.path.join(out_dir, "eval_summary.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    return report
