"""Synthetic demonstration corpus.

A scripted kinematic demonstrator hand (3 fingers x 3 links, all joints
independent, deliberately more finger DoFs than the simulated robot)
performs grasp-lift-place trajectories on the task objects. Clips record
per-frame hand/object kinematics, fingertip-to-surface distance vectors,
proximity-based contact flags, and optional injected imperfections (marker
jitter, fingertip penetration bias). Also provides the key-joint mapping
between the two skeletons and goal-feature assembly for the tracker.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose2, rotate, rotate_inv, to_frame, wrap_angle
from .model import RobotModel, SimState
from .shapes import Circle, ConvexPolygon, make_box, shape_from_json, shape_nearest

CLIP_VERSION = 1

# demonstrator skeleton: palm mounts and link lengths per finger
DEMO_MOUNTS = np.array([[-0.05, 0.0], [0.0, 0.0], [0.05, 0.0]])
DEMO_LINKS = np.array([0.035, 0.030, 0.025])
N_FINGERS = 3
N_KEYPOINTS = 1 + 4 * N_FINGERS          # wrist + (j0, j1, j2, tip) per finger
TIP_IDS = [4, 8, 12]
PROXIMITY_CONTACT = 0.005                # 5 mm rule for demonstrator contact flags
DEFAULT_HORIZON_SET = (1, 5, 15)         # goal lookahead, control steps


class ClipError(Exception):
    """Base class for clip I/O failures."""


class ClipVersionError(ClipError):
    pass


class ClipFormatError(ClipError):
    pass


class ClipTruncatedError(ClipError):
    pass


class InfeasibleTask(ValueError):
    """TaskSpec cannot be realized by the scripted demonstrator."""


@dataclass
class TaskSpec:
    """One grasp-lift-place task for the demonstrator."""

    shape: object                         # Circle or ConvexPolygon
    start_pose: np.ndarray                # (3,) object pose on the table
    goal_pose: np.ndarray                 # (3,)
    lift_height: float = 0.10
    jitter: float = 0.0                   # m, per-coordinate keypoint noise bound
    pen_bias: float = 0.0                 # m, fingertip push into the object
    fps: float = 30.0
    durations: dict = field(default_factory=lambda: {
        "approach": 1.0, "close": 0.5, "carry": 1.5, "place": 0.5, "retreat": 0.5,
    })

    def __post_init__(self):
        self.start_pose = np.asarray(self.start_pose, dtype=np.float64)
        self.goal_pose = np.asarray(self.goal_pose, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "shape": self.shape.to_json(),
            "start_pose": self.start_pose.tolist(),
            "goal_pose": self.goal_pose.tolist(),
            "lift_height": self.lift_height,
            "jitter": self.jitter,
            "pen_bias": self.pen_bias,
            "fps": self.fps,
            "durations": self.durations,
        }

    @staticmethod
    def from_json(doc: dict) -> "TaskSpec":
        return TaskSpec(
            shape=shape_from_json(doc["shape"]),
            start_pose=doc["start_pose"],
            goal_pose=doc["goal_pose"],
            lift_height=float(doc["lift_height"]),
            jitter=float(doc["jitter"]),
            pen_bias=float(doc["pen_bias"]),
            fps=float(doc["fps"]),
            durations=dict(doc["durations"]),
        )


@dataclass
class ReferenceClip:
    """A demonstration: per-frame demonstrator and object kinematics plus
    fingertip distance vectors and proximity contact flags."""

    fps: float
    wrist: np.ndarray        # (T, 3)
    joint_rot: np.ndarray    # (T, 9) finger joint angles, 3 per finger
    joint_pos: np.ndarray    # (T, 13, 2) keypoint positions (wrist + 4/finger)
    obj: np.ndarray          # (T, 3)
    d_vec: np.ndarray        # (T, 3, 2) fingertip -> nearest surface
    d_sig: np.ndarray        # (T, 3) signed distances
    c_flags: np.ndarray      # (T, 3) per distal link, 5 mm proximity rule
    shape: object
    grasp_onset: int
    name: str = ""

    def __post_init__(self):
        for f in ("wrist", "joint_rot", "joint_pos", "obj", "d_vec", "d_sig"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=np.float64))
        self.c_flags = np.asarray(self.c_flags, dtype=bool)
        T = len(self.wrist)
        if T < 2:
            raise ClipFormatError("clip must have at least 2 frames")
        if not (0 <= self.grasp_onset < T):
            raise ClipFormatError("grasp_onset out of range")
        if self.fps <= 0:
            raise ClipFormatError("fps must be positive")

    def __len__(self) -> int:
        return len(self.wrist)

    def tip_rotations(self) -> np.ndarray:
        """(T, 3) world orientation of each distal finger link."""
        sums = self.joint_rot.reshape(len(self), N_FINGERS, 3).sum(axis=2)
        return wrap_angle(self.wrist[:, 2:3] + sums)

    def equals(self, other: "ReferenceClip") -> bool:
        return (
            self.fps == other.fps
            and self.grasp_onset == other.grasp_onset
            and self.shape.to_json() == other.shape.to_json()
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("wrist", "joint_rot", "joint_pos", "obj", "d_vec", "d_sig", "c_flags")
            )
        )


# ---------------------------------------------------------------------------
# demonstrator kinematics


def _finger_fk(mount: np.ndarray, angles) -> np.ndarray:
    """Joint/tip positions of one finger in the palm frame.

    `angles`: (3,) joint angles; returns (4, 2): mount, j1, j2, tip.
    Link direction at cumulative angle b is (sin b, -cos b): straight down
    at zero, swinging toward +x for positive angles.
    """
    pts = np.empty((4, 2))
    pts[0] = mount
    b = 0.0
    p = np.array(mount, dtype=np.float64)
    for m in range(3):
        b += angles[m]
        p = p + DEMO_LINKS[m] * np.array([math.sin(b), -math.cos(b)])
        pts[m + 1] = p
    return pts


def _finger_ik(mount: np.ndarray, target: np.ndarray, side: float):
    """Solve (q1, phi) with q = (q1, phi, phi) so the fingertip reaches
    `target` (palm frame). Newton iteration; raises InfeasibleTask when the
    target is out of reach."""
    q1, phi = 0.35 * side, 0.35 * side
    for _ in range(80):
        b1 = q1
        b2 = q1 + phi
        b3 = q1 + 2.0 * phi
        tip = mount + np.array([
            DEMO_LINKS[0] * math.sin(b1) + DEMO_LINKS[1] * math.sin(b2) + DEMO_LINKS[2] * math.sin(b3),
            -DEMO_LINKS[0] * math.cos(b1) - DEMO_LINKS[1] * math.cos(b2) - DEMO_LINKS[2] * math.cos(b3),
        ])
        err = tip - target
        if err @ err < 1e-24:
            return np.array([q1, phi, phi])
        j00 = DEMO_LINKS[0] * math.cos(b1) + DEMO_LINKS[1] * math.cos(b2) + DEMO_LINKS[2] * math.cos(b3)
        j10 = DEMO_LINKS[0] * math.sin(b1) + DEMO_LINKS[1] * math.sin(b2) + DEMO_LINKS[2] * math.sin(b3)
        j01 = DEMO_LINKS[1] * math.cos(b2) + 2.0 * DEMO_LINKS[2] * math.cos(b3)
        j11 = DEMO_LINKS[1] * math.sin(b2) + 2.0 * DEMO_LINKS[2] * math.sin(b3)
        det = j00 * j11 - j01 * j10
        if abs(det) < 1e-12:
            break
        dq1 = (j11 * err[0] - j01 * err[1]) / det
        dph = (-j10 * err[0] + j00 * err[1]) / det
        q1 -= dq1
        phi -= dph
        if abs(q1) > 2.6 or abs(phi) > 2.6:
            break
    raise InfeasibleTask(f"fingertip target {target} unreachable")


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _grip_targets(shape, pen_bias: float):
    """Left/right fingertip contact targets in the object frame, placed a
    little below center so the grip cradles the object (but never below
    1 cm above the table for thin shapes)."""
    if isinstance(shape, Circle):
        g = math.radians(20.0)
        r = shape.radius - pen_bias
        return (np.array([-r * math.cos(g), -r * math.sin(g)]),
                np.array([r * math.cos(g), -r * math.sin(g)]))
    v = shape.vertices
    hw = float(np.max(v[:, 0]))
    hh = float(np.max(v[:, 1]))
    dy = max(-0.3 * hh, 0.010 - hh)
    return (np.array([-(hw - pen_bias), dy]), np.array([hw - pen_bias, dy]))


def generate_demo(task: TaskSpec, rng: np.random.Generator) -> ReferenceClip:
    """Script one grasp-lift-place demonstration.

    The demonstrator approaches from an offset, closes the two outer
    fingers onto the object (middle finger folds aside), carries the object
    along a smooth lifted spline to the goal, releases, and retreats. The
    object follows the scripted spline during the carry phase. Jitter and
    penetration-bias artifacts are injected per the TaskSpec; distance
    vectors and 5 mm proximity contact flags are computed from the noisy
    keypoints.
    """
    shape = task.shape
    for pose, what in ((task.start_pose, "start"), (task.goal_pose, "goal")):
        if abs(pose[0]) > 0.35 or pose[1] < 0.0 or pose[1] > 0.40:
            raise InfeasibleTask(f"object {what} pose {pose} outside the workspace")
    if not 0.02 <= task.lift_height <= 0.30:
        raise InfeasibleTask("lift height outside [0.02, 0.30]")

    left_t, right_t = _grip_targets(shape, task.pen_bias)
    # wrist height above the grip points; IK solves the exact closure below
    reach = 0.072
    grip_center_local = 0.5 * (left_t + right_t)

    def wrist_for(obj_pose):
        c = obj_pose[:2] + rotate(obj_pose[2], grip_center_local)
        return np.array([c[0], c[1] + reach, 0.0])

    pre_wrist = wrist_for(task.start_pose)
    # closed-finger IK in the palm frame (wrist angle 0 during grasping)
    obj0 = task.start_pose
    left_world = obj0[:2] + rotate(obj0[2], left_t)
    right_world = obj0[:2] + rotate(obj0[2], right_t)
    q_left = _finger_ik(DEMO_MOUNTS[0], left_world - pre_wrist[:2], side=+1.0)
    q_right = _finger_ik(DEMO_MOUNTS[2], right_world - pre_wrist[:2], side=-1.0)
    q_mid = np.array([1.0, 0.7, 0.5])     # folds out of the grip
    q_closed = np.concatenate([q_left, q_mid, q_right])

    start_wrist = pre_wrist + np.array([-0.12, 0.10, 0.0])
    durations = task.durations
    order = ("approach", "close", "carry", "place", "retreat")
    fps = task.fps
    counts = [max(1, int(round(durations[k] * fps))) for k in order]
    T = sum(counts) + 1

    wrist = np.zeros((T, 3))
    qs = np.zeros((T, 9))
    obj = np.zeros((T, 3))
    grasp_onset = None

    t0 = 0
    bounds = {}
    for name, c in zip(order, counts):
        bounds[name] = (t0, t0 + c)
        t0 += c

    carry_delta = task.goal_pose - task.start_pose
    carry_delta[2] = wrap_angle(carry_delta[2])
    t_grip = None
    for t in range(T):
        if t <= bounds["approach"][1]:
            u = _smoothstep(t / counts[0])
            wrist[t] = start_wrist + u * (pre_wrist - start_wrist)
            qs[t] = 0.0
            obj[t] = task.start_pose
        if bounds["close"][0] < t <= bounds["close"][1]:
            u = _smoothstep((t - bounds["close"][0]) / counts[1])
            wrist[t] = pre_wrist
            qs[t] = u * q_closed
            obj[t] = task.start_pose
        if bounds["carry"][0] < t <= bounds["carry"][1]:
            u = (t - bounds["carry"][0]) / counts[2]
            s = _smoothstep(u)
            obj[t] = task.start_pose + s * carry_delta
            obj[t, 1] += task.lift_height * math.sin(math.pi * u)
            obj[t, 2] = wrap_angle(obj[t, 2])
            # wrist rides rigidly with the object
            dp = obj[t] - task.start_pose
            wrist[t, :2] = obj[t, :2] + rotate(dp[2], pre_wrist[:2] - task.start_pose[:2])
            wrist[t, 2] = wrap_angle(dp[2])
            qs[t] = q_closed
        if bounds["place"][0] < t <= bounds["place"][1]:
            u = _smoothstep((t - bounds["place"][0]) / counts[3])
            obj[t] = task.goal_pose
            dp = task.goal_pose - task.start_pose
            wrist[t, :2] = obj[t, :2] + rotate(dp[2], pre_wrist[:2] - task.start_pose[:2])
            wrist[t, 2] = wrap_angle(dp[2])
            qs[t] = (1.0 - 0.7 * u) * q_closed
        if t > bounds["retreat"][0]:
            u = _smoothstep((t - bounds["retreat"][0]) / counts[4])
            obj[t] = task.goal_pose
            dp = task.goal_pose - task.start_pose
            base = obj[t, :2] + rotate(dp[2], pre_wrist[:2] - task.start_pose[:2])
            wrist[t, :2] = base + u * np.array([-0.06, 0.10])
            wrist[t, 2] = wrap_angle(dp[2])
            qs[t] = (0.3 - 0.3 * u) * q_closed

    # keypoint positions from FK, then noise, then distances/contacts
    joint_pos = np.zeros((T, N_KEYPOINTS, 2))
    for t in range(T):
        joint_pos[t, 0] = wrist[t, :2]
        for f in range(N_FINGERS):
            pts = _finger_fk(DEMO_MOUNTS[f], qs[t, 3 * f:3 * f + 3])
            w = rotate(wrist[t, 2], pts) + wrist[t, :2]
            joint_pos[t, 1 + 4 * f:5 + 4 * f] = w

    if task.jitter > 0.0:
        joint_pos = joint_pos + rng.uniform(-task.jitter, task.jitter, size=joint_pos.shape)

    d_vec = np.zeros((T, N_FINGERS, 2))
    d_sig = np.zeros((T, N_FINGERS))
    c_flags = np.zeros((T, N_FINGERS), dtype=bool)
    for t in range(T):
        inv = Pose2(*obj[t])
        for f in range(N_FINGERS):
            tip = joint_pos[t, TIP_IDS[f]]
            local = to_frame(inv, tip)
            sd, surf, _ = shape_nearest(shape, local)
            surf_w = rotate(obj[t, 2], surf) + obj[t, :2]
            d_vec[t, f] = surf_w - tip
            d_sig[t, f] = sd
            # distal link segment proximity (5 mm rule)
            j2 = joint_pos[t, TIP_IDS[f] - 1]
            seg = np.linspace(0.0, 1.0, 5)[:, None]
            pts = j2[None, :] * (1 - seg) + tip[None, :] * seg
            sd_seg, _, _ = shape_nearest(shape, to_frame(inv, pts))
            c_flags[t, f] = bool(np.min(sd_seg) < PROXIMITY_CONTACT)
        if grasp_onset is None and c_flags[t, 0] and c_flags[t, 2]:
            grasp_onset = t
    if grasp_onset is None:
        grasp_onset = bounds["close"][1]

    return ReferenceClip(
        fps=fps, wrist=wrist, joint_rot=qs, joint_pos=joint_pos, obj=obj,
        d_vec=d_vec, d_sig=d_sig, c_flags=c_flags, shape=shape,
        grasp_onset=int(grasp_onset),
    )


# ---------------------------------------------------------------------------
# clip I/O (JSONL)


def save_clip(clip: ReferenceClip, path):
    header = {
        "version": CLIP_VERSION,
        "fps": clip.fps,
        "n_frames": len(clip),
        "shape": clip.shape.to_json(),
        "grasp_onset": clip.grasp_onset,
        "name": clip.name,
        "map_hints": {"tip_keypoints": TIP_IDS, "grip_tips": [0, 2]},
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in range(len(clip)):
            rec = {
                "t": t,
                "wrist": clip.wrist[t].tolist(),
                "q": clip.joint_rot[t].tolist(),
                "j": clip.joint_pos[t].tolist(),
                "obj": clip.obj[t].tolist(),
                "d": clip.d_vec[t].tolist(),
                "ds": clip.d_sig[t].tolist(),
                "c": [bool(x) for x in clip.c_flags[t]],
            }
            fh.write(json.dumps(rec) + "\n")


def load_clip(path) -> ReferenceClip:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ClipTruncatedError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ClipFormatError(f"{path}: bad header: {e}") from e
    version = header.get("version")
    if version != CLIP_VERSION:
        raise ClipVersionError(f"{path}: unsupported clip version {version!r}")
    n = int(header["n_frames"])
    if len(lines) - 1 < n:
        raise ClipTruncatedError(f"{path}: expected {n} frames, found {len(lines) - 1}")
    fields = {k: [] for k in ("wrist", "q", "j", "obj", "d", "ds", "c")}
    for t in range(n):
        try:
            rec = json.loads(lines[1 + t])
        except json.JSONDecodeError as e:
            raise ClipFormatError(f"{path}: frame {t}: bad JSON: {e}") from e
        for key, store in (("wrist", "wrist"), ("q", "q"), ("j", "j"), ("obj", "obj"),
                           ("d", "d"), ("ds", "ds"), ("c", "c")):
            if key not in rec:
                raise ClipFormatError(f"{path}: frame {t}: missing field {key!r}")
            fields[store].append(rec[key])
    return ReferenceClip(
        fps=float(header["fps"]),
        wrist=np.array(fields["wrist"]),
        joint_rot=np.array(fields["q"]),
        joint_pos=np.array(fields["j"]),
        obj=np.array(fields["obj"]),
        d_vec=np.array(fields["d"]),
        d_sig=np.array(fields["ds"]),
        c_flags=np.array(fields["c"], dtype=bool),
        shape=shape_from_json(header["shape"]),
        grasp_onset=int(header["grasp_onset"]),
        name=str(header.get("name", "")),
    )


# ---------------------------------------------------------------------------
# key-joint mapping and goal features


@dataclass(frozen=True)
class KeyJointMap:
    """Ordered fingertip correspondences (robot keypoint id, demo keypoint id)."""

    pairs: tuple

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("key joint pairs must be distinct")
        for _, d in self.pairs:
            if d not in TIP_IDS:
                raise ValueError(f"demo keypoint {d} is not a fingertip")

    @property
    def robot_ids(self):
        return [r for r, _ in self.pairs]

    @property
    def demo_fingers(self):
        return [TIP_IDS.index(d) for _, d in self.pairs]

    def __len__(self):
        return len(self.pairs)


def default_keyjoint_map(model: RobotModel) -> KeyJointMap:
    """Map the robot's fingertips to the demonstrator's outer fingertips."""
    return KeyJointMap(pairs=tuple(zip(model.key_joints, (TIP_IDS[0], TIP_IDS[2]))))


def robot_tip_rotations(model: RobotModel, state: SimState, keypoint_ids=None) -> np.ndarray:
    """World orientation of the link carrying each listed keypoint."""
    ids = model.key_joints if keypoint_ids is None else keypoint_ids
    out = np.empty(len(ids))
    for i, kp in enumerate(ids):
        link = int(model.keypoint_link[kp])
        ang = state.wrist_pose[2]
        for a in model.ancestor_joints(link):
            ang += state.joint_rot[a - 1]
        out[i] = ang
    return wrap_angle(out)


def project_keyjoints(kmap: KeyJointMap, source, model: RobotModel | None = None, t: int | None = None):
    """Restrict either skeleton's features to the mapped key joints.

    `source` is a SimState (robot side, requires `model`) or a ReferenceClip
    (demo side, requires frame `t`). Returns dict with positions (n, 2),
    rotations (n,), d_vec (n, 2), d_sig (n,), contact (n,), in map order.
    """
    if isinstance(source, SimState):
        if model is None:
            raise ValueError("robot-side projection needs the robot model")
        ids = kmap.robot_ids
        for r in ids:
            if r >= source.joint_pos.shape[0]:
                raise KeyError(f"robot keypoint {r} missing from state")
        # rows of d_vec/d_sig follow model.key_joints; reorder per the map
        rows = [model.key_joints.index(r) for r in ids]
        flag_links = [int(model.keypoint_link[r]) for r in ids]
        return {
            "pos": source.joint_pos[ids].copy(),
            "rot": robot_tip_rotations(model, source, ids),
            "d_vec": source.d_vec[rows].copy(),
            "d_sig": source.d_sig[rows].copy(),
            "contact": source.contact[flag_links].astype(np.float64),
        }
    clip: ReferenceClip = source
    if t is None:
        raise ValueError("demo-side projection needs a frame index")
    fingers = kmap.demo_fingers
    tips = [TIP_IDS[f] for f in fingers]
    return {
        "pos": clip.joint_pos[t, tips].copy(),
        "rot": clip.tip_rotations()[t, fingers],
        "d_vec": clip.d_vec[t, fingers].copy(),
        "d_sig": clip.d_sig[t, fingers].copy(),
        "contact": clip.c_flags[t, fingers].astype(np.float64),
    }


@dataclass
class GoalFeature:
    """Goal-horizon features: per-lookahead deltas between the reference at
    t+k and the current state, plus the absolute future reference, all
    continuous entries canonicalized in the current wrist frame."""

    ks: tuple
    tip_rot_delta: np.ndarray   # (|K|, n)
    tip_pos_delta: np.ndarray   # (|K|, n, 2)
    obj_rot_delta: np.ndarray   # (|K|,)
    obj_pos_delta: np.ndarray   # (|K|, 2)
    d_delta: np.ndarray         # (|K|, n, 2)
    c_delta: np.ndarray         # (|K|, n)
    ref_wrist: np.ndarray       # (|K|, 3) future demo wrist in current wrist frame
    ref_tip_pos: np.ndarray     # (|K|, n, 2)
    ref_tip_rot: np.ndarray     # (|K|, n)
    ref_obj: np.ndarray         # (|K|, 3)

    def vector(self) -> np.ndarray:
        parts = []
        for name in ("tip_rot_delta", "tip_pos_delta", "obj_rot_delta", "obj_pos_delta",
                     "d_delta", "c_delta", "ref_wrist", "ref_tip_pos", "ref_tip_rot",
                     "ref_obj"):
            parts.append(np.asarray(getattr(self, name)).ravel())
        return np.concatenate(parts)

    @staticmethod
    def dim(n_key: int, n_k: int) -> int:
        per_k = n_key + 2 * n_key + 1 + 2 + 2 * n_key + n_key + 3 + 2 * n_key + n_key + 3
        return n_k * per_k


def goal_features(state: SimState, clip: ReferenceClip, t: int,
                  ks=DEFAULT_HORIZON_SET, kmap: KeyJointMap | None = None,
                  model: RobotModel | None = None) -> GoalFeature:
    """Assemble the goal feature block for frame t (future indices clamped
    to the final frame)."""
    if t >= len(clip):
        raise ValueError("frame index beyond clip end")
    if kmap is None or model is None:
        raise ValueError("goal_features needs the key-joint map and robot model")
    n = len(kmap)
    K = len(ks)
    robot = project_keyjoints(kmap, state, model=model)
    wrist = Pose2(*state.wrist_pose)
    th = state.wrist_pose[2]

    out = GoalFeature(
        ks=tuple(ks),
        tip_rot_delta=np.zeros((K, n)),
        tip_pos_delta=np.zeros((K, n, 2)),
        obj_rot_delta=np.zeros(K),
        obj_pos_delta=np.zeros((K, 2)),
        d_delta=np.zeros((K, n, 2)),
        c_delta=np.zeros((K, n)),
        ref_wrist=np.zeros((K, 3)),
        ref_tip_pos=np.zeros((K, n, 2)),
        ref_tip_rot=np.zeros((K, n)),
        ref_obj=np.zeros((K, 3)),
    )
    for i, k in enumerate(ks):
        tf = min(t + k, len(clip) - 1)
        demo = project_keyjoints(kmap, clip, t=tf)
        out.tip_rot_delta[i] = wrap_angle(demo["rot"] - robot["rot"])
        out.tip_pos_delta[i] = rotate_inv(th, demo["pos"] - robot["pos"])
        out.obj_rot_delta[i] = wrap_angle(clip.obj[tf, 2] - state.obj_pose[2])
        out.obj_pos_delta[i] = rotate_inv(th, clip.obj[tf, :2] - state.obj_pose[:2])
        out.d_delta[i] = rotate_inv(th, demo["d_vec"] - robot["d_vec"])
        out.c_delta[i] = demo["contact"] - robot["contact"]
        out.ref_wrist[i, :2] = to_frame(wrist, clip.wrist[tf, :2])
        out.ref_wrist[i, 2] = wrap_angle(clip.wrist[tf, 2] - th)
        out.ref_tip_pos[i] = to_frame(wrist, demo["pos"])
        out.ref_tip_rot[i] = wrap_angle(demo["rot"] - th)
        out.ref_obj[i, :2] = to_frame(wrist, clip.obj[tf, :2])
        out.ref_obj[i, 2] = wrap_angle(clip.obj[tf, 2] - th)
    return out


# ---------------------------------------------------------------------------
# acceptance corpus


def corpus_tasks() -> list[tuple[str, TaskSpec, int]]:
    """The 18-clip training corpus: 3 shapes x (3 clean + 3 noisy) clips.
    Returns (name, task, seed) triples."""
    shapes = {
        "circle": (Circle(0.03), 0.03),
        "square": (make_box(0.05, 0.05), 0.025),
        "bar": (make_box(0.08, 0.015), 0.0075),
    }
    variants = [
        (-0.05, 0.12, 0.10),
        (0.00, -0.10, 0.08),
        (0.04, 0.10, 0.12),
    ]
    # the demonstrator snaps its fingers shut far faster than the robot's
    # damped actuators can follow (actuation mismatch); matching its contact
    # timing requires closing ahead of the reference
    durations = {"approach": 1.2, "close": 7.0 / 30.0, "carry": 1.5,
                 "place": 0.5, "retreat": 17.0 / 30.0}
    out = []
    seed = 1000
    for sname, (shape, rest) in shapes.items():
        for noisy in (False, True):
            for vi, (x0, dx, lift) in enumerate(variants):
                task = TaskSpec(
                    shape=shape,
                    start_pose=np.array([x0, rest, 0.0]),
                    goal_pose=np.array([x0 + dx, rest, 0.0]),
                    lift_height=lift,
                    jitter=0.003 if noisy else 0.0,
                    pen_bias=0.003 if noisy else 0.0,
                    durations=dict(durations),
                )
                tag = "noisy" if noisy else "clean"
                out.append((f"{sname}_{tag}_{vi}", task, seed))
                seed += 1
    return out


def generate_corpus(rng_seed: int = 0) -> list[ReferenceClip]:
    clips = []
    for name, task, seed in corpus_tasks():
        clip = generate_demo(task, np.random.default_rng(seed + rng_seed))
        clip.name = name
        clips.append(clip)
    return clips
