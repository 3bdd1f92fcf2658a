"""Adaptive termination envelopes and state-initialization caching.

Episodes are cut short when any matching reward falls below its per-frame
threshold kappa, or when contacts mismatch the reference for a full
window. Thresholds adapt between rollout batches from per-frame fail
counters; two scheduler directions are provided: FAIL_RATIO is the literal
kappa_init * N_fail / N_total rule, SUCCESS_RATIO (default) tightens as
frames stop failing, which starts training wide and narrows with observed
success. Rollouts preferentially restart from frames that still fail, with
states cached from earlier in-scope rollouts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .demos import ReferenceClip
from .model import RobotModel, SimState

CONTACT_WINDOW = 11          # frames, inclusive [t0, t0 + 10]
PRE_ONSET_FACTOR = 0.25      # sampling down-weight for approach frames
DEFAULT_EPS_PRIORITY = 0.05
DEFAULT_RHO = 0.99
DEFAULT_KAPPA_INIT = 0.5
CRITERIA = ("hand_pos", "obj_pos", "obj_rot", "dist")


class Reason(enum.Enum):
    NONE = "none"
    HAND_POS = "HAND_POS"      # (I)   R_J^h below threshold
    OBJECT_POS = "OBJECT_POS"  # (II)  R_p^o below threshold
    OBJECT_ROT = "OBJECT_ROT"  # (III) R_R^o below threshold
    DISTANCE = "DISTANCE"      # (IV)  R_D below threshold
    CONTACT = "CONTACT"        # (V)   contact mismatch over the full window
    NUMERIC = "NUMERIC"        # simulator aborted the episode


ORDERED_REASONS = (Reason.HAND_POS, Reason.OBJECT_POS, Reason.OBJECT_ROT,
                   Reason.DISTANCE, Reason.CONTACT)


class Mode(enum.Enum):
    FAIL_RATIO = "fail_ratio"        # kappa = kappa_init * N_fail / N_total
    SUCCESS_RATIO = "success_ratio"  # kappa = kappa_init * (1 - N_fail / N_total)


@dataclass
class TerminationEnvelope:
    """Per-frame thresholds and rollout statistics for one clip."""

    n_frames: int
    kappa_init: np.ndarray = field(default_factory=lambda: np.full(4, DEFAULT_KAPPA_INIT))
    mode: Mode = Mode.SUCCESS_RATIO
    rho: float = DEFAULT_RHO
    window: int = CONTACT_WINDOW
    kappa: np.ndarray = None      # (4, T)
    n_fail: np.ndarray = None     # (T,)
    n_total: np.ndarray = None    # (T,)

    def __post_init__(self):
        self.kappa_init = np.asarray(self.kappa_init, dtype=np.float64)
        if self.kappa_init.shape != (4,):
            raise ValueError("kappa_init needs one entry per reward criterion")
        if self.window < 1:
            raise ValueError("contact window must be >= 1")
        if self.kappa is None:
            self.kappa = np.zeros((4, self.n_frames))
        else:
            self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.n_fail is None:
            self.n_fail = np.zeros(self.n_frames)
        else:
            self.n_fail = np.asarray(self.n_fail, dtype=np.float64)
        if self.n_total is None:
            self.n_total = np.zeros(self.n_frames)
        else:
            self.n_total = np.asarray(self.n_total, dtype=np.float64)
        self._check()

    def _check(self):
        if np.any(self.kappa < -1e-12) or np.any(self.kappa > self.kappa_init[:, None] + 1e-12):
            raise ValueError("kappa outside [0, kappa_init]")
        if np.any(self.n_fail > self.n_total + 1e-9):
            raise ValueError("N_fail cannot exceed N_total")

    @staticmethod
    def fixed(n_frames: int, kappa_init=None) -> "TerminationEnvelope":
        """Envelope frozen at kappa = kappa_init everywhere (tightest scope;
        also the evaluation envelope when built with kappa_eval values)."""
        ki = np.full(4, DEFAULT_KAPPA_INIT) if kappa_init is None else np.asarray(kappa_init, float)
        env = TerminationEnvelope(n_frames=n_frames, kappa_init=ki)
        env.kappa = np.repeat(ki[:, None], n_frames, axis=1)
        return env

    def to_json(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "kappa_init": self.kappa_init.tolist(),
            "mode": self.mode.value,
            "rho": self.rho,
            "window": self.window,
            "kappa": self.kappa.tolist(),
            "n_fail": self.n_fail.tolist(),
            "n_total": self.n_total.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "TerminationEnvelope":
        return TerminationEnvelope(
            n_frames=int(doc["n_frames"]),
            kappa_init=doc["kappa_init"],
            mode=Mode(doc["mode"]),
            rho=float(doc["rho"]),
            window=int(doc["window"]),
            kappa=doc["kappa"],
            n_fail=doc["n_fail"],
            n_total=doc["n_total"],
        )


def check_termination(bd, envelope: TerminationEnvelope, t: int, contact_history):
    """Evaluate criteria (I)-(V) in order for frame t.

    `bd` is a RewardBreakdown (or anything with the four matching fields);
    `contact_history` holds the most recent per-frame booleans of
    (C_t == C_hat_t), newest last. Returns (terminate, Reason).
    """
    comps = (bd.r_joint_pos, bd.r_obj_pos, bd.r_obj_rot, bd.r_dist)
    for value, kap, reason in zip(comps, envelope.kappa[:, t], ORDERED_REASONS[:4]):
        if value < kap:
            return True, reason
    hist = list(contact_history)
    if len(hist) >= envelope.window and not any(hist[-envelope.window:]):
        return True, Reason.CONTACT
    return False, Reason.NONE


def record_rollout(envelope: TerminationEnvelope, frame_range, failed: bool,
                   fail_frame: int | None = None):
    """Account one rollout: N_total over the visited frames, N_fail at the
    failure frame only."""
    lo, hi = frame_range
    if lo < 0 or hi >= envelope.n_frames or lo > hi:
        raise ValueError(f"frame range {frame_range} outside the clip")
    envelope.n_total[lo:hi + 1] += 1.0
    if failed:
        if fail_frame is None or not lo <= fail_frame <= hi:
            raise ValueError("failed rollouts need a fail frame inside the range")
        envelope.n_fail[fail_frame] += 1.0


def update_envelope(envelope: TerminationEnvelope, mode: Mode | None = None,
                    decay: bool = True) -> TerminationEnvelope:
    """Refresh kappa from the counters; frames never visited keep their
    previous kappa. Counters decay by rho afterwards so the schedule keeps
    adapting."""
    m = envelope.mode if mode is None else mode
    visited = envelope.n_total > 0
    ratio = np.zeros_like(envelope.n_total)
    ratio[visited] = envelope.n_fail[visited] / envelope.n_total[visited]
    if m == Mode.FAIL_RATIO:
        target = envelope.kappa_init[:, None] * ratio[None, :]
    else:
        target = envelope.kappa_init[:, None] * (1.0 - ratio[None, :])
    envelope.kappa[:, visited] = target[:, visited]
    if decay:
        envelope.n_fail *= envelope.rho
        envelope.n_total *= envelope.rho
    envelope._check()
    return envelope


# ---------------------------------------------------------------------------
# state initialization


def initial_state_values(clip: ReferenceClip, frame: int):
    """(wrist, q, obj) for a reset at `frame`: wrist pose from the reference,
    all finger joints zero, object at its reference pose, zero velocities."""
    if len(clip) == 0:
        raise ValueError("empty clip")
    wrist = clip.wrist[frame].copy()
    obj = clip.obj[frame].copy()
    return wrist, obj


def initial_state(clip: ReferenceClip, model: RobotModel, frame: int = 0,
                  shape=None, params=None) -> SimState:
    """Full SimState for a reference-pose reset at `frame`."""
    from .model import EnvParams
    from .sim import BatchSim

    wrist, obj = initial_state_values(clip, frame)
    sim = BatchSim(model, params or EnvParams(), [shape if shape is not None else clip.shape])
    sim.reset_env(0, wrist, np.zeros(model.n_joints), obj)
    st = sim.get_state(0)
    st.t = frame
    return st


@dataclass
class InitStateCache:
    """Per-frame cache of in-scope rollout states with FIFO eviction."""

    n_frames: int
    capacity: int = 16
    threshold: float = 0.5
    eps_priority: float = DEFAULT_EPS_PRIORITY
    slots: dict = field(default_factory=dict)

    def cache_state(self, frame: int, state: SimState, quality: float):
        """Store a snapshot iff its quality clears the threshold."""
        if not 0.0 <= quality <= 1.0:
            raise ValueError("quality must be in [0, 1]")
        if quality < self.threshold:
            return
        bucket = self.slots.setdefault(frame, [])
        bucket.append(state.copy())
        if len(bucket) > self.capacity:
            bucket.pop(0)

    def priorities(self, envelope: TerminationEnvelope, grasp_onset: int) -> np.ndarray:
        p = self.eps_priority + envelope.n_fail / np.maximum(1.0, envelope.n_total)
        p[:grasp_onset] *= PRE_ONSET_FACTOR
        return p

    def sample_init(self, envelope: TerminationEnvelope, rng: np.random.Generator,
                    clip: ReferenceClip, model: RobotModel, sim=None, env_index=None):
        """Draw a start frame proportional to priority and produce a state:
        a cached snapshot when available, else the reference-pose reset.

        With `sim`/`env_index` given, resets that environment in place and
        returns (frame, None); otherwise returns (frame, SimState).
        """
        if len(clip) == 0:
            raise ValueError("empty clip")
        p = self.priorities(envelope, clip.grasp_onset)
        total = p.sum()
        if total <= 0:
            frame = int(rng.integers(0, self.n_frames))
        else:
            # inverse-cdf draw (rng.choice with probabilities is slow)
            cdf = np.cumsum(p)
            frame = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            frame = min(frame, self.n_frames - 1)
        bucket = self.slots.get(frame)
        if bucket:
            state = bucket[int(rng.integers(0, len(bucket)))]
            if sim is not None:
                sim.set_state(env_index, state, sync=False)
                sim.t[env_index] = frame
                return frame, None
            out = state.copy()
            out.t = frame
            return frame, out
        if sim is not None:
            wrist, obj = initial_state_values(clip, frame)
            sim.reset_env(env_index, wrist, np.zeros(model.n_joints), obj, sync=False)
            sim.t[env_index] = frame
            return frame, None
        return frame, initial_state(clip, model, frame)


def cache_state(cache: InitStateCache, frame: int, state: SimState, quality: float):
    cache.cache_state(frame, state, quality)


def sample_init(cache: InitStateCache, envelope: TerminationEnvelope,
                rng: np.random.Generator, clip: ReferenceClip, model: RobotModel):
    return cache.sample_init(envelope, rng, clip, model)
