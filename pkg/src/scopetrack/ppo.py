"""On-policy training of the state-based tracker.

Parallel environments step a shared batched simulator; episodes start
from envelope-prioritized reference frames (cached states when
available), terminate per the adaptive envelope, and feed per-frame fail
statistics back into the scheduler between batches. Updates are standard
clipped-surrogate PPO with GAE on the padded step arrays.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import PolicyCheckpoint
from .config import Config
from .demos import ReferenceClip, default_keyjoint_map
from .envelope import (
    CONTACT_WINDOW,
    InitStateCache,
    Mode,
    Reason,
    TerminationEnvelope,
    update_envelope,
)
from .features import CorpusArrays, FeatureExtractor
from .model import RobotModel
from .nn import Adam, DiagGaussian, Mlp, Module, Tensor, as_tensor, minimum
from .sim import BatchSim

LOG_COLUMNS = ["iteration", "mean_total_reward", "success_rate", "mean_R_J",
               "mean_R_p_o", "mean_R_D", "mean_R_C", "mean_energy",
               "kappa_mean", "wallclock_s"]


class TrackerPolicy(Module):
    """Gaussian policy: mean MLP plus a state-independent log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden=(256, 256, 256), init_log_std: float = -1.0):
        super().__init__()
        self.net = Mlp([obs_dim, *hidden, act_dim], rng, out_scale=0.01, prefix="pi")
        for k, v in self.net.parameters().items():
            self._params[k] = v
        self.log_std = self.add_param("pi.log_std", np.full(act_dim, init_log_std))
        self.obs_dim = obs_dim
        self.act_dim = act_dim

    def dist(self, obs) -> DiagGaussian:
        return DiagGaussian(self.net(obs), self.log_std)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs).data


class ValueNet(Module):
    def __init__(self, obs_dim: int, rng: np.random.Generator, hidden=(256, 256, 256)):
        super().__init__()
        self.net = Mlp([obs_dim, *hidden, 1], rng, prefix="vf")
        for k, v in self.net.parameters().items():
            self._params[k] = v

    def __call__(self, obs):
        return self.net(obs)

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs).data[..., 0]


@dataclass
class RolloutBatch:
    """Step-major arrays (horizon, n_envs, ...) from one collection pass."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    reasons: np.ndarray            # Reason values as objects, step-major
    frames: np.ndarray
    bootstrap: np.ndarray          # (n_envs,) value of the state after the last step
    components: np.ndarray         # (H, E, 6) matching components
    energies: np.ndarray           # (H, E)
    episodes_ended: int = 0
    episodes_succeeded: int = 0

    def __post_init__(self):
        H, E = self.rewards.shape
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite rewards in batch")
        assert self.obs.shape[:2] == (H, E)


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimation over step-major arrays (H, E) (or
    (H,) vectors); returns (advantages, returns)."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    squeeze = r.ndim == 1
    if squeeze:
        r, v, d = r[:, None], v[:, None], d[:, None]
        bootstrap = np.atleast_1d(np.asarray(bootstrap, dtype=np.float64))
    H, E = r.shape
    adv = np.zeros((H, E))
    nxt = np.asarray(bootstrap, dtype=np.float64)
    gae_acc = np.zeros(E)
    for tt in range(H - 1, -1, -1):
        live = ~d[tt]
        delta = r[tt] + gamma * nxt * live - v[tt]
        gae_acc = delta + gamma * lam * live * gae_acc
        adv[tt] = gae_acc
        nxt = v[tt]
    ret = adv + v
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


class Trainer:
    """Environment loop + PPO optimization for one corpus."""

    def __init__(self, cfg: Config, clips: list[ReferenceClip], seed: int,
                 adaptive: bool | None = None):
        self.cfg = cfg
        self.clips = clips
        self.model: RobotModel = cfg.robot
        self.kmap = default_keyjoint_map(self.model)
        self.corpus = CorpusArrays(clips, self.kmap, cfg.reward)
        self.fx = FeatureExtractor(self.model, self.corpus, cfg.reward,
                                   ks=cfg.ppo.horizon_set)
        self.adaptive = cfg.rse.adaptive if adaptive is None else adaptive

        ss = np.random.SeedSequence(seed)
        s_policy, s_env, s_act, s_shuffle = [np.random.default_rng(s) for s in ss.spawn(4)]
        self.rng_env = s_env
        self.rng_act = s_act
        self.rng_shuffle = s_shuffle

        E = cfg.ppo.n_envs
        self.E = E
        self.env_clip = np.array([i % len(clips) for i in range(E)], dtype=np.int64)
        shapes = [clips[c].shape for c in self.env_clip]
        self.sim = BatchSim(self.model, cfg.env, shapes)

        self.policy = TrackerPolicy(self.fx.obs_dim, self.model.action_dim, s_policy,
                                    init_log_std=cfg.ppo.init_log_std)
        self.value = ValueNet(self.fx.obs_dim, s_policy)
        self.opt = Adam([self.policy, self.value], lr=cfg.ppo.lr)
        self.bounds = np.asarray(cfg.ppo.action_bounds, dtype=np.float64)

        mode = Mode(cfg.rse.mode)
        self.envelopes = [
            TerminationEnvelope(n_frames=len(c), kappa_init=np.asarray(cfg.rse.kappa_init),
                                mode=mode, rho=cfg.rse.rho, window=cfg.rse.window)
            for c in clips
        ]
        if not self.adaptive:
            for env in self.envelopes:
                env.kappa[:] = env.kappa_init[:, None]
        self.caches = [InitStateCache(n_frames=len(c), capacity=cfg.rse.cache_capacity,
                                      threshold=cfg.rse.cache_threshold,
                                      eps_priority=cfg.rse.eps_priority)
                       for c in clips]
        self._kappa_flat = self._stack_kappa()

        # per-env episode bookkeeping
        self.env_t = np.zeros(E, dtype=np.int64)
        self.start_frame = np.zeros(E, dtype=np.int64)
        self.mismatch_run = np.zeros(E, dtype=np.int64)
        self.prev_cmd = np.zeros((E, self.model.action_dim))
        self.prev_vel = np.zeros((E, 3 + self.model.n_joints))
        self.steps_since_cache = np.zeros(E, dtype=np.int64)
        for i in range(E):
            self._reset_env(i)
        self.sim.sync()

    # -- plumbing -------------------------------------------------------------

    def _stack_kappa(self) -> np.ndarray:
        return np.concatenate([e.kappa for e in self.envelopes], axis=1)

    def _reset_env(self, i: int):
        c = int(self.env_clip[i])
        frame, _ = self.caches[c].sample_init(
            self.envelopes[c], self.rng_env, self.clips[c], self.model,
            sim=self.sim, env_index=i)
        self.env_t[i] = frame
        self.start_frame[i] = frame
        self.mismatch_run[i] = 0
        self.prev_cmd[i] = 0.0
        self.prev_vel[i] = np.concatenate([self.sim.wristd[i], self.sim.qd[i]])
        self.steps_since_cache[i] = 0

    def _joint_vel(self) -> np.ndarray:
        return np.concatenate([self.sim.wristd, self.sim.qd], axis=1)

    def commands(self, actions: np.ndarray) -> np.ndarray:
        return np.clip(actions, -1.0, 1.0) * self.bounds[None, :]

    # -- collection -------------------------------------------------------------

    def collect(self, horizon: int) -> RolloutBatch:
        E = self.E
        cfg = self.cfg
        obs_buf = np.zeros((horizon, E, self.fx.obs_dim))
        act_buf = np.zeros((horizon, E, self.model.action_dim))
        logp_buf = np.zeros((horizon, E))
        val_buf = np.zeros((horizon, E))
        rew_buf = np.zeros((horizon, E))
        done_buf = np.zeros((horizon, E), dtype=bool)
        reason_buf = np.full((horizon, E), Reason.NONE, dtype=object)
        frame_buf = np.zeros((horizon, E), dtype=np.int64)
        comp_buf = np.zeros((horizon, E, 6))
        energy_buf = np.zeros((horizon, E))
        ended = 0
        succeeded = 0

        for h in range(horizon):
            obs = self.fx.observations(self.sim, self.env_clip, self.env_t)
            dist = self.policy.dist(obs)
            actions, _ = dist.sample(self.rng_act)
            logp = dist.logprob(actions).data
            values = self.value.values(obs)
            cmds = self.commands(actions)

            self.sim.step(cmds)
            self.env_t += 1
            t_now = self.env_t
            vel = self._joint_vel()
            acc = (vel - self.prev_vel) / self.sim.control_dt
            comps, r_energy, total, _w = self.fx.reward_terms(
                self.sim, self.env_clip, t_now, cmds, self.prev_cmd, vel, acc)

            # termination: reward criteria against the envelope, then contact
            g = self.corpus.gidx(self.env_clip, t_now)
            kap = self._kappa_flat[:, g]                      # (4, E)
            comp_mat = np.stack([comps[0], comps[2], comps[3], comps[4]])
            below = comp_mat < kap
            match = self.fx.contact_match(self.sim, self.env_clip, t_now)
            self.mismatch_run = np.where(match, 0, self.mismatch_run + 1)
            contact_fire = self.mismatch_run >= CONTACT_WINDOW
            numeric = self.sim.nonfinite.copy()
            terminated = below.any(axis=0) | contact_fire | numeric
            clip_end = t_now >= self.corpus.lengths[self.env_clip] - 1
            done = terminated | clip_end

            rew_buf[h] = np.where(numeric, 0.0, total)
            comp_buf[h] = np.stack(comps, axis=1)
            energy_buf[h] = r_energy
            obs_buf[h] = obs
            act_buf[h] = actions
            logp_buf[h] = logp
            val_buf[h] = values
            done_buf[h] = done
            frame_buf[h] = t_now

            done_idx = np.nonzero(done)[0]
            for i in done_idx:
                i = int(i)
                reason = Reason.NONE
                if numeric[i]:
                    reason = Reason.NUMERIC
                elif below[:, i].any():
                    order = (Reason.HAND_POS, Reason.OBJECT_POS,
                             Reason.OBJECT_ROT, Reason.DISTANCE)
                    reason = order[int(np.argmax(below[:, i]))]
                elif contact_fire[i]:
                    reason = Reason.CONTACT
                reason_buf[h, i] = reason
                c = int(self.env_clip[i])
                failed = bool(terminated[i])
                end_frame = min(int(t_now[i]), len(self.clips[c]) - 1)
                self.envelopes[c].n_total[self.start_frame[i]:end_frame + 1] += 1.0
                if failed:
                    self.envelopes[c].n_fail[end_frame] += 1.0
                ended += 1
                if not failed:
                    succeeded += 1
                self._reset_env(i)
            if len(done_idx):
                self.sim.sync()

            live = ~done
            self.prev_cmd[live] = cmds[live]
            self.prev_vel[live] = vel[live]
            # cache in-scope mid-rollout states for prioritized restarts
            self.steps_since_cache[live] += 1
            ripe = live & (self.steps_since_cache >= cfg.rse.cache_stride)
            for i in np.nonzero(ripe)[0]:
                i = int(i)
                c = int(self.env_clip[i])
                self.caches[c].cache_state(int(self.env_t[i]), self.sim.get_state(i), 1.0)
                self.steps_since_cache[i] = 0

        final_obs = self.fx.observations(self.sim, self.env_clip, self.env_t)
        bootstrap = self.value.values(final_obs)
        return RolloutBatch(
            obs=obs_buf, actions=act_buf, log_probs=logp_buf, values=val_buf,
            rewards=rew_buf, dones=done_buf, reasons=reason_buf, frames=frame_buf,
            bootstrap=bootstrap, components=comp_buf, energies=energy_buf,
            episodes_ended=ended, episodes_succeeded=succeeded,
        )

    def refresh_envelopes(self):
        """Scheduler pass between batches (single writer)."""
        if self.adaptive:
            for env in self.envelopes:
                update_envelope(env)
        self._kappa_flat = self._stack_kappa()

    # -- optimization ------------------------------------------------------------

    def update(self, batch: RolloutBatch) -> dict:
        cfg = self.cfg.ppo
        adv, ret = gae(batch.rewards, batch.values, batch.dones, batch.bootstrap,
                       cfg.gamma, cfg.gae_lambda)
        N = batch.obs.shape[0] * batch.obs.shape[1]
        obs = batch.obs.reshape(N, -1)
        act = batch.actions.reshape(N, -1)
        old_logp = batch.log_probs.reshape(N)
        adv = adv.reshape(N)
        ret = ret.reshape(N)
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)

        stats = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0,
                 "approx_kl": 0.0, "clip_fraction": 0.0}
        count = 0
        for _ in range(cfg.epochs):
            order = self.rng_shuffle.permutation(N)
            for start in range(0, N, cfg.minibatch):
                mb = order[start:start + cfg.minibatch]
                if len(mb) < 2:
                    continue
                dist = self.policy.dist(obs[mb])
                logp = dist.logprob(act[mb])
                ratio = (logp - old_logp[mb]).exp()
                a_mb = adv[mb]
                surr = minimum(ratio * a_mb, ratio.clip(1.0 - cfg.clip_eps,
                                                        1.0 + cfg.clip_eps) * a_mb)
                policy_loss = -surr.mean()
                v = self.value(obs[mb])
                verr = v - ret[mb][:, None]
                value_loss = verr.square().mean() * 0.5
                entropy = dist.entropy().mean()
                loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite PPO loss (policy={policy_loss.data}, value={value_loss.data})")
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()

                stats["surrogate"] += float(-policy_loss.data)
                stats["value_loss"] += float(value_loss.data)
                stats["entropy"] += float(entropy.data)
                stats["approx_kl"] += float(np.mean(old_logp[mb] - logp.data))
                stats["clip_fraction"] += float(np.mean(
                    np.abs(ratio.data - 1.0) > cfg.clip_eps))
                count += 1
        for k in stats:
            stats[k] /= max(count, 1)
        return stats

    # -- evaluation helpers (used by metrics) --------------------------------------

    def checkpoint(self, iteration: int) -> PolicyCheckpoint:
        from .config import config_to_json

        ck = PolicyCheckpoint(kind="tracker")
        ck.set_section("policy", self.policy.state_dict())
        ck.set_section("value", self.value.state_dict())
        ck.metadata = {
            "iteration": iteration,
            "obs_dim": self.fx.obs_dim,
            "action_dim": self.model.action_dim,
            "adaptive": self.adaptive,
            "config": config_to_json(self.cfg),
        }
        ck.rng_state = {
            "env": self.rng_env.bit_generator.state,
            "act": self.rng_act.bit_generator.state,
            "shuffle": self.rng_shuffle.bit_generator.state,
        }
        ck.envelopes = {c.name or str(i): e.to_json()
                        for i, (c, e) in enumerate(zip(self.clips, self.envelopes))}
        return ck


def load_tracker(ck: PolicyCheckpoint, cfg: Config):
    """Rebuild policy/value networks from a checkpoint."""
    obs_dim = int(ck.metadata["obs_dim"])
    act_dim = int(ck.metadata["action_dim"])
    rng = np.random.default_rng(0)
    policy = TrackerPolicy(obs_dim, act_dim, rng, init_log_std=cfg.ppo.init_log_std)
    policy.load_state_dict(ck.section("policy"))
    value = ValueNet(obs_dim, rng)
    value.load_state_dict(ck.section("value"))
    return policy, value


def train_tracker(cfg: Config, clips: list[ReferenceClip], seed: int,
                  out_dir=None, adaptive: bool | None = None,
                  log_every: int = 1, progress=None):
    """Full training loop; returns (checkpoint, log rows). Writes
    training_log.csv under out_dir when given."""
    if not clips:
        raise ValueError("demonstration corpus is empty")
    trainer = Trainer(cfg, clips, seed, adaptive=adaptive)
    rows = []
    t0 = time.perf_counter()
    last_success = 0.0
    for it in range(cfg.ppo.iterations):
        batch = trainer.collect(cfg.ppo.horizon)
        trainer.refresh_envelopes()
        trainer.update(batch)
        if batch.episodes_ended > 0:
            last_success = batch.episodes_succeeded / batch.episodes_ended
        comps = batch.components.reshape(-1, 6)
        row = {
            "iteration": it,
            "mean_total_reward": float(batch.rewards.mean()),
            "success_rate": last_success,
            "mean_R_J": float(comps[:, 0].mean()),
            "mean_R_p_o": float(comps[:, 2].mean()),
            "mean_R_D": float(comps[:, 4].mean()),
            "mean_R_C": float(comps[:, 5].mean()),
            "mean_energy": float(batch.energies.mean()),
            "kappa_mean": float(trainer._kappa_flat.mean()),
            "wallclock_s": time.perf_counter() - t0,
        }
        rows.append(row)
        if progress is not None and (it % log_every == 0 or it == cfg.ppo.iterations - 1):
            progress(row)
    ck = trainer.checkpoint(cfg.ppo.iterations)
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "training_log.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return ck, rows
