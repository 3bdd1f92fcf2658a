"""Planar rigid-body simulator.

A floating-wrist articulated hand under PD actuation (mimic-coupled distal
joints, implicit joint damping, clamped spring efforts) interacts with one
free rigid object over a table line. Contact is penalty-based: normal
spring + mass-clamped damping, Coulomb-limited tangential friction with
persistent grip anchors on hand<->object pairs.

`BatchSim` steps E environments at once on (E, ...) arrays; the
single-state `step` below wraps a batch of one. Hand DoFs use a diagonal
generalized-inertia model and are gravity-compensated; the object carries
full planar rigid-body dynamics. The contact kernels here are fused
re-derivations of the queries in `shapes`; tests cross-check the two.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import shapes as shp
from .geom import rotate, rotate_inv, wrap_angle
from .model import EnvParams, PdCommand, RobotModel, SimState

OBJ_INERTIA_FLOOR = 1e-4   # kg m^2, stabilizes thin shapes under contact
TANGENT_STIFFNESS_RATIO = 0.5  # grip anchor stiffness = ratio * contact_stiffness
_EPS = 1e-12


class NumericalInstability(RuntimeError):
    """Simulation produced non-finite state; the episode must abort."""


_KERNEL = None
_KERNEL_TRIED = False


def _numba_kernel():
    """Lazy import of the JIT control-step kernel; None if numba is absent."""
    global _KERNEL, _KERNEL_TRIED
    if not _KERNEL_TRIED:
        _KERNEL_TRIED = True
        try:
            from .fastsim import control_step
            _KERNEL = control_step
        except ImportError:
            _KERNEL = None
    return _KERNEL


def apply_mimic(model: RobotModel, actuated_targets) -> np.ndarray:
    """Expand actuated joint targets to the full per-joint target vector;
    mimic joints take coefficient * driver target. Accepts (A,) or (E, A)."""
    t = np.asarray(actuated_targets, dtype=np.float64)
    if t.shape[-1] != model.n_actuated:
        raise ValueError(f"expected {model.n_actuated} actuated targets, got {t.shape[-1]}")
    return t @ model.mimic_matrix().T


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _wrap(theta):
    """Branchless wrap to (-pi, pi]; hot path, no finiteness check."""
    w = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def _rot(c, s, v):
    """Rotate (..., 2) vectors by angles given as cos/sin arrays."""
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def _rot_inv(c, s, v):
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


# ---------------------------------------------------------------------------
# fused capsule-vs-shape kernels (local object frame)


def _capsule_circle(radius, a, b):
    """Segment center-line vs circle: (signed_dist, surface_pt, outward)."""
    ab = b - a
    len2 = np.maximum(np.sum(ab * ab, axis=-1), _EPS)
    t = np.clip(-np.sum(a * ab, axis=-1) / len2, 0.0, 1.0)
    cp = a + t[..., None] * ab
    d = np.sqrt(np.sum(cp * cp, axis=-1))
    safe = np.maximum(d, _EPS)
    outward = cp / safe[..., None]
    outward = np.where((d < _EPS)[..., None], np.array([1.0, 0.0]), outward)
    return d - radius, outward * radius, outward


class _PolyFrame:
    """Precomputed convex polygon data for the fused kernels."""

    def __init__(self, vertices: np.ndarray):
        self.v = np.asarray(vertices, dtype=np.float64)
        nxt = np.roll(self.v, -1, axis=0)
        self.edge = nxt - self.v
        n = np.stack([self.edge[:, 1], -self.edge[:, 0]], axis=-1)
        self.normals = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), _EPS)
        self.offsets = np.sum(self.normals * self.v, axis=-1)
        self.len2 = np.maximum(np.sum(self.edge * self.edge, axis=-1), _EPS)
        self.centroid = np.mean(self.v, axis=0)
        self.V = self.v.shape[0]


def _point_polygon(pf: _PolyFrame, p):
    """Point query against a precomputed polygon: (sd, surface, outward).

    `p`: (..., 2); flattens internally for fast argmin indexing.
    """
    lead = p.shape[:-1]
    p2 = p.reshape(-1, 2)
    N = p2.shape[0]
    h = p2 @ pf.normals.T - pf.offsets              # (N, V)
    inside = np.all(h <= 0.0, axis=-1)
    rel = p2[:, None, :] - pf.v                      # (N, V, 2)
    t = np.clip(np.sum(rel * pf.edge, axis=-1) / pf.len2, 0.0, 1.0)
    cp = pf.v + t[..., None] * pf.edge
    diff = p2[:, None, :] - cp
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    ar = np.arange(N)
    j = np.argmin(dist, axis=-1)
    cp_out = cp[ar, j]
    d_out = dist[ar, j]
    out_n = (p2 - cp_out) / np.maximum(d_out, _EPS)[:, None]
    k = np.argmax(h, axis=-1)
    h_in = h[ar, k]
    n_in = pf.normals[k]
    sd = np.where(inside, h_in, d_out)
    surface = np.where(inside[:, None], p2 - h_in[:, None] * n_in, cp_out)
    outward = np.where(inside[:, None], n_in, out_n)
    return sd.reshape(lead), surface.reshape(lead + (2,)), outward.reshape(lead + (2,))


def _capsule_polygon(pf: _PolyFrame, a, b):
    """Segment center-line vs polygon: (signed_dist, surface_pt, outward).

    Evaluates the point query at candidate segment points: both endpoints,
    the centroid-closest point, and the segment point nearest each edge.
    """
    ab = b - a                                       # (..., 2)
    len2 = np.maximum(np.sum(ab * ab, axis=-1), _EPS)
    tc = np.clip(np.sum((pf.centroid - a) * ab, axis=-1) / len2, 0.0, 1.0)
    # segment point nearest each polygon edge (segment-segment, vectorized over V)
    d2 = pf.edge                                     # (V, 2)
    r = a[..., None, :] - pf.v                       # (..., V, 2)
    a11 = len2[..., None]
    e22 = pf.len2
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(ab[..., None, :] * r, axis=-1)
    bb = np.sum(ab[..., None, :] * d2, axis=-1)
    denom = np.maximum(a11 * e22 - bb * bb, _EPS)
    s = np.clip((bb * f - c * e22) / denom, 0.0, 1.0)
    t_e = np.clip((bb * s + f) / e22, 0.0, 1.0)
    s = np.clip((bb * t_e - c) / a11, 0.0, 1.0)      # (..., V)

    ts = np.concatenate(
        [np.zeros_like(tc[..., None]), np.ones_like(tc[..., None]), tc[..., None], s],
        axis=-1,
    )                                                # (..., C) with C = V + 3
    pts = a[..., None, :] + ts[..., None] * ab[..., None, :]
    sd, surface, outward = _point_polygon(pf, pts)
    lead = sd.shape[:-1]
    C = sd.shape[-1]
    flat = sd.reshape(-1, C)
    ar = np.arange(flat.shape[0])
    i = np.argmin(flat, axis=-1)
    pick = lambda arr: arr.reshape(-1, C, arr.shape[-1])[ar, i].reshape(lead + (arr.shape[-1],))
    return flat[ar, i].reshape(lead), pick(surface), pick(outward)


class BatchSim:
    """Vectorized simulator over E environments sharing one robot model.

    Per-env object shapes are grouped by identical geometry so contact and
    distance kernels stay vectorized; friction/restitution/density/scale
    may vary per env.
    """

    def __init__(self, model: RobotModel, params, shapes_per_env, backend: str | None = None):
        self.model = model
        if isinstance(params, EnvParams):
            params = [params] * len(shapes_per_env)
        if len(params) != len(shapes_per_env):
            raise ValueError("params/shapes length mismatch")
        if backend is None:
            backend = "numba" if _numba_kernel() is not None else "numpy"
        if backend not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        self.E = len(shapes_per_env)
        E, L, J = self.E, model.n_links, model.n_joints
        base = params[0]
        self.base_params = base
        self.sim_dt = base.sim_timestep
        self.control_dt = base.control_timestep
        self.n_sim = base.sim_steps_per_control
        self.substeps = base.physics_substeps
        self.dt = self.sim_dt / self.substeps
        self.gravity = base.gravity
        self.table_y = base.table_y
        self.k_n = base.contact_stiffness
        self.c_n = base.contact_damping
        self.k_t = TANGENT_STIFFNESS_RATIO * base.contact_stiffness
        self.contact_offset = base.contact_offset

        self.friction = np.array([p.friction for p in params])
        self.restitution = np.array([p.restitution for p in params])
        self.density = np.array([p.density for p in params])
        self.scale = np.array([p.shape_scale for p in params])
        self.point_noise = np.array([p.point_noise for p in params])

        # group envs by object geometry
        self.shapes = list(shapes_per_env)
        self.groups = []
        seen: dict[int, int] = {}
        for i, s in enumerate(shapes_per_env):
            gid = seen.get(id(s))
            if gid is None:
                seen[id(s)] = len(self.groups)
                self.groups.append((s, [i]))
            else:
                self.groups[gid][1].append(i)
        self.groups = [
            {
                "shape": s,
                "idx": np.asarray(idx, dtype=np.intp),
                "circle": isinstance(s, shp.Circle),
                "pf": None if isinstance(s, shp.Circle) else _PolyFrame(s.vertices),
            }
            for s, idx in self.groups
        ]

        self.obj_mass = np.empty(E)
        self.obj_inertia = np.empty(E)
        for g in self.groups:
            s, idx = g["shape"], g["idx"]
            area = s.area() * self.scale[idx] ** 2
            m = self.density[idx] * area
            if g["circle"]:
                inertia = 0.5 * m * (s.radius * self.scale[idx]) ** 2
            else:
                v = s.vertices
                nxt = np.roll(v, -1, axis=0)
                cr = np.abs(_cross2(v, nxt))
                num = np.sum(cr * (np.sum(v * v, -1) + np.sum(v * nxt, -1) + np.sum(nxt * nxt, -1)))
                inertia = m * self.scale[idx] ** 2 * num / (6.0 * np.sum(cr))
            self.obj_mass[idx] = m
            self.obj_inertia[idx] = np.maximum(inertia, OBJ_INERTIA_FLOOR)
            # scaled local vertices per env for table contact (static per env)
            if not g["circle"]:
                g["scaled_verts"] = s.vertices[None, :, :] * self.scale[idx, None, None]
            else:
                g["scaled_radius"] = s.radius * self.scale[idx]

        # state
        self.wrist = np.zeros((E, 3))
        self.wristd = np.zeros((E, 3))
        self.q = np.zeros((E, J))
        self.qd = np.zeros((E, J))
        self.obj = np.zeros((E, 3))
        self.objd = np.zeros((E, 3))
        self.anchor_obj = np.zeros((E, L, 2))
        self.anchor_link = np.zeros((E, L, 2))
        self.anchor_active = np.zeros((E, L), dtype=bool)
        self.flags = np.zeros((E, L), dtype=bool)
        self.t = np.zeros(E, dtype=np.int64)
        self.nonfinite = np.zeros(E, dtype=bool)
        self.max_penetration = 0.0

        # FK caches
        self.link_pos = np.zeros((E, L, 2))
        self.link_ang = np.zeros((E, L))
        self.link_vel = np.zeros((E, L, 2))
        self.link_angvel = np.zeros((E, L))
        nk = len(model.key_joints)
        self.d_vec = np.zeros((E, nk, 2))
        self.d_sig = np.zeros((E, nk))

        m = model
        self._mimic_T = m.mimic_matrix().T
        self._wrist_mass = m.wrist_mass
        self._joint_inertia = m.joint_inertia[1:]  # aligned with q
        self._kp = np.array([m.kp_lin, m.kp_lin, m.kp_ang])
        self._kd_w = np.array([m.kd_lin, m.kd_lin, m.kd_ang])
        self._mass_w = np.array([m.wrist_mass, m.wrist_mass, m.wrist_inertia])
        self._effort_w = np.array([m.effort_lin, m.effort_lin, m.effort_ang])
        # ancestor incidence: anc[l, j] = 1 if joint j+1 lies on palm->link l chain
        anc = np.zeros((L, J))
        for l in range(L):
            for a in m.ancestor_joints(l):
                anc[l, a - 1] = 1.0
        self._anc = anc
        self._seg0 = m.link_seg[:, 0, :]
        self._seg1 = m.link_seg[:, 1, :]
        self._radius = m.link_radius

        # packed per-env shape arrays for the JIT kernel (pre-scaled)
        kinds = np.zeros(E, dtype=np.int64)
        vmax = max([3] + [g["pf"].V for g in self.groups if not g["circle"]])
        pk_radius = np.zeros(E)
        pk_verts = np.zeros((E, vmax, 2))
        pk_norm = np.zeros((E, vmax, 2))
        pk_off = np.zeros((E, vmax))
        pk_centroid = np.zeros((E, 2))
        pk_nv = np.full(E, 3, dtype=np.int64)
        for g in self.groups:
            idx = g["idx"]
            if g["circle"]:
                kinds[idx] = 0
                pk_radius[idx] = g["scaled_radius"]
            else:
                pf = g["pf"]
                kinds[idx] = 1
                pk_nv[idx] = pf.V
                pk_verts[idx, : pf.V] = pf.v[None] * self.scale[idx, None, None]
                pk_norm[idx, : pf.V] = pf.normals[None]
                pk_off[idx, : pf.V] = pf.offsets[None] * self.scale[idx, None]
                pk_centroid[idx] = pf.centroid[None] * self.scale[idx, None]
        self._pk = (kinds, pk_radius, pk_verts, pk_nv, pk_norm, pk_off, pk_centroid)
        self._dirty = False
        self._fk()
        self._refresh_distances()

    # -- state plumbing ----------------------------------------------------

    def reset_env(self, i: int, wrist, q, obj, wrist_vel=None, qd=None, obj_vel=None,
                  sync: bool = True):
        self.wrist[i] = wrist
        self.q[i] = q
        self.obj[i] = obj
        self.wristd[i] = 0.0 if wrist_vel is None else wrist_vel
        self.qd[i] = 0.0 if qd is None else qd
        self.objd[i] = 0.0 if obj_vel is None else obj_vel
        self.anchor_active[i] = False
        self.flags[i] = False
        self.t[i] = 0
        self.nonfinite[i] = False
        if sync:
            self.sync()
        else:
            self._dirty = True

    def set_state(self, i: int, state: SimState, sync: bool = True):
        self.wrist[i] = state.wrist_pose
        self.wristd[i] = state.wrist_vel
        self.q[i] = state.joint_rot
        self.qd[i] = state.joint_vel
        self.obj[i] = state.obj_pose
        self.objd[i] = state.obj_vel
        self.flags[i] = state.contact
        self.t[i] = state.t
        self.anchor_obj[i] = state.friction_anchors[:, 0]
        self.anchor_link[i] = state.friction_anchors[:, 1]
        self.anchor_active[i] = state.anchor_active
        self.nonfinite[i] = False
        if sync:
            self.sync()
        else:
            self._dirty = True

    def sync(self):
        """Refresh FK caches and distance vectors after direct state writes."""
        self._fk()
        self._refresh_distances()
        self._dirty = False

    def get_state(self, i: int) -> SimState:
        kp_pos, kp_vel, kp_angvel = self._keypoint_state()
        return SimState(
            wrist_pose=self.wrist[i].copy(),
            wrist_vel=self.wristd[i].copy(),
            joint_rot=self.q[i].copy(),
            joint_vel=self.qd[i].copy(),
            joint_pos=kp_pos[i].copy(),
            joint_lin_vel=kp_vel[i].copy(),
            joint_ang_vel=kp_angvel[i].copy(),
            obj_pose=self.obj[i].copy(),
            obj_vel=self.objd[i].copy(),
            d_vec=self.d_vec[i].copy(),
            d_sig=self.d_sig[i].copy(),
            contact=self.flags[i].copy(),
            t=int(self.t[i]),
            friction_anchors=np.stack([self.anchor_obj[i], self.anchor_link[i]], axis=1),
            anchor_active=self.anchor_active[i].copy(),
        )

    def _keypoint_state(self):
        m = self.model
        kl = m.keypoint_link
        ang = self.link_ang[:, kl]
        pos = self.link_pos[:, kl] + rotate(ang, m.keypoint_offset[None, :, :])
        vel = self.link_vel[:, kl] + self.link_angvel[:, kl, None] * _perp(pos - self.link_pos[:, kl])
        return pos, vel, self.link_angvel[:, kl]

    @property
    def keypoint_pos(self):
        pos, _, _ = self._keypoint_state()
        return pos

    # -- kinematics ---------------------------------------------------------

    def _fk(self):
        m = self.model
        self.link_ang[:, 0] = self.wrist[:, 2]
        self.link_pos[:, 0] = self.wrist[:, :2]
        self.link_angvel[:, 0] = self.wristd[:, 2]
        self.link_vel[:, 0] = self.wristd[:, :2]
        for l in range(1, m.n_links):
            p = int(m.parent[l])
            pang = self.link_ang[:, p]
            jw = self.link_pos[:, p] + rotate(pang, m.joint_origin[l])
            jv = self.link_vel[:, p] + self.link_angvel[:, p, None] * _perp(jw - self.link_pos[:, p])
            self.link_pos[:, l] = jw
            self.link_vel[:, l] = jv
            self.link_ang[:, l] = pang + self.q[:, l - 1]
            self.link_angvel[:, l] = self.link_angvel[:, p] + self.qd[:, l - 1]

    def _world_segments(self, c=None, s=None):
        if c is None:
            c, s = np.cos(self.link_ang), np.sin(self.link_ang)
        a = self.link_pos + _rot(c, s, self._seg0[None])
        b = self.link_pos + _rot(c, s, self._seg1[None])
        return a, b

    def _refresh_distances(self):
        """Joint -> nearest object surface vectors for the key joints."""
        m = self.model
        kp_pos, _, _ = self._keypoint_state()
        pts = kp_pos[:, m.key_joints]  # (E, nk, 2)
        for g in self.groups:
            idx = g["idx"]
            local = rotate_inv(self.obj[idx, None, 2], pts[idx] - self.obj[idx, None, :2])
            local = local / self.scale[idx, None, None]
            if g["circle"]:
                sd, surf, _ = shp.circle_nearest(g["shape"].radius, local)
            else:
                sd, surf, _ = _point_polygon(g["pf"], local)
            surf_w = rotate(self.obj[idx, None, 2], surf * self.scale[idx, None, None]) + self.obj[idx, None, :2]
            self.d_sig[idx] = sd * self.scale[idx, None]
            self.d_vec[idx] = surf_w - pts[idx]

    # -- dynamics -----------------------------------------------------------

    def step(self, commands: np.ndarray):
        """Advance one control timestep. `commands`: (E, 3 + n_actuated),
        wrist residual offsets first (already in physical units)."""
        cmds = np.asarray(commands, dtype=np.float64)
        if cmds.shape != (self.E, self.model.action_dim):
            raise ValueError(f"commands must have shape {(self.E, self.model.action_dim)}")
        if self._dirty:
            self.sync()
        wrist_target = self.wrist + cmds[:, :3]
        wrist_target[:, 2] = _wrap(wrist_target[:, 2])
        q_target = cmds[:, 3:] @ self._mimic_T

        if self.backend == "numba":
            m = self.model
            kinds, pk_radius, pk_verts, pk_nv, pk_norm, pk_off, pk_centroid = self._pk
            mp = _numba_kernel()(
                self.wrist, self.wristd, self.q, self.qd, self.obj, self.objd,
                self.anchor_obj, self.anchor_link, self.anchor_active, self.flags,
                self.link_pos, self.link_ang, self.link_vel, self.link_angvel,
                wrist_target, q_target,
                m.parent, m.joint_origin, self._seg0, self._seg1, self._radius,
                self._joint_inertia, self._wrist_mass, m.wrist_inertia,
                m.kp_lin, m.kd_lin, m.kp_ang, m.kd_ang,
                m.effort_lin, m.effort_ang, m.effort_finger,
                kinds, pk_radius, pk_verts, pk_nv, pk_norm, pk_off, pk_centroid,
                self.obj_mass, self.obj_inertia, self.friction, self.restitution,
                self.n_sim, self.substeps, self.dt, self.gravity, self.table_y,
                self.k_n, self.c_n, self.k_t,
            )
            if mp > self.max_penetration:
                self.max_penetration = float(mp)
        else:
            for _ in range(self.n_sim):
                self.flags[:] = False
                for _ in range(self.substeps):
                    self._substep(wrist_target, q_target)

        bad = ~(
            np.isfinite(self.wrist).all(axis=1)
            & np.isfinite(self.wristd).all(axis=1)
            & np.isfinite(self.q).all(axis=1)
            & np.isfinite(self.qd).all(axis=1)
            & np.isfinite(self.obj).all(axis=1)
            & np.isfinite(self.objd).all(axis=1)
        )
        if np.any(bad):
            # freeze corrupted envs; caller aborts those episodes
            self.nonfinite |= bad
            for arr in (self.wrist, self.wristd, self.q, self.qd, self.obj, self.objd):
                arr[bad] = np.nan_to_num(arr[bad], nan=0.0, posinf=0.0, neginf=0.0)
            self._fk()
        self._refresh_distances()
        self.t += 1

    def _substep(self, wrist_target, q_target):
        dt = self.dt
        E = self.E
        f_obj = np.zeros((E, 3))
        f_hand_w = np.zeros((E, 3))
        f_hand_q = np.zeros((E, self.model.n_joints))

        # FK caches are current on entry (refreshed after each integration)
        cl, sl = np.cos(self.link_ang), np.sin(self.link_ang)
        seg_a, seg_b = self._world_segments(cl, sl)
        self._hand_object_contacts(seg_a, seg_b, f_obj, f_hand_w, f_hand_q)
        self._object_table_contacts(f_obj)
        self._hand_table_contacts(seg_a, seg_b, f_hand_w, f_hand_q)

        # PD springs, clamped per effort limit
        dw = wrist_target - self.wrist
        dw[:, 2] = _wrap(dw[:, 2])
        spring_w = np.clip(self._kp * dw, -self._effort_w, self._effort_w)
        spring_q = np.clip(
            self.model.kp_ang * _wrap(q_target - self.q),
            -self.model.effort_finger, self.model.effort_finger,
        )

        # semi-implicit Euler, joint damping integrated implicitly
        self.wristd = (self.wristd + dt * (spring_w + f_hand_w) / self._mass_w) / (
            1.0 + dt * self._kd_w / self._mass_w
        )
        self.qd = (self.qd + dt * (spring_q + f_hand_q) / self._joint_inertia) / (
            1.0 + dt * self.model.kd_ang / self._joint_inertia
        )
        acc_x = f_obj[:, 0] / self.obj_mass
        acc_y = f_obj[:, 1] / self.obj_mass - self.gravity
        acc_t = f_obj[:, 2] / self.obj_inertia
        self.objd = self.objd + dt * np.stack([acc_x, acc_y, acc_t], axis=1)

        self.wrist = self.wrist + dt * self.wristd
        self.wrist[:, 2] = _wrap(self.wrist[:, 2])
        self.q = _wrap(self.q + dt * self.qd)
        self.obj = self.obj + dt * self.objd
        self.obj[:, 2] = _wrap(self.obj[:, 2])
        self._fk()

    def _hand_object_contacts(self, seg_a, seg_b, f_obj, f_hand_w, f_hand_q):
        dt = self.dt
        L = self.model.n_links
        for g in self.groups:
            idx = g["idx"]
            th = self.obj[idx, 2]
            co, so = np.cos(th)[:, None], np.sin(th)[:, None]
            pos = self.obj[idx, :2]
            sc = self.scale[idx]
            a_l = _rot_inv(co, so, seg_a[idx] - pos[:, None]) / sc[:, None, None]
            b_l = _rot_inv(co, so, seg_b[idx] - pos[:, None]) / sc[:, None, None]
            if g["circle"]:
                sd, surf, outward = _capsule_circle(g["shape"].radius, a_l, b_l)
            else:
                sd, surf, outward = _capsule_polygon(g["pf"], a_l, b_l)
            sd = sd * sc[:, None] - self._radius[None, :]
            active = sd < 0.0
            if not np.any(active):
                self.anchor_active[idx] = False
                continue
            x = _rot(co, so, surf * sc[:, None, None]) + pos[:, None]
            n = -_rot(co, so, outward)  # link -> object
            pen = np.maximum(-sd, 0.0)
            mp = pen.max()
            if self.max_penetration < mp:
                self.max_penetration = float(mp)

            # relative velocity at contact (object minus link surface point)
            r_obj = x - pos[:, None]
            v_obj = self.objd[idx, None, :2] + self.objd[idx, None, 2, None] * _perp(r_obj)
            v_link = self.link_vel[idx] + self.link_angvel[idx][:, :, None] * _perp(x - self.link_pos[idx])
            v_rel = v_obj - v_link
            v_n = np.sum(n * v_rel, axis=-1)
            tvec = _perp(n)
            v_t = np.sum(tvec * v_rel, axis=-1)

            # effective mass along the normal; hand side via ancestor chains
            cr_w = _cross2(x - self.wrist[idx, None, :2], n)          # (Eg, L)
            cr_j = _cross2(x[:, :, None, :] - self.link_pos[idx, None, 1:, :],
                           n[:, :, None, :])                          # (Eg, L, J)
            inv_hand = (1.0 / self._wrist_mass
                        + cr_w**2 / self.model.wrist_inertia
                        + np.einsum("elj,lj->el", cr_j**2 / self._joint_inertia, self._anc))
            inv_obj = 1.0 / self.obj_mass[idx, None] + _cross2(r_obj, n) ** 2 / self.obj_inertia[idx, None]
            m_eff = 1.0 / (inv_obj + inv_hand)

            c_n = np.minimum(self.c_n * (1.0 - self.restitution[idx, None]), m_eff / dt)
            f_n = np.where(active, np.maximum(0.0, self.k_n * pen - c_n * v_n), 0.0)

            # grip anchors: persistent tangential springs
            prev = self.anchor_active[idx]
            newly = active & ~prev
            if np.any(newly):
                e_i, l_i = np.nonzero(newly)
                gi = idx[e_i]
                self.anchor_obj[gi, l_i] = rotate_inv(self.obj[gi, 2], x[e_i, l_i] - self.obj[gi, :2])
                self.anchor_link[gi, l_i] = rotate_inv(
                    self.link_ang[gi, l_i], x[e_i, l_i] - self.link_pos[gi, l_i]
                )
            w_o = _rot(co, so, self.anchor_obj[idx]) + pos[:, None]
            cw = np.cos(self.link_ang[idx])
            sw = np.sin(self.link_ang[idx])
            w_l = _rot(cw, sw, self.anchor_link[idx]) + self.link_pos[idx]
            s_t = np.sum(tvec * (w_o - w_l), axis=-1)
            s_t = np.where(newly, 0.0, s_t)
            c_t = np.minimum(self.c_n, m_eff / dt)
            f_t_raw = -self.k_t * s_t - c_t * v_t
            f_max = self.friction[idx, None] * f_n
            f_t = np.clip(f_t_raw, -f_max, f_max)
            f_t = np.where(active, f_t, 0.0)

            # slipping: move the object-side anchor so the spring carries
            # exactly the clamped force
            slip = active & (np.abs(f_t_raw) > f_max)
            if np.any(slip):
                e_i, l_i = np.nonzero(slip)
                gi = idx[e_i]
                s_new = -(f_t[e_i, l_i] + c_t[e_i, l_i] * v_t[e_i, l_i]) / self.k_t
                w_o_new = w_o[e_i, l_i] - (s_t[e_i, l_i] - s_new)[:, None] * tvec[e_i, l_i]
                self.anchor_obj[gi, l_i] = rotate_inv(self.obj[gi, 2], w_o_new - self.obj[gi, :2])
            self.anchor_active[idx] = active

            force = f_n[..., None] * n + f_t[..., None] * tvec      # (Eg, L, 2)
            f_obj[idx, :2] += np.sum(force, axis=1)
            f_obj[idx, 2] += np.sum(_cross2(r_obj, force), axis=1)
            # reaction on the hand through the contact Jacobians
            f_hand_w[idx, :2] -= np.sum(force, axis=1)
            f_hand_w[idx, 2] -= np.sum(_cross2(x - self.wrist[idx, None, :2], force), axis=1)
            tq = _cross2(x[:, :, None, :] - self.link_pos[idx, None, 1:, :],
                         force[:, :, None, :])                       # (Eg, L, J)
            f_hand_q[idx] -= np.einsum("elj,lj->ej", tq, self._anc)
            self.flags[idx] |= f_n > 0.0

    def _object_table_contacts(self, f_obj):
        dt = self.dt
        up = np.array([0.0, 1.0])
        for g in self.groups:
            idx = g["idx"]
            if g["circle"]:
                pts = self.obj[idx, None, :2].copy()
                pts[:, 0, 1] -= g["scaled_radius"]
            else:
                th = self.obj[idx, 2][:, None]
                pts = _rot(np.cos(th), np.sin(th), g["scaled_verts"]) + self.obj[idx, None, :2]
            pen = self.table_y - pts[..., 1]
            active = pen > 0.0
            if not np.any(active):
                continue
            mp = pen.max()
            if self.max_penetration < mp:
                self.max_penetration = float(mp)
            r = pts - self.obj[idx, None, :2]
            v_pt = self.objd[idx, None, :2] + self.objd[idx, None, 2, None] * _perp(r)
            inv_m = 1.0 / self.obj_mass[idx, None] + _cross2(r, up) ** 2 / self.obj_inertia[idx, None]
            m_eff = 1.0 / inv_m
            c_n = np.minimum(self.c_n * (1.0 - self.restitution[idx, None]), m_eff / dt)
            f_n = np.where(active, np.maximum(0.0, self.k_n * pen - c_n * v_pt[..., 1]), 0.0)
            c_t = np.minimum(self.c_n, m_eff / dt)
            f_t = np.clip(-c_t * v_pt[..., 0], -self.friction[idx, None] * f_n,
                          self.friction[idx, None] * f_n)
            f_obj[idx, 0] += np.sum(f_t, axis=1)
            f_obj[idx, 1] += np.sum(f_n, axis=1)
            f_obj[idx, 2] += np.sum(r[..., 0] * f_n - r[..., 1] * f_t, axis=1)

    def _hand_table_contacts(self, seg_a, seg_b, f_hand_w, f_hand_q):
        dt = self.dt
        for ends in (seg_a, seg_b):
            pen = self.table_y - (ends[..., 1] - self._radius[None, :])   # (E, L)
            any_active = pen > 0.0
            if not np.any(any_active):
                continue
            v = self.link_vel + self.link_angvel[..., None] * _perp(ends - self.link_pos)
            cr_w = _cross2(ends - self.wrist[:, None, :2], np.array([0.0, 1.0]))
            cr_j = ends[:, :, None, 0] - self.link_pos[:, None, 1:, 0]    # cross with +y
            inv_hand = (1.0 / self._wrist_mass
                        + cr_w**2 / self.model.wrist_inertia
                        + np.einsum("elj,lj->el", cr_j**2 / self._joint_inertia, self._anc))
            m_eff = 1.0 / inv_hand
            c_n = np.minimum(self.c_n, m_eff / dt)
            f_n = np.where(any_active, np.maximum(0.0, self.k_n * pen - c_n * v[..., 1]), 0.0)
            f_t = np.clip(-c_n * v[..., 0], -self.friction[:, None] * f_n,
                          self.friction[:, None] * f_n)
            force = np.stack([f_t, f_n], axis=-1)                         # (E, L, 2)
            f_hand_w[:, :2] += np.sum(force, axis=1)
            f_hand_w[:, 2] += np.sum(_cross2(ends - self.wrist[:, None, :2], force), axis=1)
            tq = _cross2(ends[:, :, None, :] - self.link_pos[:, None, 1:, :], force[:, :, None, :])
            f_hand_q += np.einsum("elj,lj->ej", tq, self._anc)

    # -- sensing ------------------------------------------------------------

    def raycast(self, camera: np.ndarray, fov: float, n_rays: int, rng=None):
        """Depth fan per env. `camera`: (E, 3) pose, facing along its angle.

        Returns (points (E, n_rays, 2), hit_mask (E, n_rays)): first-hit
        object-surface points in world coordinates with additive uniform
        noise of the per-env amplitude; rays blocked by hand links or
        missing everything are masked out.
        """
        cam = np.asarray(camera, dtype=np.float64)
        angles = cam[:, 2:3] + np.linspace(-fov / 2.0, fov / 2.0, n_rays)[None, :]
        d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (E, R, 2)
        o = np.broadcast_to(cam[:, None, :2], d.shape)

        t_obj = np.full((self.E, n_rays), np.inf)
        for g in self.groups:
            idx = g["idx"]
            if g["circle"]:
                t_obj[idx] = shp.ray_circle(
                    o[idx], d[idx], self.obj[idx, None, :2], g["scaled_radius"][:, None]
                )
            else:
                o_l = rotate_inv(self.obj[idx, None, 2], o[idx] - self.obj[idx, None, :2])
                d_l = rotate_inv(self.obj[idx, None, 2], d[idx])
                t_obj[idx] = self.scale[idx, None] * shp.ray_polygon(
                    o_l / self.scale[idx, None, None], d_l, g["shape"].vertices
                )

        seg_a, seg_b = self._world_segments()
        t_hand = np.full((self.E, n_rays), np.inf)
        for l in range(self.model.n_links):
            t_hand = np.minimum(
                t_hand,
                shp.ray_capsule(o, d, seg_a[:, None, l], seg_b[:, None, l],
                                self.model.link_radius[l]),
            )
        hit = np.isfinite(t_obj) & (t_obj < t_hand)
        pts = o + np.where(np.isfinite(t_obj), t_obj, 0.0)[..., None] * d
        if rng is not None:
            noise = rng.uniform(-1.0, 1.0, size=pts.shape) * self.point_noise[:, None, None]
            pts = pts + noise
        return pts, hit


# ---------------------------------------------------------------------------
# single-state functional surface


def _single(model, params, shape, state: SimState) -> BatchSim:
    sim = BatchSim(model, [params], [shape])
    sim.set_state(0, state)
    return sim


def step(state: SimState, cmd: PdCommand, params: EnvParams, model: RobotModel, shape) -> SimState:
    """Advance one control timestep from a state snapshot.

    Raises NumericalInstability if integration produces non-finite values.
    """
    sim = _single(model, params, shape, state)
    sim.step(cmd.vector()[None, :])
    if sim.nonfinite[0]:
        raise NumericalInstability(
            f"non-finite simulation state at t={state.t}; aborting episode"
        )
    return sim.get_state(0)


def nearest_surface_vectors(state: SimState, model: RobotModel, shape,
                            scale: float = 1.0):
    """Vectors from each key joint to the nearest object surface point plus
    signed distances (negative when the joint is inside the object)."""
    pts = state.joint_pos[model.key_joints]
    local = rotate_inv(state.obj_pose[2], pts - state.obj_pose[:2]) / scale
    if isinstance(shape, shp.Circle):
        sd, surf, _ = shp.circle_nearest(shape.radius, local)
    else:
        sd, surf, _ = shp.polygon_nearest(shape.vertices, local)
    surf_w = rotate(state.obj_pose[2], surf * scale) + state.obj_pose[:2]
    return surf_w - pts, sd * scale


def contact_flags(state: SimState, model: RobotModel) -> np.ndarray:
    """Force-based binary contact flags, one per hand rigid body, from the
    last sim step of the most recent control step."""
    return state.contact.copy()


def randomize(params: EnvParams, rng: np.random.Generator) -> EnvParams:
    """Domain randomization per the configured uniform ranges; scales apply
    to friction/restitution/density, shape scale and point-cloud noise are
    drawn absolutely. Deterministic given the generator state."""
    r = params.randomization
    draws = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in (
        ("friction_scale", r["friction_scale"]),
        ("restitution_scale", r["restitution_scale"]),
        ("density_scale", r["density_scale"]),
        ("shape_scale", r["shape_scale"]),
        ("point_noise", r["point_noise"]),
    )}
    return replace(
        params,
        friction=params.friction * draws["friction_scale"],
        restitution=params.restitution * draws["restitution_scale"],
        density=params.density * draws["density_scale"],
        shape_scale=draws["shape_scale"],
        point_noise=draws["point_noise"],
    )


def raycast_depth(state: SimState, model: RobotModel, shape, camera, fov: float,
                  n_rays: int, rng=None, params: EnvParams | None = None) -> np.ndarray:
    """First-hit object-surface points for a fan of rays from `camera`
    (a geom.Pose2 or (3,) pose array). Occluded surfaces are absent; hand
    hits block the object; returns an (N, 2) array of world points."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    cam = np.asarray([camera.x, camera.y, camera.theta]) if hasattr(camera, "theta") \
        else np.asarray(camera, dtype=np.float64)
    p = params if params is not None else EnvParams()
    if shape is None:
        return np.zeros((0, 2))
    sim = _single(model, p, shape, state)
    pts, hit = sim.raycast(cam[None, :], fov, n_rays, rng=rng)
    return pts[0][hit[0]]
