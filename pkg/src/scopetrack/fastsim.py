"""JIT-compiled control-step kernel (numba) mirroring sim.BatchSim's numpy
substep exactly: same force model, same integration order. The numpy path
stays available as the readable reference; tests cross-check the two.

All shape data arrives pre-scaled per env; polygons are padded to a common
vertex count with `nverts` giving the live count.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TWO_PI = 2.0 * np.pi


@njit(cache=True, inline="always")
def _wrap_s(x):
    w = (x + np.pi) % TWO_PI - np.pi
    if w == -np.pi:
        return np.pi
    return w


@njit(cache=True)
def _fk_env(e, wrist, wristd, q, qd, link_pos, link_ang, link_vel, link_angvel,
            parent, joint_origin):
    L = link_pos.shape[1]
    link_ang[e, 0] = wrist[e, 2]
    link_pos[e, 0, 0] = wrist[e, 0]
    link_pos[e, 0, 1] = wrist[e, 1]
    link_angvel[e, 0] = wristd[e, 2]
    link_vel[e, 0, 0] = wristd[e, 0]
    link_vel[e, 0, 1] = wristd[e, 1]
    for l in range(1, L):
        p = parent[l]
        ca = np.cos(link_ang[e, p])
        sa = np.sin(link_ang[e, p])
        ox = joint_origin[l, 0]
        oy = joint_origin[l, 1]
        jx = link_pos[e, p, 0] + ca * ox - sa * oy
        jy = link_pos[e, p, 1] + sa * ox + ca * oy
        rx = jx - link_pos[e, p, 0]
        ry = jy - link_pos[e, p, 1]
        link_pos[e, l, 0] = jx
        link_pos[e, l, 1] = jy
        link_vel[e, l, 0] = link_vel[e, p, 0] - link_angvel[e, p] * ry
        link_vel[e, l, 1] = link_vel[e, p, 1] + link_angvel[e, p] * rx
        link_ang[e, l] = link_ang[e, p] + q[e, l - 1]
        link_angvel[e, l] = link_angvel[e, p] + qd[e, l - 1]


@njit(cache=True)
def _point_poly(px, py, verts, normals, offsets, V):
    """Point vs convex polygon -> (sd, surf_x, surf_y, out_x, out_y)."""
    inside = True
    h_max = -1e30
    k_max = 0
    for j in range(V):
        h = px * normals[j, 0] + py * normals[j, 1] - offsets[j]
        if h > 0.0:
            inside = False
        if h > h_max:
            h_max = h
            k_max = j
    if inside:
        nx = normals[k_max, 0]
        ny = normals[k_max, 1]
        return h_max, px - h_max * nx, py - h_max * ny, nx, ny
    best_d = 1e30
    bx = 0.0
    by = 0.0
    for j in range(V):
        j1 = (j + 1) % V
        ex = verts[j1, 0] - verts[j, 0]
        ey = verts[j1, 1] - verts[j, 1]
        len2 = ex * ex + ey * ey
        if len2 < 1e-12:
            len2 = 1e-12
        t = ((px - verts[j, 0]) * ex + (py - verts[j, 1]) * ey) / len2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        cx = verts[j, 0] + t * ex
        cy = verts[j, 1] + t * ey
        dx = px - cx
        dy = py - cy
        d = np.sqrt(dx * dx + dy * dy)
        if d < best_d:
            best_d = d
            bx = cx
            by = cy
    dd = best_d if best_d > 1e-12 else 1e-12
    return best_d, bx, by, (px - bx) / dd, (py - by) / dd


@njit(cache=True)
def _capsule_poly(ax, ay, bx, by, verts, normals, offsets, centroid, V):
    """Segment center-line vs convex polygon via candidate points."""
    abx = bx - ax
    aby = by - ay
    len2 = abx * abx + aby * aby
    if len2 < 1e-12:
        len2 = 1e-12
    best_sd = 1e30
    bsx = 0.0
    bsy = 0.0
    box = 1.0
    boy = 0.0
    # candidates: t = 0, 1, centroid-closest, per-edge seg-seg closest
    for c in range(3 + V):
        if c == 0:
            t = 0.0
        elif c == 1:
            t = 1.0
        elif c == 2:
            t = ((centroid[0] - ax) * abx + (centroid[1] - ay) * aby) / len2
        else:
            j = c - 3
            j1 = (j + 1) % V
            ex = verts[j1, 0] - verts[j, 0]
            ey = verts[j1, 1] - verts[j, 1]
            e22 = ex * ex + ey * ey
            if e22 < 1e-12:
                e22 = 1e-12
            rx = ax - verts[j, 0]
            ry = ay - verts[j, 1]
            f = ex * rx + ey * ry
            cc = abx * rx + aby * ry
            bb = abx * ex + aby * ey
            denom = len2 * e22 - bb * bb
            if denom < 1e-12:
                denom = 1e-12
            s = (bb * f - cc * e22) / denom
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
            te = (bb * s + f) / e22
            if te < 0.0:
                te = 0.0
            elif te > 1.0:
                te = 1.0
            t = (bb * te - cc) / len2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        px = ax + t * abx
        py = ay + t * aby
        sd, sx, sy, ox, oy = _point_poly(px, py, verts, normals, offsets, V)
        if sd < best_sd:
            best_sd = sd
            bsx = sx
            bsy = sy
            box = ox
            boy = oy
    return best_sd, bsx, bsy, box, boy


@njit(cache=True)
def _capsule_circle(ax, ay, bx, by, r):
    abx = bx - ax
    aby = by - ay
    len2 = abx * abx + aby * aby
    if len2 < 1e-12:
        len2 = 1e-12
    t = -(ax * abx + ay * aby) / len2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    px = ax + t * abx
    py = ay + t * aby
    d = np.sqrt(px * px + py * py)
    if d < 1e-12:
        return -r, r, 0.0, 1.0, 0.0
    ox = px / d
    oy = py / d
    return d - r, ox * r, oy * r, ox, oy


@njit(cache=True)
def control_step(
    wrist, wristd, q, qd, obj, objd,
    anchor_obj, anchor_link, anchor_active, flags,
    link_pos, link_ang, link_vel, link_angvel,
    wrist_target, q_target,
    parent, joint_origin, seg0, seg1, radius,
    joint_inertia, wrist_mass, wrist_inertia,
    kp_lin, kd_lin, kp_ang, kd_ang, eff_lin, eff_ang, eff_fin,
    kind, circ_radius, verts, nverts, normals, offsets, centroid,
    obj_mass, obj_inertia, friction, restitution,
    n_sim, substeps, dt, gravity, table_y, k_n, c_n, k_t,
):
    """One control timestep for all envs; returns max penetration seen."""
    E = wrist.shape[0]
    L = seg0.shape[0]
    J = L - 1
    max_pen = 0.0
    fq = np.zeros(J)
    seg_w = np.zeros((L, 2, 2))

    for e in range(E):
        for step in range(n_sim):
            for l in range(L):
                flags[e, l] = False
            for sub in range(substeps):
                # world segments from current FK
                for l in range(L):
                    ca = np.cos(link_ang[e, l])
                    sa = np.sin(link_ang[e, l])
                    seg_w[l, 0, 0] = link_pos[e, l, 0] + ca * seg0[l, 0] - sa * seg0[l, 1]
                    seg_w[l, 0, 1] = link_pos[e, l, 1] + sa * seg0[l, 0] + ca * seg0[l, 1]
                    seg_w[l, 1, 0] = link_pos[e, l, 0] + ca * seg1[l, 0] - sa * seg1[l, 1]
                    seg_w[l, 1, 1] = link_pos[e, l, 1] + sa * seg1[l, 0] + ca * seg1[l, 1]

                fo_x = 0.0
                fo_y = 0.0
                fo_t = 0.0
                fw_x = 0.0
                fw_y = 0.0
                fw_t = 0.0
                for j in range(J):
                    fq[j] = 0.0

                co = np.cos(obj[e, 2])
                so = np.sin(obj[e, 2])

                # hand <-> object contacts
                for l in range(L):
                    # segment endpoints in the object frame
                    dx0 = seg_w[l, 0, 0] - obj[e, 0]
                    dy0 = seg_w[l, 0, 1] - obj[e, 1]
                    dx1 = seg_w[l, 1, 0] - obj[e, 0]
                    dy1 = seg_w[l, 1, 1] - obj[e, 1]
                    lax = co * dx0 + so * dy0
                    lay = -so * dx0 + co * dy0
                    lbx = co * dx1 + so * dy1
                    lby = -so * dx1 + co * dy1
                    if kind[e] == 0:
                        sd, sx, sy, ox, oy = _capsule_circle(lax, lay, lbx, lby, circ_radius[e])
                    else:
                        sd, sx, sy, ox, oy = _capsule_poly(
                            lax, lay, lbx, lby, verts[e], normals[e], offsets[e],
                            centroid[e], nverts[e])
                    sd -= radius[l]
                    if sd >= 0.0:
                        anchor_active[e, l] = False
                        continue
                    pen = -sd
                    if pen > max_pen:
                        max_pen = pen
                    # contact point and normal in world frame
                    x = obj[e, 0] + co * sx - so * sy
                    y = obj[e, 1] + so * sx + co * sy
                    nx = -(co * ox - so * oy)
                    ny = -(so * ox + co * oy)
                    # velocities at the contact point
                    rox = x - obj[e, 0]
                    roy = y - obj[e, 1]
                    vox = objd[e, 0] - objd[e, 2] * roy
                    voy = objd[e, 1] + objd[e, 2] * rox
                    rlx = x - link_pos[e, l, 0]
                    rly = y - link_pos[e, l, 1]
                    vlx = link_vel[e, l, 0] - link_angvel[e, l] * rly
                    vly = link_vel[e, l, 1] + link_angvel[e, l] * rlx
                    vrx = vox - vlx
                    vry = voy - vly
                    v_n = nx * vrx + ny * vry
                    tx = -ny
                    ty = nx
                    v_t = tx * vrx + ty * vry
                    # effective mass along the normal
                    crw = (x - wrist[e, 0]) * ny - (y - wrist[e, 1]) * nx
                    inv_hand = 1.0 / wrist_mass + crw * crw / wrist_inertia
                    a = l
                    while a > 0:
                        crj = (x - link_pos[e, a, 0]) * ny - (y - link_pos[e, a, 1]) * nx
                        inv_hand += crj * crj / joint_inertia[a - 1]
                        a = parent[a]
                    cro = rox * ny - roy * nx
                    inv_obj = 1.0 / obj_mass[e] + cro * cro / obj_inertia[e]
                    m_eff = 1.0 / (inv_obj + inv_hand)
                    cn = c_n * (1.0 - restitution[e])
                    lim = m_eff / dt
                    if cn > lim:
                        cn = lim
                    f_n = k_n * pen - cn * v_n
                    if f_n < 0.0:
                        f_n = 0.0
                    # tangential anchor spring
                    if not anchor_active[e, l]:
                        aox = co * rox + so * roy
                        aoy = -so * rox + co * roy
                        anchor_obj[e, l, 0] = aox
                        anchor_obj[e, l, 1] = aoy
                        cll = np.cos(link_ang[e, l])
                        sll = np.sin(link_ang[e, l])
                        anchor_link[e, l, 0] = cll * rlx + sll * rly
                        anchor_link[e, l, 1] = -sll * rlx + cll * rly
                        anchor_active[e, l] = True
                        s_t = 0.0
                    else:
                        wox = obj[e, 0] + co * anchor_obj[e, l, 0] - so * anchor_obj[e, l, 1]
                        woy = obj[e, 1] + so * anchor_obj[e, l, 0] + co * anchor_obj[e, l, 1]
                        cll = np.cos(link_ang[e, l])
                        sll = np.sin(link_ang[e, l])
                        wlx = link_pos[e, l, 0] + cll * anchor_link[e, l, 0] - sll * anchor_link[e, l, 1]
                        wly = link_pos[e, l, 1] + sll * anchor_link[e, l, 0] + cll * anchor_link[e, l, 1]
                        s_t = tx * (wox - wlx) + ty * (woy - wly)
                    ct = c_n if c_n < lim else lim
                    f_t_raw = -k_t * s_t - ct * v_t
                    f_max = friction[e] * f_n
                    f_t = f_t_raw
                    if f_t > f_max:
                        f_t = f_max
                    elif f_t < -f_max:
                        f_t = -f_max
                    if f_t_raw > f_max or f_t_raw < -f_max:
                        # slip: relieve the anchor to carry exactly the clamp
                        s_new = -(f_t + ct * v_t) / k_t
                        wox = obj[e, 0] + co * anchor_obj[e, l, 0] - so * anchor_obj[e, l, 1]
                        woy = obj[e, 1] + so * anchor_obj[e, l, 0] + co * anchor_obj[e, l, 1]
                        wox -= (s_t - s_new) * tx
                        woy -= (s_t - s_new) * ty
                        dxo = wox - obj[e, 0]
                        dyo = woy - obj[e, 1]
                        anchor_obj[e, l, 0] = co * dxo + so * dyo
                        anchor_obj[e, l, 1] = -so * dxo + co * dyo
                    fx = f_n * nx + f_t * tx
                    fy = f_n * ny + f_t * ty
                    fo_x += fx
                    fo_y += fy
                    fo_t += rox * fy - roy * fx
                    fw_x -= fx
                    fw_y -= fy
                    fw_t -= (x - wrist[e, 0]) * fy - (y - wrist[e, 1]) * fx
                    a = l
                    while a > 0:
                        fq[a - 1] -= (x - link_pos[e, a, 0]) * fy - (y - link_pos[e, a, 1]) * fx
                        a = parent[a]
                    if f_n > 0.0:
                        flags[e, l] = True

                # object <-> table
                if kind[e] == 0:
                    nv = 1
                else:
                    nv = nverts[e]
                for j in range(nv):
                    if kind[e] == 0:
                        px = obj[e, 0]
                        py = obj[e, 1] - circ_radius[e]
                    else:
                        vx = verts[e, j, 0]
                        vy = verts[e, j, 1]
                        px = obj[e, 0] + co * vx - so * vy
                        py = obj[e, 1] + so * vx + co * vy
                    pen = table_y - py
                    if pen <= 0.0:
                        continue
                    if pen > max_pen:
                        max_pen = pen
                    rox = px - obj[e, 0]
                    roy = py - obj[e, 1]
                    vx_pt = objd[e, 0] - objd[e, 2] * roy
                    vy_pt = objd[e, 1] + objd[e, 2] * rox
                    inv_m = 1.0 / obj_mass[e] + rox * rox / obj_inertia[e]
                    m_eff = 1.0 / inv_m
                    lim = m_eff / dt
                    cn = c_n * (1.0 - restitution[e])
                    if cn > lim:
                        cn = lim
                    f_n = k_n * pen - cn * vy_pt
                    if f_n < 0.0:
                        f_n = 0.0
                    ct = c_n if c_n < lim else lim
                    f_t = -ct * vx_pt
                    f_max = friction[e] * f_n
                    if f_t > f_max:
                        f_t = f_max
                    elif f_t < -f_max:
                        f_t = -f_max
                    fo_x += f_t
                    fo_y += f_n
                    fo_t += rox * f_n - roy * f_t

                # hand <-> table (capsule endpoints)
                for l in range(L):
                    for endp in range(2):
                        px = seg_w[l, endp, 0]
                        py = seg_w[l, endp, 1]
                        pen = table_y - (py - radius[l])
                        if pen <= 0.0:
                            continue
                        if pen > max_pen:
                            max_pen = pen
                        rlx = px - link_pos[e, l, 0]
                        rly = py - link_pos[e, l, 1]
                        vx_pt = link_vel[e, l, 0] - link_angvel[e, l] * rly
                        vy_pt = link_vel[e, l, 1] + link_angvel[e, l] * rlx
                        crw = px - wrist[e, 0]
                        inv_hand = 1.0 / wrist_mass + crw * crw / wrist_inertia
                        a = l
                        while a > 0:
                            crj = px - link_pos[e, a, 0]
                            inv_hand += crj * crj / joint_inertia[a - 1]
                            a = parent[a]
                        m_eff = 1.0 / inv_hand
                        lim = m_eff / dt
                        cn = c_n if c_n < lim else lim
                        f_n = k_n * pen - cn * vy_pt
                        if f_n < 0.0:
                            f_n = 0.0
                        f_t = -cn * vx_pt
                        f_max = friction[e] * f_n
                        if f_t > f_max:
                            f_t = f_max
                        elif f_t < -f_max:
                            f_t = -f_max
                        fw_x += f_t
                        fw_y += f_n
                        fw_t += (px - wrist[e, 0]) * f_n - (py - wrist[e, 1]) * f_t
                        a = l
                        while a > 0:
                            fq[a - 1] += (px - link_pos[e, a, 0]) * f_n - (py - link_pos[e, a, 1]) * f_t
                            a = parent[a]

                # PD springs (clamped) + implicit damping + integration
                sx = kp_lin * (wrist_target[e, 0] - wrist[e, 0])
                sy = kp_lin * (wrist_target[e, 1] - wrist[e, 1])
                if sx > eff_lin:
                    sx = eff_lin
                elif sx < -eff_lin:
                    sx = -eff_lin
                if sy > eff_lin:
                    sy = eff_lin
                elif sy < -eff_lin:
                    sy = -eff_lin
                st = kp_ang * _wrap_s(wrist_target[e, 2] - wrist[e, 2])
                if st > eff_ang:
                    st = eff_ang
                elif st < -eff_ang:
                    st = -eff_ang
                wristd[e, 0] = (wristd[e, 0] + dt * (sx + fw_x) / wrist_mass) / (
                    1.0 + dt * kd_lin / wrist_mass)
                wristd[e, 1] = (wristd[e, 1] + dt * (sy + fw_y) / wrist_mass) / (
                    1.0 + dt * kd_lin / wrist_mass)
                wristd[e, 2] = (wristd[e, 2] + dt * (st + fw_t) / wrist_inertia) / (
                    1.0 + dt * kd_ang / wrist_inertia)
                for j in range(J):
                    sq = kp_ang * _wrap_s(q_target[e, j] - q[e, j])
                    if sq > eff_fin:
                        sq = eff_fin
                    elif sq < -eff_fin:
                        sq = -eff_fin
                    qd[e, j] = (qd[e, j] + dt * (sq + fq[j]) / joint_inertia[j]) / (
                        1.0 + dt * kd_ang / joint_inertia[j])
                objd[e, 0] += dt * fo_x / obj_mass[e]
                objd[e, 1] += dt * (fo_y / obj_mass[e] - gravity)
                objd[e, 2] += dt * fo_t / obj_inertia[e]

                wrist[e, 0] += dt * wristd[e, 0]
                wrist[e, 1] += dt * wristd[e, 1]
                wrist[e, 2] = _wrap_s(wrist[e, 2] + dt * wristd[e, 2])
                for j in range(J):
                    q[e, j] = _wrap_s(q[e, j] + dt * qd[e, j])
                obj[e, 0] += dt * objd[e, 0]
                obj[e, 1] += dt * objd[e, 1]
                obj[e, 2] = _wrap_s(obj[e, 2] + dt * objd[e, 2])
                _fk_env(e, wrist, wristd, q, qd, link_pos, link_ang, link_vel,
                        link_angvel, parent, joint_origin)
    return max_pen
