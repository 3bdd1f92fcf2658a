"""Planar shape queries for circles and convex polygons.

All queries work in the shape's local frame and are vectorized: `points`
arguments accept any leading shape (..., 2), circle radii broadcast, and
polygon vertex arrays may carry leading batch dims (..., V, 2).

Conventions: signed distance is negative inside a shape; `outward` is the
unit normal of the nearest surface feature pointing out of the shape. The
vector from a query point to its nearest surface point is
``-outward * signed_distance`` for exterior points and ``+outward * |sd|``
inside, i.e. always ``surface - point``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True)
class Circle:
    radius: float

    def scaled(self, s: float) -> "Circle":
        return Circle(self.radius * s)

    def area(self) -> float:
        return float(np.pi * self.radius**2)

    def to_json(self) -> dict:
        return {"kind": "circle", "radius": self.radius}


@dataclass(frozen=True)
class ConvexPolygon:
    """Convex polygon, vertices CCW in the object frame, shape (V, 2)."""

    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ValueError("ConvexPolygon needs (V>=3, 2) vertices")
        object.__setattr__(self, "vertices", v)

    def scaled(self, s: float) -> "ConvexPolygon":
        return ConvexPolygon(self.vertices * s)

    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))

    def to_json(self) -> dict:
        return {"kind": "polygon", "vertices": self.vertices.tolist()}


def make_box(width: float, height: float) -> ConvexPolygon:
    hw, hh = width / 2.0, height / 2.0
    return ConvexPolygon(np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]))


def shape_from_json(doc: dict):
    kind = doc.get("kind")
    if kind == "circle":
        return Circle(float(doc["radius"]))
    if kind == "polygon":
        return ConvexPolygon(np.asarray(doc["vertices"], dtype=np.float64))
    raise ValueError(f"unknown shape kind: {kind!r}")


# ---------------------------------------------------------------------------
# point -> nearest surface


def circle_nearest(radius, points):
    """Nearest circle surface to point(s); circle centered at local origin.

    Returns (signed_dist, surface_point, outward), each broadcast over the
    leading dims of `points`. A point exactly at the center resolves to the
    +x axis.
    """
    p = np.asarray(points, dtype=np.float64)
    r = np.asarray(radius, dtype=np.float64)
    d = np.linalg.norm(p, axis=-1)
    safe = np.maximum(d, _EPS)
    outward = p / safe[..., None]
    degenerate = d < _EPS
    if np.any(degenerate):
        outward = np.where(degenerate[..., None], np.array([1.0, 0.0]), outward)
    surface = outward * r[..., None]
    return d - r, surface, outward


def _polygon_frame(vertices):
    """Edge normals (outward for CCW vertices) and plane offsets."""
    v = np.asarray(vertices, dtype=np.float64)
    nxt = np.roll(v, -1, axis=-2)
    edge = nxt - v
    # outward normal of a CCW edge is the clockwise perpendicular
    normals = np.stack([edge[..., 1], -edge[..., 0]], axis=-1)
    normals = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), _EPS)
    offsets = np.sum(normals * v, axis=-1)
    return v, nxt, edge, normals, offsets


def polygon_nearest(vertices, points):
    """Nearest polygon surface to point(s).

    `vertices`: shared (V, 2); `points`: any leading shape (..., 2).
    Returns (signed_dist, surface_point, outward).
    """
    p = np.asarray(points, dtype=np.float64)
    v, _nxt, edge, normals, offsets = _polygon_frame(vertices)
    # plane distances (..., V)
    h = np.sum(p[..., None, :] * normals, axis=-1) - offsets
    inside = np.all(h <= 0.0, axis=-1)

    # per-edge clamped projections
    rel = p[..., None, :] - v
    edge_len2 = np.maximum(np.sum(edge * edge, axis=-1), _EPS)
    t = np.clip(np.sum(rel * edge, axis=-1) / edge_len2, 0.0, 1.0)
    cp = v + t[..., None] * edge
    diff = p[..., None, :] - cp
    dist = np.linalg.norm(diff, axis=-1)

    # outside: nearest clamped edge point
    j = np.argmin(dist, axis=-1)
    cp_out = np.take_along_axis(cp, j[..., None, None], axis=-2)[..., 0, :]
    d_out = np.take_along_axis(dist, j[..., None], axis=-1)[..., 0]
    out_normal = (p - cp_out) / np.maximum(d_out, _EPS)[..., None]

    # inside: deepest (max) plane, unclamped projection onto that edge line
    k = np.argmax(h, axis=-1)
    h_in = np.take_along_axis(h, k[..., None], axis=-1)[..., 0]
    n_in = normals[k]
    cp_in = p - h_in[..., None] * n_in

    sd = np.where(inside, h_in, d_out)
    surface = np.where(inside[..., None], cp_in, cp_out)
    outward = np.where(inside[..., None], n_in, out_normal)
    return sd, surface, outward


def shape_nearest(shape, points):
    """Dispatch point query on a shape instance (local frame)."""
    if isinstance(shape, Circle):
        return circle_nearest(shape.radius, points)
    return polygon_nearest(shape.vertices, points)


# ---------------------------------------------------------------------------
# segment -> nearest surface (capsule contact support)


def segment_shape_nearest(shape_kind, shape_data, seg_a, seg_b):
    """Closest approach between segments and a shape (local frame).

    shape_kind: "circle" (shape_data = radius, broadcastable) or "polygon"
    (shape_data = shared vertices (V, 2)). seg_a/seg_b: (..., 2).
    Returns (signed_dist, point_on_segment, surface_point, outward) where
    signed_dist is measured from the segment center-line (subtract the
    capsule radius afterwards).
    """
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    if shape_kind == "circle":
        r = np.asarray(shape_data, dtype=np.float64)
        ab = b - a
        len2 = np.maximum(np.sum(ab * ab, axis=-1), _EPS)
        t = np.clip(np.sum(-a * ab, axis=-1) / len2, 0.0, 1.0)
        cp = a + t[..., None] * ab
        sd, surface, outward = circle_nearest(r, cp)
        return sd, cp, surface, outward

    verts = shape_data
    # candidate points along the segment: endpoints, centroid-closest point,
    # and the segment point nearest each polygon edge
    v, nxt, _edge, _n, _off = _polygon_frame(verts)
    centroid = np.mean(v, axis=-2)
    ab = b - a
    len2 = np.maximum(np.sum(ab * ab, axis=-1), _EPS)
    tc = np.clip(np.sum((centroid - a) * ab, axis=-1) / len2, 0.0, 1.0)
    cand = [a, b, a + tc[..., None] * ab]
    V = v.shape[-2]
    for j in range(V):
        s_on, _t_on = _segment_segment_closest(a, b, v[..., j, :], nxt[..., j, :])
        cand.append(s_on)
    pts = np.stack(cand, axis=-2)  # (..., C, 2)
    sd, surface, outward = polygon_nearest(verts, pts)
    i = np.argmin(sd, axis=-1)
    take = lambda arr: np.take_along_axis(arr, i[..., None, None], axis=-2)[..., 0, :]
    return (
        np.take_along_axis(sd, i[..., None], axis=-1)[..., 0],
        take(pts),
        take(surface),
        take(outward),
    )


def _segment_segment_closest(p1, p2, q1, q2):
    """Closest points between segments [p1,p2] and [q1,q2] (vectorized).

    Returns (point_on_p, point_on_q).
    """
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    bb = np.sum(d1 * d2, axis=-1)
    denom = np.maximum(a * e - bb * bb, _EPS)
    s = np.clip((bb * f - c * e) / denom, 0.0, 1.0)
    t = (bb * s + f) / np.maximum(e, _EPS)
    t = np.clip(t, 0.0, 1.0)
    s = np.clip((bb * t - c) / np.maximum(a, _EPS), 0.0, 1.0)
    return p1 + s[..., None] * d1, q1 + t[..., None] * d2


# ---------------------------------------------------------------------------
# raycasting


def ray_circle(origin, direction, center, radius):
    """Smallest positive ray parameter hitting a circle, inf on miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    oc = o - np.asarray(center, dtype=np.float64)
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - np.asarray(radius) ** 2
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(hit, t, np.inf)


def ray_polygon(origin, direction, vertices):
    """Smallest positive ray parameter hitting any polygon edge, inf on miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    v, nxt, edge, _n, _off = _polygon_frame(vertices)
    # solve o + t d = v_j + u e_j for each edge
    ex, ey = edge[..., 0], edge[..., 1]
    dx, dy = d[..., None, 0], d[..., None, 1]
    det = dx * (-ey) - dy * (-ex)
    rel = v - o[..., None, :]
    rx, ry = rel[..., 0], rel[..., 1]
    safe = np.where(np.abs(det) < _EPS, np.inf, det)
    t = (rx * (-ey) - ry * (-ex)) / safe
    u = (dx * ry - dy * rx) / safe
    valid = (t > 1e-9) & (u >= 0.0) & (u <= 1.0) & np.isfinite(t)
    t = np.where(valid, t, np.inf)
    return np.min(t, axis=-1)


def ray_capsule(origin, direction, seg_a, seg_b, radius):
    """Smallest positive ray parameter hitting a capsule, inf on miss.

    The capsule is the set of points within `radius` of segment [a, b];
    the hit is found by marching the analytic pieces: both end circles and
    the two offset side walls.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    t_best = np.minimum(ray_circle(o, d, a, radius), ray_circle(o, d, b, radius))
    ab = b - a
    length = np.linalg.norm(ab, axis=-1)
    safe_len = np.maximum(length, _EPS)
    u = ab / safe_len[..., None]
    n = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    for sgn in (1.0, -1.0):
        wall_a = a + sgn * radius * n
        denom = np.sum(d * n, axis=-1)
        safe = np.where(np.abs(denom) < _EPS, np.inf, denom)
        t = np.sum((wall_a - o) * n, axis=-1) / safe
        hitp = o + t[..., None] * d
        s = np.sum((hitp - a) * u, axis=-1)
        ok = (t > 1e-9) & np.isfinite(t) & (s >= 0.0) & (s <= length)
        t_best = np.minimum(t_best, np.where(ok, t, np.inf))
    return t_best
