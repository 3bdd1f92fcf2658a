import numpy as np
import pytest

from scopetrack.shapes import (
    Circle,
    ConvexPolygon,
    circle_nearest,
    make_box,
    polygon_nearest,
    ray_capsule,
    ray_circle,
    ray_polygon,
    segment_shape_nearest,
    shape_from_json,
)


def test_circle_nearest_radial():
    sd, surf, outward = circle_nearest(1.0, np.array([0.0, 2.0]))
    assert sd == pytest.approx(1.0)
    assert np.allclose(surf, [0.0, 1.0])
    assert np.allclose(outward, [0.0, 1.0])

    sd, surf, _ = circle_nearest(1.0, np.array([3.0, 4.0]))
    assert sd == pytest.approx(4.0)
    assert np.allclose(surf - np.array([3.0, 4.0]), [-2.4, -3.2])


def test_circle_nearest_center_tiebreak():
    sd, surf, outward = circle_nearest(1.0, np.zeros(2))
    assert sd == pytest.approx(-1.0)
    assert np.allclose(surf, [1.0, 0.0])
    assert np.allclose(outward, [1.0, 0.0])


def test_polygon_nearest_outside_edge_and_vertex():
    box = make_box(2.0, 2.0)
    sd, surf, outward = polygon_nearest(box.vertices, np.array([0.0, 3.0]))
    assert sd == pytest.approx(2.0)
    assert np.allclose(surf, [0.0, 1.0])
    assert np.allclose(outward, [0.0, 1.0])
    # vertex region
    sd, surf, _ = polygon_nearest(box.vertices, np.array([2.0, 2.0]))
    assert sd == pytest.approx(np.sqrt(2.0))
    assert np.allclose(surf, [1.0, 1.0])


def test_polygon_nearest_inside():
    box = make_box(2.0, 2.0)
    sd, surf, outward = polygon_nearest(box.vertices, np.array([0.3, 0.0]))
    assert sd == pytest.approx(-0.7)
    assert np.allclose(surf, [1.0, 0.0])
    assert np.allclose(outward, [1.0, 0.0])


def test_polygon_nearest_vectorized_matches_scalar():
    box = make_box(0.08, 0.015)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.1, 0.1, size=(64, 2))
    sd_v, surf_v, out_v = polygon_nearest(box.vertices, pts)
    for i, p in enumerate(pts):
        sd, surf, out = polygon_nearest(box.vertices, p)
        assert sd_v[i] == pytest.approx(sd)
        assert np.allclose(surf_v[i], surf)
        assert np.allclose(out_v[i], out)


def test_segment_shape_nearest_circle():
    sd, on_seg, surf, outward = segment_shape_nearest(
        "circle", 0.5, np.array([-1.0, 1.0]), np.array([1.0, 1.0])
    )
    assert sd == pytest.approx(0.5)
    assert np.allclose(on_seg, [0.0, 1.0])
    assert np.allclose(surf, [0.0, 0.5])


def test_segment_shape_nearest_polygon_outside_and_crossing():
    box = make_box(1.0, 1.0)
    sd, on_seg, surf, _ = segment_shape_nearest(
        "polygon", box.vertices, np.array([-2.0, 0.8]), np.array([2.0, 0.8])
    )
    assert sd == pytest.approx(0.3)
    assert surf[1] == pytest.approx(0.5)
    # segment passing through the box: negative (penetrating) distance
    sd, _, _, _ = segment_shape_nearest(
        "polygon", box.vertices, np.array([-2.0, 0.0]), np.array([2.0, 0.0])
    )
    assert sd < 0.0


def test_ray_circle_hit_miss():
    t = ray_circle(np.array([0.0, 3.0]), np.array([0.0, -1.0]), np.zeros(2), 1.0)
    assert t == pytest.approx(2.0)
    t = ray_circle(np.array([0.0, 3.0]), np.array([0.0, 1.0]), np.zeros(2), 1.0)
    assert np.isinf(t)


def test_ray_polygon():
    box = make_box(2.0, 2.0)
    t = ray_polygon(np.array([0.0, 5.0]), np.array([0.0, -1.0]), box.vertices)
    assert t == pytest.approx(4.0)
    t = ray_polygon(np.array([5.0, 5.0]), np.array([0.0, -1.0]), box.vertices)
    assert np.isinf(t)


def test_ray_capsule():
    a = np.array([-1.0, 0.0])
    b = np.array([1.0, 0.0])
    t = ray_capsule(np.array([0.0, 2.0]), np.array([0.0, -1.0]), a, b, 0.25)
    assert t == pytest.approx(1.75)
    # side wall hit
    t = ray_capsule(np.array([-3.0, 0.1]), np.array([1.0, 0.0]), a, b, 0.25)
    assert t == pytest.approx(3.0 - 1.0 - np.sqrt(0.25**2 - 0.1**2))
    t = ray_capsule(np.array([0.0, 2.0]), np.array([0.0, 1.0]), a, b, 0.25)
    assert np.isinf(t)


def test_shape_json_round_trip():
    for shape in (Circle(0.03), make_box(0.05, 0.05)):
        back = shape_from_json(shape.to_json())
        assert type(back) is type(shape)
    with pytest.raises(ValueError):
        shape_from_json({"kind": "blob"})


def test_polygon_requires_enough_vertices():
    with pytest.raises(ValueError):
        ConvexPolygon(np.zeros((2, 2)))
