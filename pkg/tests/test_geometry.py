import json

import numpy as np
import pytest

from patchverb.geometry import (Material, SceneError, discretize, eyring_t60,
                                load_scene, ray_intersect, visible)

from conftest import make_facing_pair


def test_hallway_scene(hallway_scene):
    s = hallway_scene
    assert len(s.polygons) == 6
    assert np.allclose(s.source, [1.2, 5.4, 1.2])
    assert np.allclose(s.receiver, [0.7, 0.6, 0.7])
    assert s.volume() == pytest.approx(2 * 6 * 2)
    assert s.total_area() == pytest.approx(2 * (2 * 6 + 2 * 2 + 6 * 2))
    for p in s.polygons:
        assert np.linalg.norm(p.normal) == pytest.approx(1.0)
    m = s.materials[s.polygons[0].material]
    assert m.broadband_reflection() == pytest.approx(0.9)
    assert m.scattering == pytest.approx(0.25)


def test_source_outside_rejected(scenes_dir):
    raw = json.load(open(scenes_dir / "hallway.json"))
    raw["source"]["pos"] = [10.0, 10.0, 10.0]
    with pytest.raises(SceneError, match="source.*outside"):
        load_scene(raw)


def test_nonconvex_scene(scenes_dir):
    s = load_scene(scenes_dir / "nonconvex.json")
    # C-shaped plan: 8 wall rectangles plus floor/ceiling pre-split into
    # three convex quads each (convex-face restriction)
    assert len(s.polygons) == 14
    vertical = sum(1 for p in s.polygons if abs(p.normal[2]) < 1e-9)
    assert vertical == 8
    bbox = 4.0 * 5.0 * 2.0
    assert s.volume() < bbox
    assert s.contains(s.source) and s.contains(s.receiver)


def test_material_validation():
    with pytest.raises(SceneError):
        Material.from_json("bad", {"reflection": 1.4, "scattering": 0.2})
    with pytest.raises(SceneError):
        Material.from_json("bad", {"reflection": 0.9, "scattering": -0.1})
    m = Material.from_json("ok", {"reflection": [0.9] * 8, "scattering": 0.0})
    assert m.reflection.shape == (8,)


def test_discretize_counts(hallway_scene):
    assert len(discretize(hallway_scene, 6.0)) == 6
    fine = discretize(hallway_scene, 2.0)
    assert len(fine) == 14  # 4 faces of 3 + 2 end walls
    # determinism, byte for byte
    again = discretize(hallway_scene, 2.0)
    assert fine.dumps() == again.dumps()


def test_discretize_tiling(hallway_scene):
    patches = discretize(hallway_scene, 1.5)
    per_poly = {}
    for p in patches.patches:
        per_poly[p.polygon] = per_poly.get(p.polygon, 0.0) + p.area
    for poly in hallway_scene.polygons:
        assert per_poly[poly.index] == pytest.approx(poly.area, rel=1e-6)


def test_unit_square_grid():
    sc = make_facing_pair()
    patches = discretize(sc, 0.5)
    mine = [p for p in patches.patches if p.polygon == 0]
    assert len(mine) == 4
    for p in mine:
        assert p.area == pytest.approx(0.25)


def test_sample_points(facing_pair):
    patches = discretize(facing_pair, 2.0)
    pts = patches.sample_points(0, 0.5)
    assert len(pts) == 4  # 1 m^2 at 0.5 m spacing -> 2x2 cell centers
    assert np.allclose(pts[:, 2], 0.0, atol=1e-9)
    # fallback: spacing larger than the patch -> centroid
    one = patches.sample_points(0, 5.0)
    assert len(one) == 1
    assert np.allclose(one[0], patches.patches[0].centroid)


def test_sample_points_16():
    # a 2x2 m patch at 0.5 m spacing carries 16 cell centers
    big = make_facing_pair(gap=1.0, size=2.0)
    patches = discretize(big, 10.0)
    assert len(patches.sample_points(0, 0.5)) == 16


def test_ray_intersect_hallway(hallway_scene):
    hit = ray_intersect(hallway_scene, np.array([1.0, 3.0, 1.0]),
                        np.array([0.0, 0.0, 1.0]))
    assert hit is not None
    poly, point, dist = hit
    assert dist == pytest.approx(1.0)
    assert point[2] == pytest.approx(2.0)

    poly, point, dist = ray_intersect(hallway_scene, np.array([1.0, 3.0, 1.0]),
                                      np.array([1.0, 0.0, 0.0]))
    assert dist == pytest.approx(1.0)
    assert point[0] == pytest.approx(2.0)


def test_ray_grazing_wall(hallway_scene):
    # ray lying in the x=0 wall plane must not hit that wall
    hit = ray_intersect(hallway_scene, np.array([0.0, 3.0, 1.0]),
                        np.array([0.0, 1.0, 0.0]))
    poly, point, dist = hit
    assert point[1] == pytest.approx(6.0)
    assert dist == pytest.approx(3.0)


def test_visibility(hallway_scene, scenes_dir):
    a = np.array([0.5, 3.0, 1e-6])
    b = np.array([0.5, 3.0, 2.0 - 1e-6])
    assert visible(hallway_scene, a, b)
    assert visible(hallway_scene, b, a)

    nc = load_scene(scenes_dir / "nonconvex.json")
    # points deep in the two prongs of the C are blocked by the notch
    p1 = np.array([0.2, 4.9, 1.0])
    p2 = np.array([3.8, 4.9, 1.0])
    assert nc.contains(p1) and nc.contains(p2)
    assert not visible(nc, p1, p2)
    assert visible(nc, p1, np.array([0.2, 0.5, 1.0]))


def test_visibility_symmetry(scenes_dir):
    nc = load_scene(scenes_dir / "nonconvex.json")
    rng = np.random.default_rng(3)
    pts = []
    while len(pts) < 12:
        cand = rng.random(3) * np.array([4.0, 5.0, 2.0])
        if nc.contains(cand):
            pts.append(cand)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert visible(nc, pts[i], pts[j]) == visible(nc, pts[j], pts[i])


def test_eyring(hallway_scene):
    # 0.161 V / (-S ln r) with V=24, S=56, r=0.9
    expect = 0.161 * 24.0 / (-56.0 * np.log(0.9))
    assert eyring_t60(hallway_scene) == pytest.approx(expect, rel=1e-6)
    assert expect == pytest.approx(0.655, abs=0.01)
