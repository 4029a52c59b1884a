import pathlib

import numpy as np
import pytest

from patchverb.geometry import (Material, Scene, _build_polygon,
                                _flip_polygon, discretize, load_scene)
from patchverb.kernel import compute_kernel, enumerate_paths

ROOT = pathlib.Path(__file__).resolve().parents[1]
SCENES = ROOT / "scenes"


@pytest.fixture(scope="session")
def scenes_dir():
    return SCENES


@pytest.fixture(scope="session")
def hallway_scene():
    return load_scene(SCENES / "hallway.json")


@pytest.fixture(scope="session")
def hallway_coarse(hallway_scene):
    """One patch per wall: N=6, M=30, kernel included."""
    patches = discretize(hallway_scene, 6.0)
    paths = enumerate_paths(patches, hallway_scene)
    kern = compute_kernel(patches, paths)
    return patches, paths, kern


def make_facing_pair(gap=1.0, reflection=0.9, scattering=0.25, size=1.0):
    """Two squares of edge ``size`` facing each other across ``gap`` (open).

    Bypasses load_scene validation on purpose: parity tests reject open
    geometry, but kernel/tracing math is well defined on it.
    """
    s = size
    verts = np.array([[0, 0, 0], [s, 0, 0], [s, s, 0], [0, s, 0],
                      [0, 0, gap], [s, 0, gap], [s, s, gap], [0, s, gap]],
                     dtype=float)
    pa = _build_polygon(0, [0, 1, 2, 3], "m", verts[[0, 1, 2, 3]])
    pb = _build_polygon(1, [4, 5, 6, 7], "m", verts[[4, 5, 6, 7]])
    if pa.normal[2] < 0:
        _flip_polygon(pa)
    if pb.normal[2] > 0:
        _flip_polygon(pb)
    mat = Material.from_json("m", {"reflection": reflection,
                                   "scattering": scattering})
    return Scene(vertices=verts, polygons=[pa, pb], materials={"m": mat},
                 source=np.array([s / 2, s / 2, 0.3 * gap]),
                 receiver=np.array([s / 2, s / 2, 0.7 * gap]))


@pytest.fixture
def facing_pair():
    return make_facing_pair()
