import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist, squareform

from spectral_swarm.geometry import (
    ANNULUS_RATIO, Arena, ShapeKind, equidistant_placement, make_arena, packed_placement, sample_uniform,
)
from oracles import polygon_area

ALL_KINDS = list(ShapeKind)
POLYGON_KINDS = [k for k in ShapeKind if k not in (ShapeKind.DISK, ShapeKind.ANNULUS)]


def test_seven_kinds_with_distinct_colors():
    assert len(ShapeKind) == 7
    colors = {k.color for k in ShapeKind}
    assert colors == {"cyan", "orange", "green", "red", "gold", "brown", "violet"}
    assert ShapeKind.ANNULUS.color == "violet"
    assert ShapeKind.DISK.color == "cyan"


def test_parse_is_case_insensitive():
    assert ShapeKind.parse("disk") is ShapeKind.DISK
    assert ShapeKind.parse(" ANNULUS ") is ShapeKind.ANNULUS
    with pytest.raises(ValueError):
        ShapeKind.parse("hexagon")


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("surface", [70000.0, 125000.0, 500000.0])
def test_area_matches_surface(kind, surface):
    arena = make_arena(kind, surface)
    assert arena.area == pytest.approx(surface, rel=1e-6)


@pytest.mark.parametrize("kind", POLYGON_KINDS)
def test_polygon_area_by_shoelace(kind):
    arena = make_arena(kind, 70000.0)
    assert polygon_area(arena.vertices) == pytest.approx(70000.0, rel=1e-6)
    assert arena.polygon.is_valid and arena.polygon.is_simple


def test_disk_radius_150():
    arena = make_arena("Disk", 70685.8)
    assert arena.outer_radius == pytest.approx(150.0, rel=1e-6)


def test_annulus_radii_200_133():
    arena = make_arena("Annulus", 70092.1)
    assert arena.outer_radius == pytest.approx(200.0, rel=1e-6)
    assert arena.inner_radius == pytest.approx(133.0, rel=1e-6)
    assert arena.inner_radius < arena.outer_radius
    assert arena.area == math.pi * (arena.outer_radius ** 2 - arena.inner_radius ** 2)


def test_square_side():
    arena = make_arena("Square", 500000.0)
    x0, y0, x1, y1 = arena.bounds
    assert x1 - x0 == pytest.approx(math.sqrt(500000.0), rel=1e-9)
    assert y1 - y0 == pytest.approx(math.sqrt(500000.0), rel=1e-9)


def test_nonpositive_surface_rejected():
    with pytest.raises(ValueError):
        make_arena("Disk", 0.0)


def test_contains_examples():
    disk = make_arena("Disk", math.pi * 150 ** 2)
    assert disk.contains((0.0, 0.0))
    annulus = make_arena("Annulus", math.pi * (200 ** 2 - 133 ** 2))
    assert not annulus.contains((0.0, 0.0))
    square = make_arena("Square", 100.0 ** 2)
    assert square.contains((49.0, 49.0))
    assert not square.contains((51.0, 0.0))


def test_contains_margin_shrinks_region():
    disk = make_arena("Disk", math.pi * 100 ** 2)
    assert disk.contains((90.0, 0.0))
    assert not disk.contains((90.0, 0.0), margin=16.5)
    square = make_arena("Square", 100.0 ** 2)
    assert square.contains((40.0, 0.0))
    assert not square.contains((40.0, 0.0), margin=16.5)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(ALL_KINDS), surface=st.floats(1e3, 1e7), a=st.floats(0.1, 10.0))
def test_scaling_invariance(kind, surface, a):
    big = make_arena(kind, a * surface)
    small = make_arena(kind, surface).scaled(math.sqrt(a))
    assert big.scale == pytest.approx(small.scale, rel=1e-9)
    assert big.inner_radius == pytest.approx(small.inner_radius, rel=1e-9, abs=1e-9)
    if big.vertices:
        np.testing.assert_allclose(np.array(big.vertices), np.array(small.vertices), rtol=1e-9, atol=1e-9 * big.scale)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_json_roundtrip(kind):
    arena = make_arena(kind, 70000.0)
    data = json.loads(json.dumps(arena.to_json()))
    assert set(data) == {"kind", "surface_mm2", "params"}
    back = Arena.from_json(data)
    assert back == arena


def test_sample_uniform_disk_inside():
    arena = make_arena("Disk", 70000.0)
    pts = sample_uniform(arena, 1000, np.random.default_rng(42))
    assert pts.shape == (1000, 2)
    assert arena.contains(pts).all()


def test_sample_uniform_annulus_avoids_hole():
    arena = make_arena("Annulus", 70000.0)
    pts = sample_uniform(arena, 1000, np.random.default_rng(1))
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert (r > arena.inner_radius).all()


def test_sample_uniform_mean_radius():
    # uniform disk: E[r] = 2R/3
    arena = make_arena("Disk", 70000.0)
    pts = sample_uniform(arena, 100000, np.random.default_rng(3))
    mean_r = np.hypot(pts[:, 0], pts[:, 1]).mean()
    assert mean_r == pytest.approx(2 * arena.outer_radius / 3, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(kind=st.sampled_from(ALL_KINDS), n=st.integers(1, 200), seed=st.integers(0, 2 ** 32 - 1))
def test_samplers_stay_inside(kind, n, seed):
    arena = make_arena(kind, 70000.0)
    pts = sample_uniform(arena, n, np.random.default_rng(seed))
    assert len(pts) == n and arena.contains(pts).all()


def test_sample_uniform_rejects_zero():
    with pytest.raises(ValueError):
        sample_uniform(make_arena("Disk", 1.0), 0, np.random.default_rng(0))


def test_equidistant_single_point_is_centroid():
    arena = make_arena("Disk", math.pi * 150 ** 2)
    pts = equidistant_placement(arena, 1, np.random.default_rng(5))
    assert np.hypot(*pts[0]) < 0.02 * 150


def test_equidistant_annulus_inside():
    arena = make_arena("Annulus", 70000.0)
    pts = equidistant_placement(arena, 25, np.random.default_rng(7), n_samples=20000)
    assert arena.contains(pts).all()


def _nn_cv(pts):
    d = squareform(pdist(pts))
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    return nn.std() / nn.mean()


def test_equidistant_more_regular_than_uniform():
    arena = make_arena("Disk", 70000.0)
    wins = 0
    for seed in range(64):
        rng = np.random.default_rng(seed)
        eq = equidistant_placement(arena, 25, rng, n_samples=20000)
        un = sample_uniform(arena, 25, rng)
        wins += _nn_cv(eq) < _nn_cv(un)
    assert wins >= 0.9 * 64


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_packed_placement_no_overlap(kind):
    arena = make_arena(kind, 500000.0)
    pts = packed_placement(arena, 300, 16.5)
    assert arena.contains(pts, margin=16.5 - 1e-9).all()
    assert pdist(pts).min() >= 33.0


def test_packed_placement_too_many():
    with pytest.raises(ValueError):
        packed_placement(make_arena("Disk", 10000.0), 100, 16.5)


def test_annulus_ratio_constant():
    assert ANNULUS_RATIO == pytest.approx(133 / 200)
