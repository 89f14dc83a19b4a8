"""Arena shapes, area normalization, containment and agent placement.

All lengths are millimeters; every arena is centered on its centroid.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import shapely
from shapely.affinity import scale as _scale, translate as _translate
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union

ANNULUS_RATIO = 133.0 / 200.0
STAR_INNER_RATIO = 0.53
# block arrow: shaft length, shaft width, head length, head width
ARROW_DIMS = (0.55, 1.1, 1.0, 2.0)
# stop sign: regular octagon (circumradius 1) on a post (length, width)
STOP_POST = (1.0, 0.3)
CIRCLE_SEGMENTS = 256


class ShapeKind(str, enum.Enum):
    DISK = "Disk"
    SQUARE = "Square"
    ARROW = "Arrow"
    STAR = "Star"
    TRIANGLE = "Triangle"
    STOP = "Stop"
    ANNULUS = "Annulus"

    @property
    def color(self) -> str:
        return SHAPE_COLORS[self]

    @classmethod
    def parse(cls, name: "str | ShapeKind") -> "ShapeKind":
        if isinstance(name, cls):
            return name
        for kind in cls:
            if kind.value.lower() == str(name).strip().lower():
                return kind
        raise ValueError(f"unknown shape kind: {name!r}")


SHAPE_COLORS = {
    ShapeKind.DISK: "cyan",
    ShapeKind.SQUARE: "orange",
    ShapeKind.ARROW: "green",
    ShapeKind.STAR: "red",
    ShapeKind.TRIANGLE: "gold",
    ShapeKind.STOP: "brown",
    ShapeKind.ANNULUS: "violet",
}


def _star_template(ratio=STAR_INNER_RATIO, points=5):
    verts = []
    for i in range(2 * points):
        r = 1.0 if i % 2 == 0 else ratio
        th = math.pi / 2 + i * math.pi / points
        verts.append((r * math.cos(th), r * math.sin(th)))
    return Polygon(verts)


def _arrow_template(dims=ARROW_DIMS):
    sl, sw, hl, hw = dims
    return Polygon([
        (0.0, -sw / 2), (sl, -sw / 2), (sl, -hw / 2), (sl + hl, 0.0),
        (sl, hw / 2), (sl, sw / 2), (0.0, sw / 2),
    ])


def _stop_template(post=STOP_POST):
    octagon = Polygon([
        (math.cos(math.pi / 8 + i * math.pi / 4), math.sin(math.pi / 8 + i * math.pi / 4))
        for i in range(8)
    ])
    length, width = post
    bottom = -math.cos(math.pi / 8)
    # post overlaps the octagon slightly so the union is a single simple polygon
    pole = Polygon([(-width / 2, bottom - length), (width / 2, bottom - length),
                    (width / 2, bottom + 0.05), (-width / 2, bottom + 0.05)])
    return unary_union([octagon, pole])


def _polygon_template(kind: ShapeKind) -> Polygon:
    if kind is ShapeKind.SQUARE:
        return Polygon([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)])
    if kind is ShapeKind.TRIANGLE:
        return Polygon([(0.0, 0.0), (1.0, 0.0), (0.5, math.sqrt(3) / 2)])
    if kind is ShapeKind.STAR:
        return _star_template()
    if kind is ShapeKind.ARROW:
        return _arrow_template()
    if kind is ShapeKind.STOP:
        return _stop_template()
    raise ValueError(f"{kind} has no polygon template")


@dataclass(frozen=True)
class Arena:
    """A normalized arena.

    ``scale`` is the isotropic factor applied to the unit template: the radius for
    disks, the outer radius for annuli, and the polygon scale factor otherwise.
    """

    kind: ShapeKind
    surface: float
    scale: float
    vertices: tuple = ()
    inner_radius: float = 0.0

    @property
    def outer_radius(self) -> float:
        return self.scale

    @property
    def is_analytic(self) -> bool:
        return self.kind in (ShapeKind.DISK, ShapeKind.ANNULUS)

    @property
    def area(self) -> float:
        if self.kind is ShapeKind.DISK:
            return math.pi * self.scale ** 2
        if self.kind is ShapeKind.ANNULUS:
            return math.pi * (self.scale ** 2 - self.inner_radius ** 2)
        return abs(Polygon(self.vertices).area)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        if self.is_analytic:
            r = self.scale
            return (-r, -r, r, r)
        v = np.asarray(self.vertices)
        return (v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    @cached_property
    def polygon(self):
        """Shapely geometry; circles are approximated by 256-gons."""
        if self.kind is ShapeKind.DISK:
            return Point(0, 0).buffer(self.scale, quad_segs=CIRCLE_SEGMENTS // 4)
        if self.kind is ShapeKind.ANNULUS:
            outer = Point(0, 0).buffer(self.scale, quad_segs=CIRCLE_SEGMENTS // 4)
            inner = Point(0, 0).buffer(self.inner_radius, quad_segs=CIRCLE_SEGMENTS // 4)
            return outer.difference(inner)
        return Polygon(self.vertices)

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        """Vectorized strict-interior test.

        With ``margin > 0`` a point must also be at least ``margin`` away from the
        boundary (used for agent bodies of radius ``margin``).
        """
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        x, y = p[:, 0], p[:, 1]
        if self.is_analytic:
            r = np.hypot(x, y)
            inside = r < self.scale - margin
            if self.kind is ShapeKind.ANNULUS:
                inside &= r > self.inner_radius + margin
        else:
            inside = shapely.contains_xy(self.polygon, x, y)
            if margin > 0 and inside.any():
                pts = shapely.points(p[inside])
                inside[inside] = shapely.distance(self._boundary, pts) >= margin
        return bool(inside[0]) if single else inside

    @property
    def _boundary(self):
        if "_boundary_cache" not in self.__dict__:
            b = self.polygon.boundary
            shapely.prepare(b)
            self.__dict__["_boundary_cache"] = b
        return self.__dict__["_boundary_cache"]

    def scaled(self, factor: float) -> "Arena":
        return Arena(self.kind, self.surface * factor ** 2, self.scale * factor,
                     tuple((x * factor, y * factor) for x, y in self.vertices),
                     self.inner_radius * factor)

    def to_json(self) -> dict:
        params: dict = {"scale_mm": self.scale}
        if self.kind is ShapeKind.DISK:
            params = {"radius_mm": self.scale}
        elif self.kind is ShapeKind.ANNULUS:
            params = {"outer_radius_mm": self.scale, "inner_radius_mm": self.inner_radius}
        else:
            params["vertices_mm"] = [list(v) for v in self.vertices]
        return {"kind": self.kind.value, "surface_mm2": self.surface, "params": params}

    @classmethod
    def from_json(cls, data: dict) -> "Arena":
        return make_arena(ShapeKind.parse(data["kind"]), float(data["surface_mm2"]))


def make_arena(kind: ShapeKind | str, surface: float) -> Arena:
    """Build ``kind`` scaled isotropically to have area ``surface`` (mm^2)."""
    kind = ShapeKind.parse(kind)
    if not surface > 0:
        raise ValueError("surface must be positive")
    if kind is ShapeKind.DISK:
        return Arena(kind, surface, math.sqrt(surface / math.pi))
    if kind is ShapeKind.ANNULUS:
        outer = math.sqrt(surface / (math.pi * (1.0 - ANNULUS_RATIO ** 2)))
        return Arena(kind, surface, outer, inner_radius=outer * ANNULUS_RATIO)
    template = _polygon_template(kind)
    c = template.centroid
    template = _translate(template, -c.x, -c.y)
    factor = math.sqrt(surface / template.area)
    poly = _scale(template, factor, factor, origin=(0, 0))
    coords = tuple((float(x), float(y)) for x, y in list(poly.exterior.coords)[:-1])
    return Arena(kind, surface, factor, coords)


def sample_uniform(arena: Arena, n: int, rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
    """``n`` i.i.d. uniform points of the arena interior by bounding-box rejection."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x0, y0, x1, y1 = arena.bounds
    out = np.empty((0, 2))
    while len(out) < n:
        batch = max(64, int(1.6 * (n - len(out))) + 16)
        cand = np.column_stack([rng.uniform(x0, x1, batch), rng.uniform(y0, y1, batch)])
        out = np.vstack([out, cand[arena.contains(cand, margin)]])
    return out[:n]


def equidistant_placement(arena: Arena, n: int, rng: np.random.Generator,
                          n_samples: int = 100_000, max_iter: int = 100) -> np.ndarray:
    """Near-equidistant positions: k-means centroids (k = n) of uniform samples.

    Centroids falling outside a non-convex arena are snapped to the closest
    sample of their own cluster.
    """
    from sklearn.cluster import KMeans

    if n < 1:
        raise ValueError("n must be >= 1")
    samples = sample_uniform(arena, n_samples, rng)
    if n == 1:
        return samples.mean(axis=0, keepdims=True)
    km = KMeans(n_clusters=n, n_init=1, max_iter=max_iter, tol=0.0, algorithm="lloyd",
                random_state=int(rng.integers(2 ** 31 - 1)))
    labels = km.fit_predict(samples)
    centers = km.cluster_centers_.copy()
    for k in np.flatnonzero(~arena.contains(centers)):
        members = samples[labels == k]
        centers[k] = members[np.argmin(((members - centers[k]) ** 2).sum(axis=1))]
    return centers


def packed_placement(arena: Arena, n: int, agent_radius: float, gap: float = 0.5) -> np.ndarray:
    """Hexagonal packing of ``n`` discs around the arena centroid.

    Lattice sites are ranked by distance to the centroid (the origin); for the
    annulus this packs agents against the inner wall.
    """
    spacing = 2 * agent_radius + gap
    x0, y0, x1, y1 = arena.bounds
    rows = np.arange(math.floor(y0 / (spacing * math.sqrt(3) / 2)) - 1,
                     math.ceil(y1 / (spacing * math.sqrt(3) / 2)) + 2)
    cols = np.arange(math.floor(x0 / spacing) - 1, math.ceil(x1 / spacing) + 2)
    cc, rr = np.meshgrid(cols, rows)
    xs = (cc + 0.5 * (rr % 2)) * spacing
    ys = rr * spacing * math.sqrt(3) / 2
    sites = np.column_stack([xs.ravel(), ys.ravel()])
    sites = sites[arena.contains(sites, margin=agent_radius)]
    if len(sites) < n:
        raise ValueError(f"cannot pack {n} agents of radius {agent_radius} mm in {arena.kind.value}")
    order = np.lexsort((sites[:, 0], sites[:, 1], np.round(np.hypot(sites[:, 0], sites[:, 1]), 9)))
    return sites[order[:n]].copy()

