"""Scene description, boundary discretization and visibility queries.

A scene is a closed polyhedral room: planar convex polygons (non-convex walls
must be pre-split by the author), one material per polygon, a point source and
a point receiver inside the enclosure.  Polygon normals are auto-oriented to
point into the air volume, so authoring order of the vertex loops does not
matter.

Patches are produced by gridding each polygon in its own plane (rectangular
cells, clipped to the polygon) so that no patch edge exceeds ``max_edge``.
Integration sample points are cell centers of a second, finer grid on each
patch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import BAND_CENTERS_HZ, GEOM_EPS, N_BANDS, DEFAULT_SPEED_OF_SOUND

# Fixed, slightly irrational direction for the parity (inside/outside) test;
# avoids axis-aligned edge grazing in rectilinear scenes.
_PARITY_DIR = np.array([0.5373614920, 0.7174100448, 0.4437139115])
_PARITY_DIR /= np.linalg.norm(_PARITY_DIR)


class SceneError(ValueError):
    """Raised for malformed scene input; message names the offending entity."""


@dataclass(frozen=True)
class Material:
    """Surface material: energy reflection per band plus a scattering fraction.

    ``reflection`` is stored as an 8-band vector even when the input was a
    scalar; ``flat`` records whether it was scalar (broadband) input.
    """

    name: str
    reflection: np.ndarray
    scattering: float
    flat: bool = True

    @classmethod
    def from_json(cls, name: str, raw: dict) -> "Material":
        refl = raw.get("reflection")
        if refl is None:
            raise SceneError(f"material '{name}': missing 'reflection'")
        if np.isscalar(refl):
            vec = np.full(N_BANDS, float(refl))
            flat = True
        else:
            vec = np.asarray(refl, dtype=float)
            if vec.shape != (N_BANDS,):
                raise SceneError(
                    f"material '{name}': reflection must be scalar or "
                    f"{N_BANDS} band values ({[int(b) for b in BAND_CENTERS_HZ]})"
                )
            flat = False
        if np.any(vec < 0.0) or np.any(vec > 1.0):
            raise SceneError(f"material '{name}': reflection outside [0, 1]")
        scat = float(raw.get("scattering", 0.0))
        if not 0.0 <= scat <= 1.0:
            raise SceneError(f"material '{name}': scattering outside [0, 1]")
        return cls(name=name, reflection=vec, scattering=scat, flat=flat)

    def broadband_reflection(self) -> float:
        from . import BROADBAND_BAND

        return float(self.reflection[BROADBAND_BAND])


@dataclass
class _Frame:
    """Orthonormal in-plane basis (origin, u, v) with normal n = u x v."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray

    def to_2d(self, pts: np.ndarray) -> np.ndarray:
        rel = np.atleast_2d(pts) - self.origin
        return np.stack([rel @ self.u, rel @ self.v], axis=-1)

    def to_3d(self, pts2: np.ndarray) -> np.ndarray:
        pts2 = np.atleast_2d(pts2)
        return self.origin + pts2[:, :1] * self.u + pts2[:, 1:2] * self.v


@dataclass
class Polygon:
    """One planar convex face of the room boundary."""

    index: int
    vertex_ids: list
    material: str
    verts: np.ndarray = field(repr=False)
    normal: np.ndarray = field(default=None, repr=False)
    offset: float = 0.0  # plane equation: normal . x == offset
    frame: _Frame = field(default=None, repr=False)
    verts2d: np.ndarray = field(default=None, repr=False)
    area: float = 0.0
    centroid: np.ndarray = field(default=None, repr=False)


def _polygon_area_centroid_2d(verts2d: np.ndarray) -> tuple:
    x, y = verts2d[:, 0], verts2d[:, 1]
    xr, yr = np.roll(x, -1), np.roll(y, -1)
    cross = x * yr - xr * y
    area = 0.5 * float(np.sum(cross))
    if abs(area) < 1e-12:
        return 0.0, verts2d.mean(axis=0)
    cx = float(np.sum((x + xr) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yr) * cross)) / (6.0 * area)
    return area, np.array([cx, cy])


def _build_polygon(index: int, vertex_ids: list, material: str, verts: np.ndarray) -> Polygon:
    if len(vertex_ids) < 3:
        raise SceneError(f"polygon {index}: fewer than 3 vertices")
    e1 = verts[1] - verts[0]
    # Pick the third point giving the most stable normal.
    best_n, best_mag = None, 0.0
    for k in range(2, len(verts)):
        n = np.cross(e1, verts[k] - verts[0])
        mag = np.linalg.norm(n)
        if mag > best_mag:
            best_n, best_mag = n, mag
    if best_mag < 1e-12:
        raise SceneError(f"polygon {index}: degenerate (collinear vertices)")
    normal = best_n / best_mag
    offset = float(normal @ verts[0])
    # Planarity: every vertex on the plane within 1e-6 m.
    dev = np.abs(verts @ normal - offset)
    if np.max(dev) > 1e-6:
        raise SceneError(
            f"polygon {index}: non-planar (max deviation {np.max(dev):.3g} m)"
        )
    u = e1 / np.linalg.norm(e1)
    v = np.cross(normal, u)
    frame = _Frame(origin=verts[0].copy(), u=u, v=v, n=normal)
    verts2d = frame.to_2d(verts)
    # Convexity and consistent winding: all 2D cross products of consecutive
    # edges must share a sign.
    d = np.roll(verts2d, -1, axis=0) - verts2d
    cross = d[:, 0] * np.roll(d[:, 1], -1) - d[:, 1] * np.roll(d[:, 0], -1)
    scale = np.max(np.abs(verts2d)) + 1.0
    signs = cross / scale**2
    if np.any(signs < -1e-9) and np.any(signs > 1e-9):
        raise SceneError(f"polygon {index}: non-convex vertex loop")
    if np.sum(cross) < 0.0:
        # Rewind counter-clockwise in the local frame.
        verts = verts[::-1].copy()
        vertex_ids = list(vertex_ids[::-1])
        verts2d = frame.to_2d(verts)
    area, c2 = _polygon_area_centroid_2d(verts2d)
    centroid = frame.to_3d(c2[None, :])[0]
    return Polygon(
        index=index,
        vertex_ids=vertex_ids,
        material=material,
        verts=verts,
        normal=normal,
        offset=offset,
        frame=frame,
        verts2d=verts2d,
        area=abs(area),
        centroid=centroid,
    )


def _flip_polygon(poly: Polygon) -> None:
    poly.verts = poly.verts[::-1].copy()
    poly.vertex_ids = list(poly.vertex_ids[::-1])
    poly.normal = -poly.normal
    poly.offset = -poly.offset
    u = (poly.verts[1] - poly.verts[0])
    u = u / np.linalg.norm(u)
    poly.frame = _Frame(origin=poly.verts[0].copy(), u=u, v=np.cross(poly.normal, u), n=poly.normal)
    poly.verts2d = poly.frame.to_2d(poly.verts)


class _PolySoup:
    """Stacked plane/edge arrays for vectorized ray and segment queries."""

    def __init__(self, polys):
        self.polys = list(polys)
        self.normals = np.array([p.normal for p in self.polys])
        self.offsets = np.array([p.offset for p in self.polys])
        self.frames = [p.frame for p in self.polys]
        self.edges2d = []
        for p in self.polys:
            a = p.verts2d
            b = np.roll(a, -1, axis=0)
            d = b - a
            # Inward edge normals for a CCW loop.
            inward = np.stack([-d[:, 1], d[:, 0]], axis=1)
            inward /= np.linalg.norm(inward, axis=1, keepdims=True)
            self.edges2d.append((a, inward))

    def __len__(self):
        return len(self.polys)

    def _inside_2d(self, k: int, pts3: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        f = self.frames[k]
        a, inward = self.edges2d[k]
        p2 = f.to_2d(pts3)
        ok = np.ones(len(p2), dtype=bool)
        for e in range(len(a)):
            ok &= (p2 - a[e]) @ inward[e] >= -tol
        return ok

    def intersect_rays(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = GEOM_EPS):
        """First hit of each ray; returns (poly_index, t) with -1 / inf misses."""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        n_rays = len(origins)
        best_t = np.full(n_rays, np.inf)
        best_k = np.full(n_rays, -1, dtype=int)
        for k in range(len(self.polys)):
            n, d0 = self.normals[k], self.offsets[k]
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (d0 - origins @ n) / denom
            cand = (np.abs(denom) > 1e-12) & (t > t_min) & (t < best_t)
            if not np.any(cand):
                continue
            pts = origins[cand] + t[cand, None] * dirs[cand]
            inside = self._inside_2d(k, pts)
            idx = np.flatnonzero(cand)[inside]
            best_t[idx] = t[cand][inside]
            best_k[idx] = k
        return best_k, best_t

    def segments_clear(self, a: np.ndarray, b: np.ndarray, margin: float = GEOM_EPS) -> np.ndarray:
        """True where the open segment a->b is not blocked by any polygon.

        Hits within ``margin`` (in meters) of either endpoint are ignored, so
        endpoints may lie on the boundary itself.
        """
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        delta = b - a
        length = np.linalg.norm(delta, axis=1)
        ok = length > 0
        dirs = np.where(ok[:, None], delta / np.maximum(length, 1e-300)[:, None], 0.0)
        clear = np.ones(len(a), dtype=bool)
        for k in range(len(self.polys)):
            n, d0 = self.normals[k], self.offsets[k]
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (d0 - a @ n) / denom
            cand = clear & (np.abs(denom) > 1e-12) & (t > margin) & (t < length - margin)
            if not np.any(cand):
                continue
            pts = a[cand] + t[cand, None] * dirs[cand]
            blocked = self._inside_2d(k, pts)
            idx = np.flatnonzero(cand)[blocked]
            clear[idx] = False
        return clear


@dataclass
class Scene:
    vertices: np.ndarray
    polygons: list
    materials: dict
    source: np.ndarray
    receiver: np.ndarray
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND
    _soup: _PolySoup = field(default=None, repr=False)

    @property
    def soup(self) -> _PolySoup:
        if self._soup is None:
            self._soup = _PolySoup(self.polygons)
        return self._soup

    def contains(self, point: np.ndarray) -> bool:
        """Parity test: odd number of boundary crossings along a fixed ray."""
        ks, _ = _all_hits(self.soup, np.asarray(point, dtype=float))
        return len(ks) % 2 == 1

    def total_area(self) -> float:
        return float(sum(p.area for p in self.polygons))

    def volume(self) -> float:
        # Divergence theorem; our normals point into the room, hence the sign.
        s = sum((p.centroid @ p.normal) * p.area for p in self.polygons)
        return abs(s) / 3.0


def _all_hits(soup: _PolySoup, origin: np.ndarray, direction: np.ndarray = _PARITY_DIR):
    """All boundary crossings along origin + t*direction, t > eps."""
    ks, ts = [], []
    for k in range(len(soup)):
        n, d0 = soup.normals[k], soup.offsets[k]
        denom = float(direction @ n)
        if abs(denom) < 1e-12:
            continue
        t = (d0 - float(origin @ n)) / denom
        if t <= 1e-9:
            continue
        pt = origin + t * direction
        if soup._inside_2d(k, pt[None, :])[0]:
            ks.append(k)
            ts.append(t)
    return ks, ts


def load_scene(source) -> Scene:
    """Load a scene from a JSON path, file object, or already-parsed dict.

    Validates planarity, convexity, material references and that source and
    receiver are inside the enclosure.  Polygon normals are oriented to point
    into the room.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    elif hasattr(source, "read"):
        raw = json.load(source)
    else:
        raw = source

    try:
        vertices = np.asarray(raw["vertices"], dtype=float)
        poly_specs = raw["polygons"]
        mat_specs = raw["materials"]
        src = np.asarray(raw["source"]["pos"], dtype=float)
        rcv = np.asarray(raw["receiver"]["pos"], dtype=float)
    except KeyError as exc:
        raise SceneError(f"scene JSON missing key: {exc}") from exc
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise SceneError("'vertices' must be an N x 3 array")

    materials = {name: Material.from_json(name, spec) for name, spec in mat_specs.items()}

    polygons = []
    for i, spec in enumerate(poly_specs):
        ids = spec.get("verts")
        mat = spec.get("material")
        if ids is None or mat is None:
            raise SceneError(f"polygon {i}: needs 'verts' and 'material'")
        if mat not in materials:
            raise SceneError(f"polygon {i}: unknown material '{mat}'")
        if max(ids) >= len(vertices) or min(ids) < 0:
            raise SceneError(f"polygon {i}: vertex index out of range")
        polygons.append(_build_polygon(i, list(ids), mat, vertices[list(ids)]))

    scene = Scene(
        vertices=vertices,
        polygons=polygons,
        materials=materials,
        source=src,
        receiver=rcv,
        speed_of_sound=float(raw.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)),
    )

    # Orient normals into the air volume: a point nudged off the face along
    # the normal must be inside the enclosure.
    for p in scene.polygons:
        probe = p.centroid + 1e-4 * p.normal
        if not scene.contains(probe):
            _flip_polygon(p)
            scene._soup = None
            if not scene.contains(p.centroid + 1e-4 * p.normal):
                raise SceneError(f"polygon {p.index}: cannot orient (open scene?)")
    scene._soup = None

    for label, pt in (("source", src), ("receiver", rcv)):
        if not scene.contains(pt):
            raise SceneError(f"{label} at {pt.tolist()} is outside the enclosure")
    return scene


# ---------------------------------------------------------------------------
# Discretization


@dataclass
class Patch:
    index: int
    polygon: int
    material: str
    verts: np.ndarray = field(repr=False)
    verts2d: np.ndarray = field(repr=False)
    frame: _Frame = field(repr=False)
    normal: np.ndarray = field(repr=False)
    offset: float = 0.0
    area: float = 0.0
    centroid: np.ndarray = None


def _clip_convex(subject: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex CCW 2D polygon to an AABB."""
    poly = subject
    for axis, bound, keep_ge in ((0, lo[0], True), (0, hi[0], False), (1, lo[1], True), (1, hi[1], False)):
        if len(poly) == 0:
            return poly
        out = []
        n = len(poly)
        for i in range(n):
            a, b = poly[i], poly[(i + 1) % n]
            da = (a[axis] - bound) if keep_ge else (bound - a[axis])
            db = (b[axis] - bound) if keep_ge else (bound - b[axis])
            if da >= 0.0:
                out.append(a)
                if db < 0.0:
                    out.append(a + (b - a) * (da / (da - db)))
            elif db >= 0.0:
                out.append(a + (b - a) * (da / (da - db)))
        poly = np.array(out) if out else np.empty((0, 2))
    return poly


class PatchSet:
    """Discretized boundary: patches plus cached sample grids and query soup."""

    def __init__(self, scene: Scene, patches, max_edge: float):
        self.scene = scene
        self.patches = list(patches)
        self.max_edge = float(max_edge)
        self._soup = _PolySoup(self.patches)
        self._samples = {}

    def __len__(self):
        return len(self.patches)

    @property
    def soup(self) -> _PolySoup:
        return self._soup

    def material(self, patch_id: int) -> Material:
        return self.scene.materials[self.patches[patch_id].material]

    def sample_points(self, patch_id: int, spacing: float) -> np.ndarray:
        """Cell-center grid on the patch plane at ~``spacing``, clipped to the
        patch; falls back to the centroid when the grid is empty."""
        key = (patch_id, round(float(spacing), 9))
        got = self._samples.get(key)
        if got is not None:
            return got
        p = self.patches[patch_id]
        pts = _grid_points(p.verts2d, spacing)
        pts3 = p.frame.to_3d(pts) if len(pts) else p.centroid[None, :].copy()
        self._samples[key] = pts3
        return pts3

    def intersect_rays(self, origins, dirs, t_min: float = GEOM_EPS):
        return self._soup.intersect_rays(origins, dirs, t_min=t_min)

    def dumps(self) -> bytes:
        """Deterministic byte serialization (regression/identity checks)."""
        parts = [np.float64(self.max_edge).tobytes()]
        for p in self.patches:
            parts.append(np.int64(p.polygon).tobytes())
            parts.append(p.verts.astype(np.float64).tobytes())
            parts.append(p.material.encode())
        return b"".join(parts)


def _grid_points(verts2d: np.ndarray, spacing: float) -> np.ndarray:
    lo = verts2d.min(axis=0)
    hi = verts2d.max(axis=0)
    ext = hi - lo
    n = np.maximum(1, np.round(ext / spacing).astype(int))
    us = lo[0] + (np.arange(n[0]) + 0.5) * ext[0] / n[0]
    vs = lo[1] + (np.arange(n[1]) + 0.5) * ext[1] / n[1]
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
    # Keep points inside the (convex, CCW) patch polygon.
    a = verts2d
    b = np.roll(a, -1, axis=0)
    d = b - a
    inward = np.stack([-d[:, 1], d[:, 0]], axis=1)
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    ok = np.ones(len(pts), dtype=bool)
    for e in range(len(a)):
        ok &= (pts - a[e]) @ inward[e] >= -1e-9
    return pts[ok]


def discretize(scene: Scene, max_edge: float) -> PatchSet:
    """Split every polygon into grid-aligned convex patches with edges <= max_edge."""
    if max_edge <= 0:
        raise SceneError("max_edge must be positive")
    patches = []
    for poly in scene.polygons:
        lo = poly.verts2d.min(axis=0)
        hi = poly.verts2d.max(axis=0)
        ext = hi - lo
        n = np.maximum(1, np.ceil(ext / max_edge - 1e-9).astype(int))
        cell = ext / n
        for iu in range(n[0]):
            for iv in range(n[1]):
                clo = lo + np.array([iu, iv]) * cell
                chi = lo + np.array([iu + 1, iv + 1]) * cell
                cv = _clip_convex(poly.verts2d, clo, chi)
                if len(cv) < 3:
                    continue
                area, c2 = _polygon_area_centroid_2d(cv)
                if area <= 1e-10:
                    continue
                patches.append(
                    Patch(
                        index=len(patches),
                        polygon=poly.index,
                        material=poly.material,
                        verts=poly.frame.to_3d(cv),
                        verts2d=cv,
                        frame=poly.frame,
                        normal=poly.normal,
                        offset=poly.offset,
                        area=area,
                        centroid=poly.frame.to_3d(c2[None, :])[0],
                    )
                )
    if not patches:
        raise SceneError("discretization produced no patches")
    return PatchSet(scene, patches, max_edge)


def ray_intersect(scene, origin, direction):
    """Nearest boundary hit of a ray; returns (index, point, distance) or None.

    ``scene`` may be a Scene (polygon indices) or a PatchSet (patch indices).
    """
    soup = scene.soup
    dirn = np.asarray(direction, dtype=float)
    dirn = dirn / np.linalg.norm(dirn)
    k, t = soup.intersect_rays(np.asarray(origin, dtype=float)[None, :], dirn[None, :])
    if k[0] < 0:
        return None
    return int(k[0]), np.asarray(origin) + t[0] * dirn, float(t[0])


def visible(scene, x, x2) -> bool:
    """Mutual visibility of two boundary/interior points (open segment test)."""
    soup = scene.soup
    return bool(
        soup.segments_clear(
            np.asarray(x, dtype=float)[None, :], np.asarray(x2, dtype=float)[None, :]
        )[0]
    )


def eyring_t60(scene: Scene, band: int | None = None) -> float:
    """Eyring reverberation time 0.161 V / (-S ln r) with area-weighted r."""
    areas = np.array([p.area for p in scene.polygons])
    if band is None:
        refl = np.array(
            [scene.materials[p.material].broadband_reflection() for p in scene.polygons]
        )
    else:
        refl = np.array(
            [scene.materials[p.material].reflection[band] for p in scene.polygons]
        )
    r_bar = float(np.sum(areas * refl) / np.sum(areas))
    if r_bar >= 1.0 - 1e-9:
        return math.inf
    return 0.161 * scene.volume() / (-scene.total_area() * math.log(r_bar))
