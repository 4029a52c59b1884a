"""Ray-based stages: image-source early field, injection tracing, detection.

Sign/units conventions used throughout the package:

* a unit source has pressure amplitude 1/d at distance d (energy 1/d^2), so
  the total radiated flux is 4*pi and each of ``n`` Monte-Carlo rays carries
  energy ``4*pi/n``;
* line signals in the recursive network are radiance-valued in pressure
  units; the injection gain divides collected ray energy by the line's
  geometric throughput so that a diffuse first bounce reproduces the
  analytic reflected radiance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import BAND_CENTERS_HZ, DEFAULT_N_RAYS, GEOM_EPS, stage_rng
from .absorption import air_attenuation_db_per_m
from .geometry import PatchSet, Scene
from .kernel import PathTable


class TraceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image sources


@dataclass
class ImageTap:
    """One specular path: distance, per-band pressure factor, bounce count."""

    distance: float
    amps: np.ndarray  # (n_bands,) product of sqrt(reflection) over walls
    order: int
    walls: tuple


def _mirror(point: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    return point - 2.0 * (point @ normal - offset) * normal


def image_source_taps(scene: Scene, max_order: int,
                      include_direct: bool = True) -> list:
    """Valid specular reflection paths up to ``max_order`` bounces.

    Amplitudes exclude the 1/d spreading and air loss (applied by the
    renderer); they are the product of sqrt(band reflection) over the wall
    sequence.  The direct path has amps == 1 and is dropped when occluded.
    """
    soup = scene.soup
    nb = len(BAND_CENTERS_HZ)
    taps = []
    if include_direct:
        d = float(np.linalg.norm(scene.receiver - scene.source))
        if d > 0 and bool(soup.segments_clear(scene.source, scene.receiver)[0]):
            taps.append(ImageTap(d, np.ones(nb), 0, ()))

    refl = {name: np.sqrt(np.broadcast_to(m.reflection, (nb,)).astype(float))
            for name, m in scene.materials.items()}

    # breadth-first over wall sequences; a wall only mirrors images lying on
    # its interior side, and immediate repeats are skipped
    frontier = [(scene.source, ())]
    for _ in range(max_order):
        nxt = []
        for img, seq in frontier:
            for poly in scene.polygons:
                if seq and poly.index == seq[-1]:
                    continue
                side = img @ poly.normal - poly.offset
                if side <= GEOM_EPS:
                    continue
                nxt.append((_mirror(img, poly.normal, poly.offset), seq + (poly.index,)))
        frontier = nxt
        seen = set()
        for img, seq in frontier:
            path = _unfold(scene, img, seq)
            if path is None:
                continue
            # edge-grazing paths validate under several wall orderings; collapse
            # duplicates that share the image and the reflection-point set
            key = (tuple(np.round(img, 9)),
                   frozenset(tuple(np.round(p, 9)) for p in path[1:-1]))
            if key in seen:
                continue
            seen.add(key)
            amps = np.ones(nb)
            for w in seq:
                amps = amps * refl[scene.polygons[w].material]
            taps.append(ImageTap(float(np.linalg.norm(scene.receiver - img)), amps,
                                 len(seq), seq))
    return taps


def _unfold(scene: Scene, image: np.ndarray, seq: tuple):
    """Backtrack receiver->image through the wall sequence; None if invalid."""
    soup = scene.soup
    # images of the source after the first k mirrors of seq
    partial = [scene.source]
    for w in seq:
        p = scene.polygons[w]
        partial.append(_mirror(partial[-1], p.normal, p.offset))
    pts = [scene.receiver]
    target = image
    for k in range(len(seq) - 1, -1, -1):
        poly = scene.polygons[seq[k]]
        a = pts[-1]
        delta = target - a
        denom = delta @ poly.normal
        if abs(denom) < 1e-12:
            return None
        t = (poly.offset - a @ poly.normal) / denom
        # t == 0 happens for edge-grazing paths whose reflection points
        # coincide on a wall-wall edge; they are valid limits, keep them
        if t < -1e-9 or t >= 1.0:
            return None
        x = a + max(t, 0.0) * delta
        if not bool(soup._inside_2d(poly.index, x[None, :], tol=1e-9)[0]):
            return None
        pts.append(x)
        target = partial[k]
    pts.append(scene.source)
    a = np.asarray(pts[:-1])
    b = np.asarray(pts[1:])
    if not bool(np.all(soup.segments_clear(a, b))):
        return None
    return pts


def render_early(scene: Scene, fs: int, max_order: int, n_samples: int,
                 bands: bool = False, air: bool = True) -> np.ndarray:
    """Early-reflection impulse response from the image-source paths.

    Returns shape (n_samples,) broadband or (n_bands, n_samples).
    """
    taps = image_source_taps(scene, max_order)
    att = air_attenuation_db_per_m()
    c = scene.speed_of_sound
    nb = len(BAND_CENTERS_HZ)
    out = np.zeros((nb, n_samples)) if bands else np.zeros(n_samples)
    for tap in taps:
        n = int(round(tap.distance / c * fs))
        if n >= n_samples:
            continue
        a = tap.amps / max(tap.distance, 1e-9)
        if air:
            a = a * 10.0 ** (-att * tap.distance / 20.0)
        if bands:
            out[:, n] += a
        else:
            out[n] += a[3]  # 1 kHz band carries the broadband value
    return out


# ---------------------------------------------------------------------------
# stochastic injection tracing


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cosine_hemisphere(normals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(normals)
    u1 = rng.random(n)
    u2 = rng.random(n)
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(1.0 - u1)], axis=1)
    # tangent frame per normal
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9,
                      np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return (local[:, 0:1] * t1 + local[:, 1:2] * t2 + local[:, 2:3] * normals)


@dataclass
class Injector:
    """Per-line source filter: ``fir`` entered at sample ``offset``.

    Broadband fir has shape (L,); frequency-dependent (L, n_bands).
    """

    line: int
    offset: int
    fir: np.ndarray

    @property
    def energy(self):
        return np.sum(self.fir ** 2, axis=0)


def filters_csv(filters, path) -> None:
    """Inspection dump, one (line, offset, value) row per filter tap.

    Accepts a list of injectors or a DetectorBank; multi-band firs are
    dumped at the mid band.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("line,offset,value\n")
        if isinstance(filters, DetectorBank):
            for l, g in enumerate(filters.gains):
                if filters.firs is not None and filters.firs[l] is not None:
                    for t, v in enumerate(filters.firs[l]):
                        fh.write(f"{l},{filters.offsets[l] + t},{float(v)!r}\n")
                elif g != 0.0:
                    fh.write(f"{l},{filters.delays[l]},{float(g)!r}\n")
            return
        for inj in filters:
            fir = inj.fir if inj.fir.ndim == 1 else inj.fir[:, inj.fir.shape[1] // 2]
            for t, v in enumerate(fir):
                if v != 0.0:
                    fh.write(f"{inj.line},{inj.offset + t},{float(v)!r}\n")


def trace_injection(scene: Scene, patches: PatchSet, paths: PathTable,
                    order: int, n_rays: int = DEFAULT_N_RAYS, seed: int = 0,
                    bands: bool = False, spread: bool = False,
                    air: bool = True):
    """Monte-Carlo source-to-line filters for recursion entry at ``order``.

    Rays halt at their (order+2)th surface hit; a ray feeds line (i, j) when
    hits order+1 and order+2 land on patches i and j.  Wall energy applies at
    the first ``order`` hits only and arrival is clocked at hit order+1: the
    bounce at patch i and the i->j leg belong to the line's delay operator,
    which the injector feeds.  Direction sampling (specular with probability
    1-sigma, cosine-diffuse otherwise) happens at every bounce including the
    one at i — that sampling is what realizes the reflection lobe shape.

    Returns (injectors, stats).
    """
    fs = paths.fs
    c = scene.speed_of_sound
    nb = len(BAND_CENTERS_HZ)
    rng = stage_rng(seed, 1)
    att = air_attenuation_db_per_m() if air else np.zeros(nb)
    att_bb = att[3]

    n_p = len(patches)
    if bands:
        refl = np.stack([np.broadcast_to(patches.material(i).reflection, (nb,))
                         for i in range(n_p)]).astype(float)
    else:
        refl = np.array([patches.material(i).broadband_reflection()
                         for i in range(n_p)])
    scat = np.array([patches.material(i).scattering for i in range(n_p)])
    normals = np.stack([p.normal for p in patches.patches])
    line_of = np.full((n_p, n_p), -1, dtype=np.int64)
    line_of[paths.lines[:, 0], paths.lines[:, 1]] = np.arange(len(paths))

    pos = np.broadcast_to(scene.source, (n_rays, 3)).copy()
    dirs = uniform_sphere(n_rays, rng)
    w = np.full((n_rays, nb) if bands else (n_rays,), 4.0 * math.pi / n_rays)
    dist = np.zeros(n_rays)
    alive = np.ones(n_rays, dtype=bool)
    prev_hit = np.full(n_rays, -1, dtype=int)
    last_hit = np.full(n_rays, -1, dtype=int)

    for hop in range(order + 2):
        idx, t = patches.intersect_rays(pos[alive], dirs[alive])
        sub_ok = idx >= 0
        rows = np.flatnonzero(alive)
        alive[rows[~sub_ok]] = False
        rows = rows[sub_ok]
        idx, t = idx[sub_ok], t[sub_ok]
        pos[rows] += t[:, None] * dirs[rows]
        prev_hit[rows] = last_hit[rows]
        last_hit[rows] = idx
        if hop <= order:
            dist[rows] += t
            if air:
                g = 10.0 ** (np.outer(t, -att / 10.0)) if bands \
                    else 10.0 ** (-att_bb * t / 10.0)
                w[rows] = w[rows] * g
            if hop < order:
                w[rows] = w[rows] * refl[idx]
            diffuse = rng.random(len(rows)) < scat[idx]
            nrm = normals[idx]
            spec = dirs[rows] - 2.0 * np.sum(dirs[rows] * nrm, axis=1, keepdims=True) * nrm
            new_dirs = spec
            if np.any(diffuse):
                new_dirs = new_dirs.copy()
                new_dirs[diffuse] = _cosine_hemisphere(nrm[diffuse], rng)
            dirs[rows] = new_dirs

    n_escaped = int(np.count_nonzero(~alive))
    if n_escaped > 0.001 * n_rays:
        warnings.warn(f"{n_escaped}/{n_rays} rays escaped the scene "
                      "(geometry cracks?)", RuntimeWarning)
    rows = np.flatnonzero(alive)
    lines = line_of[prev_hit[rows], last_hit[rows]]
    keep = lines >= 0
    n_unmapped = int(np.count_nonzero(~keep))
    rows = rows[keep]
    lines = lines[keep]
    wv = w[rows]
    tv = dist[rows] / c
    samp = np.round(tv * fs).astype(int)

    m = len(paths)
    energy = np.zeros((m, nb) if bands else (m,))
    np.add.at(energy, lines, wv)
    t_sum = np.zeros(m)
    np.add.at(t_sum, lines, tv)
    counts = np.bincount(lines, minlength=m)

    e_tot = energy.sum(axis=-1) if bands else energy
    active = np.flatnonzero(e_tot > 0.0)
    gains = np.zeros_like(energy)
    gains[active] = np.sqrt(energy[active] / (paths.etendue[active, None] if bands
                                              else paths.etendue[active]))

    sign_rng = stage_rng(seed, 2)
    injectors = []
    order_idx = np.argsort(lines, kind="stable")
    lines_s = lines[order_idx]
    bounds = np.searchsorted(lines_s, active, side="left")
    bounds_hi = np.searchsorted(lines_s, active, side="right")
    for li, lo, hi in zip(active, bounds, bounds_hi):
        mean_n = int(round(t_sum[li] / counts[li] * fs))
        if not spread:
            fir = gains[li].reshape((1, nb)) if bands else gains[li].reshape((1,))
            injectors.append(Injector(int(li), mean_n, fir))
            continue
        sel = order_idx[lo:hi]
        s = samp[sel]
        wsel = wv[sel].sum(axis=-1) if bands else wv[sel]
        n0, n1 = int(s.min()), int(s.max())
        bins = np.zeros(n1 - n0 + 1)
        np.add.at(bins, s - n0, wsel)
        shape = np.sqrt(bins / bins.sum())
        signs = sign_rng.choice([-1.0, 1.0], size=len(shape))
        if bands:
            fir = shape[:, None] * signs[:, None] * gains[li][None, :]
        else:
            fir = shape * signs * gains[li]
        injectors.append(Injector(int(li), n0, fir))

    stats = {
        "n_rays": n_rays,
        "n_escaped": n_escaped,
        "n_unmapped": n_unmapped,
        "lines_active": len(active),
        "energy_collected": float(np.sum(energy)),
    }
    return injectors, stats


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectorBank:
    """Per-line pickup at the receiver.

    Lines ending on the same patch share a gather; gain 0 marks lines whose
    end patch is invisible from the receiver.
    """

    gains: np.ndarray    # (M,)
    delays: np.ndarray   # (M,) samples
    firs: list = None    # optional spread FIRs, per line (or None entries)
    offsets: np.ndarray = None

    def dumps(self) -> bytes:
        return self.gains.tobytes() + self.delays.tobytes()


def detection_gather(scene: Scene, patches: PatchSet, paths: PathTable,
                     spacing: float = None, spread: bool = False,
                     seed: int = 0) -> DetectorBank:
    """Deterministic receiver gather for every delay line.

    For the end patch of each line, visible surface samples contribute
    cos(theta)/d^2 weighted by their share of patch area; the summed energy
    weight gives the pickup gain (pressure = sqrt), the weighted mean travel
    time the pickup delay.
    """
    fs = paths.fs
    c = scene.speed_of_sound
    spacing = paths.spacing if spacing is None else spacing
    rcv = scene.receiver
    soup = scene.soup

    n_p = len(patches)
    patch_gain = np.zeros(n_p)
    patch_delay = np.zeros(n_p, dtype=int)
    patch_fir = [None] * n_p
    patch_off = np.zeros(n_p, dtype=int)
    sign_rng = stage_rng(seed, 3)

    for i in range(n_p):
        x = patches.sample_points(i, spacing)
        delta = rcv[None, :] - x
        d = np.linalg.norm(delta, axis=1)
        ok = d > 1e-9
        cosv = np.zeros(len(x))
        cosv[ok] = np.maximum(0.0, (delta[ok] / d[ok, None]) @ patches.patches[i].normal)
        vis = soup.segments_clear(x, np.broadcast_to(rcv, x.shape))
        wgt = vis * cosv / np.maximum(d, 1e-9) ** 2 * (patches.patches[i].area / len(x))
        total = wgt.sum()
        if total <= 0.0:
            continue
        patch_gain[i] = math.sqrt(total)
        tmean = float((wgt * d).sum() / total / c)
        patch_delay[i] = int(round(tmean * fs))
        if spread:
            s = np.round(d / c * fs).astype(int)
            n0, n1 = int(s[wgt > 0].min()), int(s[wgt > 0].max())
            bins = np.zeros(n1 - n0 + 1)
            np.add.at(bins, s - n0, wgt)
            shape = np.sqrt(bins / total)
            patch_fir[i] = shape * sign_rng.choice([-1.0, 1.0], size=len(shape)) \
                * patch_gain[i]
            patch_off[i] = n0

    end = paths.lines[:, 1]
    firs = [patch_fir[e] for e in end] if spread else None
    return DetectorBank(gains=patch_gain[end], delays=patch_delay[end],
                        firs=firs, offsets=patch_off[end] if spread else None)
