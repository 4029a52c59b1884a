"""Patch-to-patch energy transfer: paths, BRDF, and the reflection kernel.

A *line* is an ordered pair of mutually visible, non-coplanar patches (i -> j).
Each patch i owns one dense block that maps radiance arriving on incoming
lines (h -> i) to radiance departing on outgoing lines (i -> j).  Blocks are
stored with rows indexed by incoming line and columns by outgoing line; a
mixing step therefore applies ``block.T``.

Kernel entries are deterministic quadratures over patch sample-point triples:
the full-area measure on the emitting patch h and area averages on i and j.
Absorption (wall and air) is excluded here; it lives in the network's delay
operators.  Nonzero columns are normalized to sum exactly 1, the closed-room
limit of the continuous operator, which also absorbs quadrature overshoot of
the narrow specular lobe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import PatchSet, Scene
from . import DEFAULT_FS, DEFAULT_SAMPLE_SPACING

SPECULAR_POWER = 100


class KernelError(ValueError):
    pass


@dataclass
class KernelConfig:
    sample_spacing: float = DEFAULT_SAMPLE_SPACING
    specular_power: int = SPECULAR_POWER
    fs: int = DEFAULT_FS


# ---------------------------------------------------------------------------
# BRDF


@lru_cache(maxsize=8)
def _lobe_norm_table(power: int):
    """Cosine-weighted hemisphere integral of the specular lobe vs incidence.

    Returns (theta_grid, integral) where integral[k] is
    ``int_hemi max(0, v . m)^p (v . n) dw`` for a mirror direction at polar
    angle theta_grid[k].  Evaluated once per exponent by quadrature.
    """
    n_theta_m = 361
    theta_m = np.linspace(0.0, np.pi / 2.0, n_theta_m)
    # Gauss-Legendre in theta_v, trapezoid in phi.
    nodes, weights = np.polynomial.legendre.leggauss(200)
    tv = 0.25 * np.pi * (nodes + 1.0)
    wv = 0.25 * np.pi * weights
    phi = np.linspace(0.0, 2.0 * np.pi, 400, endpoint=False)
    dphi = phi[1] - phi[0]
    sin_tv, cos_tv = np.sin(tv), np.cos(tv)
    out = np.empty(n_theta_m)
    cos_phi = np.cos(phi)
    for k0 in range(0, n_theta_m, 24):
        k1 = min(k0 + 24, n_theta_m)
        tm = theta_m[k0:k1][:, None, None]
        cos_a = cos_tv[None, :, None] * np.cos(tm) + sin_tv[None, :, None] * np.sin(tm) * cos_phi[None, None, :]
        np.maximum(cos_a, 0.0, out=cos_a)
        integ = cos_a**power * (cos_tv * sin_tv)[None, :, None]
        out[k0:k1] = integ.sum(axis=2) @ wv * dphi
    return theta_m, out


def _lobe_norm(cos_theta_in: np.ndarray, power: int) -> np.ndarray:
    """1 / (cosine-weighted lobe integral) at the given incidence cosines."""
    theta_grid, integral = _lobe_norm_table(power)
    theta = np.arccos(np.clip(cos_theta_in, -1.0, 1.0))
    return 1.0 / np.interp(theta, theta_grid, integral)


def brdf_eval(material, v_in, v_out, normal, specular_power: int = SPECULAR_POWER):
    """Pseudospecular BRDF value(s); energy-normalized, absorption excluded.

    ``v_in`` points away from the surface toward where the energy came from,
    ``v_out`` away toward where it goes.  Broadcasts over leading dimensions.
    The diffuse part is sigma/pi; the specular part is a cosine-power lobe
    around the mirror of ``v_in``, scaled so that its cosine-weighted
    hemisphere integral is 1 at any incidence.
    """
    v_in = np.asarray(v_in, dtype=float)
    v_out = np.asarray(v_out, dtype=float)
    normal = np.asarray(normal, dtype=float)
    sigma = material.scattering
    cos_in = np.sum(v_in * normal, axis=-1)
    mirror = 2.0 * cos_in[..., None] * normal - v_in
    dots = np.maximum(np.sum(mirror * v_out, axis=-1), 0.0)
    k = _lobe_norm(cos_in, specular_power)
    return sigma / np.pi + (1.0 - sigma) * k * dots**specular_power


def geometry_term(x, nx, x2, nx2) -> float:
    """Symmetric point-to-point geometry factor cos cos' / d^2 (clamped at 0)."""
    x, x2 = np.asarray(x, dtype=float), np.asarray(x2, dtype=float)
    d = x2 - x
    dist2 = float(d @ d)
    if dist2 <= 0.0:
        return 0.0
    dist = np.sqrt(dist2)
    c1 = max(0.0, float(np.asarray(nx) @ d) / dist)
    c2 = max(0.0, float(np.asarray(nx2) @ (-d)) / dist)
    return c1 * c2 / dist2


# ---------------------------------------------------------------------------
# Path enumeration


@dataclass
class PathTable:
    """All delay lines: endpoints, integer delays, mean distances, etendues."""

    lines: np.ndarray              # (M, 2) int, (from_patch, to_patch)
    index: dict                    # (i, j) -> line id
    delays: np.ndarray             # (M,) int samples, >= 1
    distances: np.ndarray          # (M,) mean visible sample-pair distance, m
    etendue: np.ndarray            # (M,) area-area integral of G*V, m^2 sr
    incoming: list                 # per patch: array of line ids ending there
    outgoing: list                 # per patch: array of line ids starting there
    fs: int
    spacing: float
    _gv: list = field(default=None, repr=False)   # per line: (n_from, n_to) G*V
    _vis: list = field(default=None, repr=False)  # per line: bool mask

    def __len__(self):
        return len(self.lines)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("from_patch,to_patch,delay_samples,distance_m\n")
            for (i, j), d, dist in zip(self.lines, self.delays, self.distances):
                fh.write(f"{i},{j},{d},{float(dist)!r}\n")


def _coplanar(p, q) -> bool:
    if abs(float(p.normal @ q.normal)) < 1.0 - 1e-6:
        return False
    return abs(float(p.normal @ (q.centroid - p.centroid))) < 1e-6


def _scene_is_convex(scene: Scene) -> bool:
    verts = scene.vertices
    for p in scene.polygons:
        # All vertices on the inner (normal) side of every face plane.
        if np.min(verts @ p.normal - p.offset) < -1e-6:
            return False
    return True


def enumerate_paths(patches: PatchSet, scene: Scene = None, fs: int = DEFAULT_FS,
                    spacing: float = DEFAULT_SAMPLE_SPACING) -> PathTable:
    """Enumerate delay lines between mutually visible, non-coplanar patches.

    Per line the integer delay is ``round(mean visible pair distance / c * fs)``
    (minimum 1 sample) and the etendue integral of G*V is kept for converting
    traced ray energy to line radiance.
    """
    scene = scene or patches.scene
    c = scene.speed_of_sound
    n = len(patches)
    convex = _scene_is_convex(scene)
    samples = [patches.sample_points(k, spacing) for k in range(n)]
    areas = np.array([p.area for p in patches.patches])
    normals = np.array([p.normal for p in patches.patches])

    lines, delays, dists, etendues, gvs, viss = [], [], [], [], [], []
    index = {}
    for i in range(n):
        xi = samples[i]
        for j in range(n):
            if i == j or _coplanar(patches.patches[i], patches.patches[j]):
                continue
            xj = samples[j]
            diff = xj[None, :, :] - xi[:, None, :]          # (ni, nj, 3)
            d = np.linalg.norm(diff, axis=-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                cos_i = np.maximum(np.einsum("abk,k->ab", diff, normals[i]) / d, 0.0)
                cos_j = np.maximum(-np.einsum("abk,k->ab", diff, normals[j]) / d, 0.0)
                g = cos_i * cos_j / d**2
            g = np.nan_to_num(g, nan=0.0, posinf=0.0)
            if convex:
                vis = np.ones(d.shape, dtype=bool)
            else:
                a = np.repeat(xi, len(xj), axis=0)
                b = np.tile(xj, (len(xi), 1))
                vis = patches.soup.segments_clear(a, b).reshape(d.shape)
                # A clear segment between back-facing patches runs through
                # solid (it only meets surfaces at its own endpoints), so
                # facing is part of visibility here.
                vis &= g > 0.0
            if not vis.any():
                continue
            gv = g * vis
            line_id = len(lines)
            lines.append((i, j))
            index[(i, j)] = line_id
            mean_dist = float(d[vis].mean())
            dists.append(mean_dist)
            delays.append(max(1, int(round(mean_dist / c * fs))))
            etendues.append(float(areas[i] * areas[j] * gv.mean()))
            gvs.append(gv)
            viss.append(vis)
    if not lines:
        raise KernelError("degenerate scene: no delay lines between patches")

    lines = np.array(lines, dtype=int)
    incoming = [np.flatnonzero(lines[:, 1] == k) for k in range(n)]
    outgoing = [np.flatnonzero(lines[:, 0] == k) for k in range(n)]
    return PathTable(
        lines=lines,
        index=index,
        delays=np.array(delays, dtype=int),
        distances=np.array(dists),
        etendue=np.array(etendues),
        incoming=incoming,
        outgoing=outgoing,
        fs=fs,
        spacing=spacing,
        _gv=gvs,
        _vis=viss,
    )


# ---------------------------------------------------------------------------
# Kernel


@dataclass
class KernelMatrix:
    """Per-patch dense blocks mapping incoming line radiance to outgoing."""

    blocks: list                   # per patch: (M_in, M_out) ndarray
    in_lines: list                 # per patch: line ids of block rows
    out_lines: list                # per patch: line ids of block columns
    raw_col_sums: list             # per patch: column sums before normalization
    n_lines: int

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("from_line,to_line,value\n")
            for blk, rows, cols in zip(self.blocks, self.in_lines, self.out_lines):
                for a, r in enumerate(rows):
                    for b, cl in enumerate(cols):
                        fh.write(f"{r},{cl},{float(blk[a, b])!r}\n")


def compute_kernel(patches: PatchSet, paths: PathTable, cfg: KernelConfig = None) -> KernelMatrix:
    """Deterministic quadrature of the reflection kernel over sample triples."""
    cfg = cfg or KernelConfig()
    n = len(patches)
    samples = [patches.sample_points(k, cfg.sample_spacing) for k in range(n)]
    areas = np.array([p.area for p in patches.patches])
    power = cfg.specular_power

    blocks, raw_sums = [], []
    for i in range(n):
        inc, out = paths.incoming[i], paths.outgoing[i]
        mi, mo = len(inc), len(out)
        xi = samples[i]                       # (ni, 3)
        ni = len(xi)
        normal = patches.patches[i].normal
        sigma = patches.material(i).scattering

        # Stack all outgoing sample points once per patch.
        out_pts = [samples[paths.lines[l, 1]] for l in out]
        bounds = np.cumsum([0] + [len(q) for q in out_pts])
        xo = np.concatenate(out_pts, axis=0) if out_pts else np.empty((0, 3))
        diff_out = xo[None, :, :] - xi[:, None, :]
        d_out = np.linalg.norm(diff_out, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            dirs_out = diff_out / d_out[..., None]
        dirs_out = np.nan_to_num(dirs_out)

        block = np.zeros((mi, mo))
        for a, lid in enumerate(inc):
            h = paths.lines[lid, 0]
            xh = samples[h]                  # (nh, 3)
            nh = len(xh)
            diff_in = xh[None, :, :] - xi[:, None, :]      # (ni, nh, 3)
            d_in = np.linalg.norm(diff_in, axis=-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                dirs_in = diff_in / d_in[..., None]
            dirs_in = np.nan_to_num(dirs_in)
            cos_in = np.einsum("abk,k->ab", dirs_in, normal)
            mirror = 2.0 * cos_in[..., None] * normal - dirs_in
            k_norm = _lobe_norm(np.clip(cos_in, 0.0, 1.0), power)
            # gv was stored for the (h -> i) traversal: shape (nh, ni).
            gv = paths._gv[lid].T                          # (ni, nh)
            dots = np.einsum("abk,ayk->aby", mirror, dirs_out)
            np.maximum(dots, 0.0, out=dots)
            rho = sigma / np.pi + (1.0 - sigma) * k_norm[..., None] * dots**power
            contrib = np.einsum("aby,ab->y", rho, gv)      # sum over ni, nh
            # Mean over the triple, full-area measure on the emitter h.
            for b in range(mo):
                nj = bounds[b + 1] - bounds[b]
                block[a, b] = areas[h] * contrib[bounds[b]:bounds[b + 1]].sum() / (ni * nh * nj)

        zero_rows = np.flatnonzero(~block.any(axis=1)) if mo else np.arange(mi)
        if len(zero_rows) and mi:
            lid = inc[zero_rows[0]]
            raise KernelError(
                f"isolated patch {i}: incoming line {lid} "
                f"({paths.lines[lid, 0]}->{i}) cannot reflect anywhere"
            )
        col = block.sum(axis=0)
        raw_sums.append(col.copy())
        nz = col > 0.0
        block[:, nz] /= col[nz]
        blocks.append(block)

    return KernelMatrix(
        blocks=blocks,
        in_lines=[paths.incoming[i] for i in range(n)],
        out_lines=[paths.outgoing[i] for i in range(n)],
        raw_col_sums=raw_sums,
        n_lines=len(paths),
    )


def validate_energy(kernel: KernelMatrix, tol: float = 1e-9) -> dict:
    """Column-sum / support report for a kernel; ``ok`` is the pass flag."""
    bad_cols = []
    zero_cols = []
    col_max, col_min = 0.0, np.inf
    for blk, cols in zip(kernel.blocks, kernel.out_lines):
        if blk.size == 0:
            continue
        sums = blk.sum(axis=0)
        col_max = max(col_max, float(sums.max()))
        col_min = min(col_min, float(sums.min()))
        over = np.flatnonzero(sums > 1.0 + tol)
        bad_cols.extend(int(cols[b]) for b in over)
        zero_cols.extend(int(cols[b]) for b in np.flatnonzero(sums == 0.0))
    raw_max = max((float(np.max(s)) if len(s) else 0.0) for s in kernel.raw_col_sums)
    return {
        "ok": not bad_cols,
        "max_column_sum": col_max,
        "min_column_sum": float(col_min if np.isfinite(col_min) else 0.0),
        "columns_over_unit": bad_cols,
        "zero_columns": zero_cols,
        "max_raw_column_sum": raw_max,
        "n_blocks": len(kernel.blocks),
        "block_sizes": [b.shape for b in kernel.blocks],
    }


def column_sum_report(path) -> dict:
    """Validate a kernel CSV dump (from_line,to_line,value) without a scene.

    Columns are outgoing lines; only global column sums and support can be
    checked in this form.
    """
    sums = {}
    negatives = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("from_line"):
            raise KernelError(f"{path}: not a kernel dump")
        for ln, row in enumerate(fh, start=2):
            src, dst, val = row.strip().split(",")
            v = float(val)
            if v < 0:
                negatives.append(int(dst))
            sums[int(dst)] = sums.get(int(dst), 0.0) + v
    bad = [c for c, s in sorted(sums.items()) if s > 1.0 + 1e-9]
    return {
        "ok": not bad and not negatives,
        "columns_over_unit": bad,
        "negative_value_columns": sorted(set(negatives)),
        "max_column_sum": max(sums.values()) if sums else 0.0,
    }
