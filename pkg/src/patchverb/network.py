"""Recursive delay network: assembly and impulse-response rendering.

Signal plan per line (i -> j): the line input ``u`` is the feedback-mixed sum
of arrivals at patch i plus the injector feed; its delay operator applies the
line delay, sqrt(wall reflection at i), and air loss over the line distance,
producing the line output ``p`` = the signal reaching patch j from the
direction of i.  Detectors and the mixing blocks read ``p``; the image-source
bypass goes straight to the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import BAND_CENTERS_HZ, DEFAULT_FS, DEFAULT_N_RAYS
from .absorption import air_attenuation_db_per_m, air_band_gains, air_broadband_gain
from .geometry import PatchSet, Scene, eyring_t60
from .kernel import KernelMatrix, PathTable
from .matrices import FeedbackMatrix, assemble_feedback
from .tracing import (DetectorBank, detection_gather, image_source_taps,
                      trace_injection)


class NetworkError(RuntimeError):
    pass


def air_absorption_filter(distance: float, fs: int = DEFAULT_FS,
                          bands: bool = False, n_taps: int = 8):
    """Propagation loss over ``distance``: scalar (1 kHz) or short FIR.

    The FIR is linear-phase (symmetric, even length) least-squares fitted to
    the eight octave-band pressure gains; its group delay of (n_taps-1)/2
    samples is constant across lines.
    """
    if distance < 0:
        raise ValueError("negative distance")
    if not bands:
        return air_broadband_gain(distance)
    return fit_linear_phase_fir(air_band_gains(distance), fs, n_taps)


def fit_linear_phase_fir(band_gains, fs: int, n_taps: int = 8) -> np.ndarray:
    """Symmetric n_taps FIR whose magnitude at the octave band centers
    approximates ``band_gains`` in the least-squares sense."""
    gains = np.atleast_2d(np.asarray(band_gains, dtype=float))
    half = n_taps // 2
    w = 2.0 * math.pi * np.asarray(BAND_CENTERS_HZ) / fs
    # amplitude of a symmetric even-length fir: 2 sum_k h_k cos(w (c - k))
    center = (n_taps - 1) / 2.0
    basis = 2.0 * np.cos(np.outer(w, center - np.arange(half)))
    coef, *_ = np.linalg.lstsq(basis, gains.T, rcond=None)
    fir = np.concatenate([coef, coef[::-1]], axis=0).T
    return fir[0] if np.ndim(band_gains) == 1 else fir


@dataclass
class DelayOps:
    delays: np.ndarray            # (M,) samples
    gains: np.ndarray = None      # (M,) broadband pressure gains
    firs: np.ndarray = None       # (M, n_taps) frequency-dependent path


@dataclass
class Rir:
    samples: np.ndarray
    fs: int

    def __len__(self):
        return len(self.samples)


@dataclass
class Network:
    scene: Scene
    patches: PatchSet
    paths: PathTable
    feedback: FeedbackMatrix
    mix: sparse.csr_matrix        # (M, M): u_out contributions from p_in
    delay_ops: DelayOps
    injectors: list
    detectors: DetectorBank
    bypass_delays: np.ndarray     # tap positions, samples
    bypass_amps: np.ndarray       # tap pressures, (T,) or (T, n_bands)
    fs: int
    meta: dict = field(default_factory=dict)

    @property
    def n_lines(self) -> int:
        return len(self.paths)


def _global_mix(feedback: FeedbackMatrix, kernel: KernelMatrix, m: int):
    rows, cols, data = [], [], []
    for blk in feedback.blocks:
        in_l = kernel.in_lines[blk.patch]
        out_l = kernel.out_lines[blk.patch]
        if len(in_l) == 0 or len(out_l) == 0:
            continue
        # matrix rows are incoming lines, columns outgoing: transpose scatter
        r, c = np.meshgrid(out_l, in_l, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        data.append(blk.matrix.T.ravel())
    if not rows:
        return sparse.csr_matrix((m, m))
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m))


def _line_gains(paths: PathTable, patches: PatchSet, air: bool,
                lossless: bool):
    """Per-line pressure gains: sqrt(r of start patch) x air loss.

    Never exceeds 1, which keeps the loop a contraction around the
    orthogonal feedback blocks regardless of delay lengths.
    """
    m = len(paths)
    gains = np.ones(m)
    if not lossless:
        r = np.array([patches.material(i).broadband_reflection()
                      for i in range(len(patches))])
        gains *= np.sqrt(r[paths.lines[:, 0]])
        if air:
            att = air_attenuation_db_per_m()[3]
            gains *= 10.0 ** (-att * paths.distances / 20.0)
    return gains


def _sinkhorn_state_scale(paths: PathTable, feedback: FeedbackMatrix,
                          kernel: KernelMatrix) -> np.ndarray:
    """Per-line pressure scale between loop state and physical radiance.

    The balanced feedback block at a patch expects its incoming rows
    pre-scaled by the balancing row factors; compensating at the injectors
    and detectors (rather than inside the loop) keeps the recursion
    unilossless as-is, at the cost of the balancing approximation inside the
    loop.  Returns C with loop_state = C * physical; identity for other
    designs.
    """
    c = np.ones(len(paths))
    for blk in feedback.blocks:
        if blk.comp_in is not None:
            c[kernel.in_lines[blk.patch]] = blk.comp_in
    return c


def _line_firs(paths: PathTable, patches: PatchSet, air: bool, fs: int):
    """Frequency-dependent delay operators as 8-tap linear-phase FIRs."""
    nb = len(BAND_CENTERS_HZ)
    r = np.stack([np.broadcast_to(patches.material(i).reflection, (nb,))
                  for i in range(len(patches))]).astype(float)
    targets = np.sqrt(r[paths.lines[:, 0]])
    if air:
        att = air_attenuation_db_per_m()
        targets = targets * 10.0 ** (-np.outer(paths.distances, att) / 20.0)
    return fit_linear_phase_fir(targets, fs)


def build_network(scene: Scene, patches: PatchSet, paths: PathTable,
                  kernel: KernelMatrix, design: str = "sinkhorn", K: int = 1,
                  seed: int = 0, n_rays: int = DEFAULT_N_RAYS,
                  spread: bool = False, air: bool = True,
                  lossless: bool = False, fd: bool = False,
                  feedback: FeedbackMatrix = None) -> Network:
    """Assemble the full network for one scene/design/injection-order choice.

    ``lossless`` zeroes wall and air losses (unit delay gains) for stability
    experiments.  ``fd`` switches delay operators to per-line FIRs fitted to
    band-dependent wall+air losses.  For the Sinkhorn design the balancing
    row/column factors are compensated at the injectors and detectors, never
    inside the loop, so every design recurses through gains <= 1.
    """
    fs = paths.fs
    if feedback is None:
        feedback = assemble_feedback(kernel, patches, design, seed=seed)
    mix = _global_mix(feedback, kernel, len(paths))

    if fd:
        if lossless:
            raise NetworkError("fd and lossless modes are mutually exclusive")
        ops = DelayOps(delays=paths.delays.copy(),
                       firs=_line_firs(paths, patches, air, fs))
    else:
        ops = DelayOps(delays=paths.delays.copy(),
                       gains=_line_gains(paths, patches, air, lossless))

    injectors, stats = trace_injection(scene, patches, paths, order=K,
                                       n_rays=n_rays, seed=seed,
                                       spread=spread,
                                       air=air and not lossless)
    detectors = detection_gather(scene, patches, paths, seed=seed)
    if feedback.design == "sinkhorn":
        state_scale = _sinkhorn_state_scale(paths, feedback, kernel)
        for inj in injectors:
            inj.fir = inj.fir * state_scale[inj.line]
        detectors.gains = detectors.gains / state_scale
        if detectors.firs is not None:
            detectors.firs = [None if f is None else f / state_scale[l]
                              for l, f in enumerate(detectors.firs)]

    taps = image_source_taps(scene, K)
    att = air_attenuation_db_per_m()
    b_delays = np.array([int(round(t.distance / scene.speed_of_sound * fs))
                         for t in taps], dtype=int)
    if fd:
        b_amps = np.stack([t.amps / max(t.distance, 1e-9)
                           * (10.0 ** (-att * t.distance / 20.0) if air else 1.0)
                           for t in taps]) if taps else np.zeros((0, len(att)))
    else:
        b_amps = np.array([t.amps[3] / max(t.distance, 1e-9)
                           * (10.0 ** (-att[3] * t.distance / 20.0) if air else 1.0)
                           for t in taps])
    if lossless:
        b_amps = np.zeros_like(b_amps)

    return Network(scene=scene, patches=patches, paths=paths,
                   feedback=feedback, mix=mix, delay_ops=ops,
                   injectors=injectors, detectors=detectors,
                   bypass_delays=b_delays, bypass_amps=b_amps, fs=fs,
                   meta={"design": design, "K": K, "seed": seed,
                         "spread": spread, "air": air, "lossless": lossless,
                         "fd": fd, "injection": stats})


def default_length(scene: Scene, fs: int) -> int:
    t60 = eyring_t60(scene)
    seconds = 1.0 if not math.isfinite(t60) else max(1.0, 2.0 * t60)
    return int(round(seconds * fs))


def _injection_matrix(injectors, n: int, m: int) -> sparse.csr_matrix:
    rows, cols, data = [], [], []
    for inj in injectors:
        fir = inj.fir if inj.fir.ndim == 1 else inj.fir[:, 3]
        idx = inj.offset + np.arange(len(fir))
        keep = (idx >= 0) & (idx < n) & (fir != 0.0)
        rows.append(idx[keep])
        cols.append(np.full(np.count_nonzero(keep), inj.line))
        data.append(fir[keep])
    if not rows:
        return sparse.csr_matrix((n, m))
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, m))


GUARD_LIMIT = 1e6


def render(net: Network, length: int = None, include_bypass: bool = True) -> Rir:
    """Run the recursion for ``length`` samples and return the pressure Rir.

    Processes blocks of min(line delay) samples: inside one block every line
    output depends only on line inputs from earlier blocks, so the mix, the
    delay-op gather, and the detector scatter are all vectorized.
    """
    if length is None:
        length = default_length(net.scene, net.fs)
    if length < 1:
        raise ValueError("render length must be >= 1 sample")

    m = len(net.paths)
    D = net.delay_ops.delays
    fd = net.delay_ops.firs is not None
    n_taps = net.delay_ops.firs.shape[1] if fd else 1
    B = int(min(D.min(), 4096))
    Q = int(D.max() + n_taps + B + 1)

    det = net.detectors
    spread_det = det.firs is not None
    det_groups = []
    active_det = np.flatnonzero(det.gains > 0.0)
    if not spread_det:
        for d in np.unique(det.delays[active_det]):
            sel = active_det[det.delays[active_det] == d]
            det_groups.append((int(d), sel, det.gains[sel]))
        max_det = max((g[0] for g in det_groups), default=0)
    else:
        max_det = max((int(det.offsets[l] + len(det.firs[l])) for l in active_det
                       if det.firs[l] is not None), default=0)

    S = _injection_matrix(net.injectors, length, m)
    mix_t = net.mix.T.tocsr()

    U = np.zeros((Q, m))
    out = np.zeros(length + max_det + 1)
    lines = np.arange(m)

    n0 = 0
    while n0 < length:
        nb = min(B, length - n0)
        ns = n0 + np.arange(nb)
        if fd:
            P = np.zeros((nb, m))
            for k in range(n_taps):
                P += net.delay_ops.firs[None, :, k] \
                    * U[(ns[:, None] - D[None, :] - k) % Q, lines[None, :]]
        else:
            P = net.delay_ops.gains[None, :] \
                * U[(ns[:, None] - D[None, :]) % Q, lines[None, :]]
        Ublk = P @ mix_t + S[n0:n0 + nb].toarray()
        peak = np.abs(Ublk).max() if Ublk.size else 0.0
        if not np.isfinite(peak) or peak > GUARD_LIMIT:
            raise NetworkError("instability detected at sample %d" % n0)
        U[ns % Q] = Ublk
        for d, sel, g in det_groups:
            out[n0 + d:n0 + d + nb] += P[:, sel] @ g
        if spread_det:
            for l in active_det:
                fir = det.firs[l]
                if fir is None:
                    continue
                seg = np.convolve(P[:, l], fir)
                out[n0 + det.offsets[l]:n0 + det.offsets[l] + len(seg)] += seg
        n0 += nb

    out = out[:length]
    if include_bypass and len(net.bypass_delays):
        amps = net.bypass_amps if net.bypass_amps.ndim == 1 \
            else net.bypass_amps[:, 3]
        keep = net.bypass_delays < length
        np.add.at(out, net.bypass_delays[keep], amps[keep])
    return Rir(samples=out, fs=net.fs)
