"""Artifact writers: WAV, metrics/trace CSVs, run manifests, and figures.

CSV is the contract (UTF-8, header row, deterministic float formatting so
same-seed runs are byte-identical); figures are auxiliary PNGs rendered next
to the delimited output.
"""

from __future__ import annotations

import json

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from scipy.io import wavfile  # noqa: E402

from . import BAND_CENTERS_HZ, __version__
from .metrics import edc_db


def write_wav(path, samples: np.ndarray, fs: int) -> None:
    """Mono float32 WAV; float32 cast is the only lossy step."""
    wavfile.write(path, fs, np.asarray(samples, dtype=np.float32))


def read_wav(path):
    fs, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype.kind == "i":
        data = data / float(np.iinfo(data.dtype).max)
    return np.asarray(data, dtype=float), int(fs)


def metrics_rows(tag: dict, analysis: dict) -> list:
    """Flatten an analyze_rir bundle into (scene, design, K, spread, M,
    band, metric, value) rows."""
    base = [tag.get("scene", ""), tag.get("design", ""), tag.get("K", ""),
            tag.get("spread", ""), tag.get("M", "")]
    rows = []
    for metric, value in analysis["broadband"].items():
        rows.append(base + ["broadband", metric, value])
    for fc, entry in analysis["bands"].items():
        for metric, value in entry.items():
            rows.append(base + [fc, metric, value])
    return rows


def error_row(tag: dict, message: str) -> list:
    return [tag.get("scene", ""), tag.get("design", ""), tag.get("K", ""),
            tag.get("spread", ""), tag.get("M", ""), "", "error", message]


def _fmt(v) -> str:
    # repr of a python float is exact and stable; numpy scalars are not.
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("scene,design,K,spread,M,band_Hz,metric,value\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_trace_csv(path, times_s: np.ndarray, values: np.ndarray) -> None:
    """Two-column (time_s, value) trace, used for EDC and NED dumps."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("time_s,value\n")
        for t, v in zip(times_s, values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def build_manifest(config: dict, n_patches: int, n_lines: int,
                   timings: dict, extra: dict = None) -> dict:
    man = {
        "tool": "patchverb",
        "version": __version__,
        "config": dict(config),
        "N_patches": int(n_patches),
        "M_lines": int(n_lines),
        "timings_s": {k: round(v, 4) for k, v in timings.items()},
        "rng_stages": {"1": "injection rays", "2": "injection spread signs",
                       "3": "detector spread signs", "4": "matrix restarts"},
    }
    if extra:
        man.update(extra)
    return man


# --- figures ---------------------------------------------------------------

def plot_edc(path, h: np.ndarray, fs: int, title: str = "") -> None:
    curve = edc_db(h)
    t = np.arange(len(curve)) / fs
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(t, curve, lw=1.0)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("EDC [dB]")
    ax.set_ylim(-80, 2)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ned(path, times_s: np.ndarray, values: np.ndarray,
             title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(times_s * 1e3, values, lw=1.0)
    ax.axhline(1.0, color="k", ls=":", lw=0.8)
    ax.set_xlabel("time [ms]")
    ax.set_ylabel("normalized echo density")
    ax.set_xlim(left=0)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_band_metrics(path, analysis: dict, title: str = "") -> None:
    """T30 and EDT per octave band, side by side."""
    bands = sorted(analysis["bands"])
    t30v = [analysis["bands"][b]["t30_s"] for b in bands]
    edtv = [analysis["bands"][b]["edt_ms"] for b in bands]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(bands))
    labels = ["%gk" % (b / 1000) if b >= 1000 else "%g" % b for b in bands]
    ax1.bar(x, t30v, color="#4878a8")
    ax1.set_xticks(x, labels)
    ax1.set_ylabel("T30 [s]")
    ax2.bar(x, edtv, color="#a85748")
    ax2.set_xticks(x, labels)
    ax2.set_ylabel("EDT [ms]")
    for ax in (ax1, ax2):
        ax.set_xlabel("octave band [Hz]")
        ax.grid(alpha=0.3, axis="y")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_column_sums(path, report: dict) -> None:
    """Kernel energy report figure: per-block column-sum spread."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.axhline(1.0, color="k", ls=":", lw=0.8)
    ax.bar(["min", "max", "raw max"],
           [report["min_column_sum"], report["max_column_sum"],
            report["max_raw_column_sum"]],
           color=["#4878a8", "#4878a8", "#999999"])
    ax.set_ylabel("kernel column sum")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
