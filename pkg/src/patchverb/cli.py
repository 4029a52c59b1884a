"""Batch front end: render impulse responses, evaluate metrics, validate
kernels and feedback designs, and run configuration sweeps.

Setting precedence everywhere: command-line flag > JSON config file
(``--config``) > built-in default.  Exit codes: 0 ok, 1 usage error,
2 pipeline error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import (DEFAULT_FS, DEFAULT_N_RAYS, DEFAULT_SAMPLE_SPACING,
               __version__)
from . import report
from .geometry import SceneError, discretize, eyring_t60, load_scene
from .kernel import (KernelConfig, KernelError, column_sum_report,
                     compute_kernel, enumerate_paths, validate_energy)
from .matrices import (DESIGNS, SinkhornDivergenceError, assemble_feedback,
                       matrix_report_csv)
from .metrics import MetricsError, analyze_rir, edc, ned, preprocess
from .network import NetworkError, build_network, default_length, render
from .tracing import TraceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_VALIDATION = 3

PIPELINE_ERRORS = (SceneError, KernelError, SinkhornDivergenceError,
                   TraceError, NetworkError, MetricsError,
                   np.linalg.LinAlgError, json.JSONDecodeError, OSError)

DEFAULTS = {
    "scene": None,
    "design": "householder",
    "K": 1,
    "spread": False,
    "max_edge": 2.0,
    "sample_spacing": DEFAULT_SAMPLE_SPACING,
    "n_rays": DEFAULT_N_RAYS,
    "fs": DEFAULT_FS,
    "seed": 0,
    "length": "auto",
    "out": "runs",
    "air": True,
    "lossless": False,
    "fd": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as exit-1 usage errors."""

    def error(self, message):
        raise UsageError(message)


def _merge_config(args) -> dict:
    """DEFAULTS <- config file <- explicit flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}")
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys {unknown} in {path}")
        cfg.update(raw)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require_scene(cfg) -> Path:
    if not cfg.get("scene"):
        raise UsageError("a scene file is required (positional or config)")
    path = Path(cfg["scene"])
    if not path.is_file():
        raise UsageError(f"scene file not found: {path}")
    return path


def _parse_length(cfg, scene, fs: int) -> int:
    length = cfg["length"]
    if length in (None, "auto"):
        return default_length(scene, fs)
    try:
        seconds = float(length)
    except (TypeError, ValueError):
        raise UsageError(f"length must be a number of seconds or 'auto', got {length!r}")
    if seconds <= 0:
        raise UsageError("length must be positive")
    return int(round(seconds * fs))


def _run_name(cfg, scene_path: Path) -> str:
    name = f"{scene_path.stem}_{cfg['design']}_K{cfg['K']}"
    if cfg["spread"]:
        name += "_spread"
    if cfg["lossless"]:
        name += "_lossless"
    if cfg["fd"]:
        name += "_fd"
    return name


def _build_pipeline(cfg, scene_path: Path, timings: dict):
    """scene -> patches -> paths -> kernel, with per-stage timing."""
    stages = [
        ("scene", lambda: load_scene(scene_path)),
    ]
    results = {}
    for label, fn in stages:
        t0 = time.perf_counter()
        results[label] = fn()
        timings[label] = time.perf_counter() - t0
    scene = results["scene"]

    t0 = time.perf_counter()
    patches = discretize(scene, cfg["max_edge"])
    timings["discretize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    paths = enumerate_paths(patches, scene, fs=cfg["fs"])
    timings["paths"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kern = compute_kernel(patches, paths,
                          KernelConfig(sample_spacing=cfg["sample_spacing"]))
    timings["kernel"] = time.perf_counter() - t0
    return scene, patches, paths, kern


def _render_run(cfg) -> dict:
    """Full render pipeline for one merged config; returns a summary dict."""
    scene_path = _require_scene(cfg)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    scene, patches, paths, kern = _build_pipeline(cfg, scene_path, timings)

    t0 = time.perf_counter()
    net = build_network(scene, patches, paths, kern,
                        design=cfg["design"], K=int(cfg["K"]),
                        seed=int(cfg["seed"]), n_rays=int(cfg["n_rays"]),
                        spread=bool(cfg["spread"]), air=bool(cfg["air"]),
                        lossless=bool(cfg["lossless"]), fd=bool(cfg["fd"]))
    timings["network"] = time.perf_counter() - t0

    length = _parse_length(cfg, scene, paths.fs)
    t0 = time.perf_counter()
    rir = render(net, length)
    timings["render"] = time.perf_counter() - t0

    name = _run_name(cfg, scene_path)
    wav_path = out_dir / f"{name}.wav"
    report.write_wav(wav_path, rir.samples, rir.fs)
    manifest = report.build_manifest(
        config={**cfg, "scene": str(scene_path)},
        n_patches=len(patches), n_lines=len(paths), timings=timings,
        extra={
            "wav": wav_path.name,
            "length_samples": len(rir),
            "speed_of_sound": scene.speed_of_sound,
            "eyring_t60_s": round(eyring_t60(scene), 4),
            "injection": net.meta["injection"],
        })
    report.write_manifest(out_dir / f"{name}.manifest.json", manifest)
    return {"name": name, "wav": str(wav_path), "N": len(patches),
            "M": len(paths), "seconds": round(sum(timings.values()), 2)}


def cmd_render(args) -> int:
    cfg = _merge_config(args)
    try:
        info = _render_run(cfg)
    except PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    print(f"{info['wav']}  N={info['N']} M={info['M']}  "
          f"({info['seconds']} s)")
    return EXIT_OK


def _tag_from_manifest(wav_path: Path) -> dict:
    tag = {"scene": wav_path.stem, "design": "", "K": "", "spread": "",
           "M": ""}
    man_path = wav_path.with_suffix(".manifest.json")
    if not man_path.is_file():
        return tag
    try:
        with open(man_path, encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return tag
    cfg = man.get("config", {})
    if cfg.get("scene"):
        tag["scene"] = Path(str(cfg["scene"])).stem
    for key in ("design", "K", "spread"):
        if key in cfg:
            tag[key] = cfg[key]
    if "M_lines" in man:
        tag["M"] = man["M_lines"]
    return tag


def cmd_metrics(args) -> int:
    if args.window < 1.0:
        raise UsageError("NED window must be at least 1 ms")
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for wav in args.wavs:
        path = Path(wav)
        dest = out_dir or path.parent
        tag = _tag_from_manifest(path)
        csv_path = dest / f"{path.stem}.metrics.csv"
        try:
            h, fs = report.read_wav(path)
            if len(h) < int(round(args.window * 1e-3 * fs)):
                raise MetricsError(
                    f"shorter than one {args.window:g} ms window")
            analysis = analyze_rir(h, fs, bands=args.bands)
        except (OSError, ValueError, MetricsError) as exc:
            report.write_metrics_csv(csv_path, [report.error_row(tag, str(exc))])
            print(f"{path}: error: {exc}", file=sys.stderr)
            continue

        report.write_metrics_csv(csv_path, report.metrics_rows(tag, analysis))
        hp = preprocess(h, fs)
        times, values = ned(hp, fs, window_ms=args.window)
        report.write_trace_csv(dest / f"{path.stem}.ned.csv", times, values)
        curve = edc(hp)
        hop = max(1, int(round(fs / 1000.0)))  # 1 ms grid for the EDC dump
        sel = np.arange(0, len(curve), hop)
        report.write_trace_csv(dest / f"{path.stem}.edc.csv", sel / fs,
                               curve[sel])
        report.plot_edc(dest / f"{path.stem}.edc.png", hp, fs,
                        title=path.stem)
        report.plot_ned(dest / f"{path.stem}.ned.png", times, values,
                        title=path.stem)
        if args.bands:
            report.plot_band_metrics(dest / f"{path.stem}.bands.png",
                                     analysis, title=path.stem)
        bb = analysis["broadband"]
        print(f"{path.stem}: T30 {bb['t30_s']:.3f} s, "
              f"EDT {bb['edt_ms']:.1f} ms -> {csv_path}")
    return EXIT_OK


def _validate_designs(cfg, patches, kern, designs, out_dir, summary) -> bool:
    ok = True
    for design in designs:
        try:
            fb = assemble_feedback(kern, patches, design,
                                   seed=int(cfg["seed"]))
        except SinkhornDivergenceError as exc:
            print(f"{design}: FAIL ({exc})")
            summary[design] = {"ok": False, "error": str(exc)}
            ok = False
            continue
        oerr = fb.max_orthogonality_error()
        entry = {"ok": oerr <= 1e-9, "max_orthogonality_error": oerr}
        line = f"{design}: max block orthogonality error {oerr:.3e}"
        if design == "sinkhorn":
            residuals = [b.residual for b in fb.blocks if b.matrix.size]
            comps = np.concatenate(
                [b.comp_in for b in fb.blocks if b.comp_in is not None])
            entry["mean_residual"] = float(np.mean(residuals))
            entry["compensation_range"] = [float(comps.min()),
                                           float(comps.max())]
            line += (f", mean residual {entry['mean_residual']:.3f}, "
                     f"compensation in [{comps.min():.2f}, {comps.max():.2f}]")
        if design == "uniform":
            # B.B is doubly stochastic exactly when B is orthogonal; the
            # vs-target residual has a positive floor (targets are not
            # generally orthostochastic) and is informational only.
            ds_dev, res = 0.0, []
            for b in fb.blocks:
                if not b.matrix.size:
                    continue
                e = b.matrix * b.matrix
                ds_dev = max(ds_dev, float(np.abs(e.sum(0) - 1.0).max()),
                             float(np.abs(e.sum(1) - 1.0).max()))
                res.append(b.residual)
            entry["doubly_stochastic_deviation"] = ds_dev
            entry["mean_residual"] = float(np.mean(res))
            entry["ok"] = entry["ok"] and ds_dev < 1e-6
            line += (f", |B|∘|B| doubly-stochastic dev {ds_dev:.2e}, "
                     f"mean residual vs target {entry['mean_residual']:.3f}")
        print(line + ("" if entry["ok"] else "  FAIL"))
        matrix_report_csv(fb, kern, out_dir / f"matrix_{design}.csv")
        summary[design] = entry
        ok = ok and entry["ok"]
    return ok


def cmd_validate(args) -> int:
    if args.kernel_csv:
        if not Path(args.kernel_csv).is_file():
            raise UsageError(f"kernel dump not found: {args.kernel_csv}")
        try:
            rep = column_sum_report(args.kernel_csv)
        except (OSError, KernelError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PIPELINE
        print(f"kernel dump {args.kernel_csv}: max column sum "
              f"{rep['max_column_sum']:.6f}")
        if not rep["ok"]:
            for col in rep["columns_over_unit"]:
                print(f"  column {col}: sum exceeds 1")
            for col in rep["negative_value_columns"]:
                print(f"  column {col}: negative entries")
            return EXIT_VALIDATION
        return EXIT_OK

    cfg = _merge_config(args)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    try:
        scene_path = _require_scene(cfg)
        scene, patches, paths, kern = _build_pipeline(cfg, scene_path, timings)
    except PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    energy = validate_energy(kern)
    print(f"{scene_path.stem}: N={len(patches)} M={len(paths)}")
    print(f"kernel column sums in [{energy['min_column_sum']:.6f}, "
          f"{energy['max_column_sum']:.6f}], raw max "
          f"{energy['max_raw_column_sum']:.3f}")
    if energy["columns_over_unit"]:
        print(f"  columns over unit: {energy['columns_over_unit']}")
    report.plot_column_sums(out_dir / "kernel_energy.png", energy)

    designs = DESIGNS if args.design in (None, "all") else (args.design,)
    summary = {"kernel": {k: v for k, v in energy.items()
                          if k != "block_sizes"}}
    ok = energy["ok"]
    ok = _validate_designs(cfg, patches, kern, designs, out_dir, summary) and ok
    report.write_manifest(out_dir / "validation.json",
                          {"scene": str(scene_path), "ok": ok, **summary})
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VALIDATION


def _sweep_configs(grid_path: Path) -> list:
    try:
        with open(grid_path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read sweep file: {exc}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"sweep file {grid_path}: {exc}")
    if "configs" in raw:
        entries = raw["configs"]
    elif "grid" in raw:
        base = raw.get("base", {})
        keys = sorted(raw["grid"])
        entries = [dict(base, **dict(zip(keys, combo)))
                   for combo in itertools.product(*(raw["grid"][k]
                                                    for k in keys))]
    else:
        raise UsageError("sweep file needs a 'configs' list or a "
                         "'base'+'grid' pair")
    configs = []
    for entry in entries:
        unknown = sorted(set(entry) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown sweep keys {unknown}")
        configs.append({**DEFAULTS, **entry})
    if not configs:
        raise UsageError("sweep file produced no configurations")
    return configs


def _sweep_worker(item):
    index, cfg = item
    try:
        info = _render_run(cfg)
    except (UsageError,) + PIPELINE_ERRORS as exc:
        return {"index": index, "name": cfg.get("scene", "?"),
                "status": "error", "error": str(exc)}
    info.update({"index": index, "status": "ok"})
    return info


def cmd_sweep(args) -> int:
    configs = _sweep_configs(Path(args.grid))
    out_root = Path(args.out or "sweep")
    out_root.mkdir(parents=True, exist_ok=True)
    items = []
    for i, cfg in enumerate(configs):
        run = dict(cfg)
        run["out"] = str(out_root / f"{i:03d}")
        items.append((i, run))

    jobs = args.jobs or min(len(items), 4)
    if jobs <= 1:
        results = [_sweep_worker(item) for item in items]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, items))

    results.sort(key=lambda r: r["index"])
    failed = 0
    with open(out_root / "sweep_summary.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("index,name,status,N,M,seconds,error\n")
        for r in results:
            fh.write(f"{r['index']},{r.get('name', '')},{r['status']},"
                     f"{r.get('N', '')},{r.get('M', '')},"
                     f"{r.get('seconds', '')},{r.get('error', '')}\n")
            status = r["status"]
            if status != "ok":
                failed += 1
                print(f"[{r['index']:03d}] {status}: {r.get('error')}",
                      file=sys.stderr)
            else:
                print(f"[{r['index']:03d}] {r['name']}  N={r['N']} "
                      f"M={r['M']}  ({r['seconds']} s)")
    print(f"{len(results) - failed}/{len(results)} runs ok -> "
          f"{out_root / 'sweep_summary.csv'}")
    return EXIT_OK if failed == 0 else EXIT_PIPELINE


def _add_run_flags(sp, design_choices=DESIGNS):
    sp.add_argument("scene", nargs="?", help="scene JSON file")
    sp.add_argument("--config", help="JSON config file (flags override it)")
    sp.add_argument("--design", choices=design_choices)
    sp.add_argument("-K", "--order", dest="K", type=int,
                    help="early-reflection injection order")
    sp.add_argument("--spread", action=argparse.BooleanOptionalAction,
                    default=None, help="temporal spread injectors")
    sp.add_argument("--max-edge", dest="max_edge", type=float,
                    help="patch subdivision edge length, m")
    sp.add_argument("--sample-spacing", dest="sample_spacing", type=float,
                    help="kernel quadrature spacing, m")
    sp.add_argument("--n-rays", dest="n_rays", type=int)
    sp.add_argument("--fs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("-o", "--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchverb",
                     description="Room impulse responses from a recursive "
                                 "delay network driven by surface energy "
                                 "transfer.")
    parser.add_argument("--version", action="version",
                        version=f"patchverb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    rp = sub.add_parser("render", help="render one impulse response")
    _add_run_flags(rp)
    rp.add_argument("--length", help="render length in seconds, or 'auto'")
    rp.add_argument("--air", action=argparse.BooleanOptionalAction,
                    default=None, help="apply air absorption")
    rp.add_argument("--lossless", action=argparse.BooleanOptionalAction,
                    default=None, help="zero wall/air losses (stability runs)")
    rp.add_argument("--fd", action=argparse.BooleanOptionalAction,
                    default=None, help="frequency-dependent delay operators")
    rp.set_defaults(func=cmd_render)

    mp = sub.add_parser("metrics", help="evaluate T30/EDT/NED on WAV files")
    mp.add_argument("wavs", nargs="+", help="rendered WAV files")
    mp.add_argument("--window", type=float, default=25.0,
                    help="NED window, ms (default 25)")
    mp.add_argument("--bands", action=argparse.BooleanOptionalAction,
                    default=True, help="per-octave-band metrics")
    mp.add_argument("-o", "--out", help="output directory (default: "
                                        "alongside each input)")
    mp.set_defaults(func=cmd_metrics)

    vp = sub.add_parser("validate",
                        help="check kernel energy and feedback designs")
    _add_run_flags(vp, design_choices=DESIGNS + ("all",))
    vp.add_argument("--kernel-csv", dest="kernel_csv",
                    help="validate a kernel CSV dump instead of a scene")
    vp.set_defaults(func=cmd_validate)

    wp = sub.add_parser("sweep", help="run a grid of render configs "
                                      "in parallel")
    wp.add_argument("grid", help="JSON file: {'configs': [...]} or "
                                 "{'base': {...}, 'grid': {...}}")
    wp.add_argument("-o", "--out", help="output root (default ./sweep)")
    wp.add_argument("-j", "--jobs", type=int,
                    help="parallel processes (default up to 4)")
    wp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
