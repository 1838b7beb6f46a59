"""Command-line interface: ``segment``, ``evaluate``, ``phantom`` and ``sweep``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error. Failures
print a JSON object ``{"error": {...}}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bias import DEFAULT_CONTROL_SPACING
from .errors import InputError, NumericalError, SegmentationError
from .metrics import REPORT_COLUMNS, delta_icv, icv_fractions, overlap_report
from .mixture import load_model, save_model
from .mrf import load_transition
from .nifti import load_labels, load_volume, save_labels, save_volume
from .phantom import LAYOUTS, PhantomSpec, TissueSpec, contrast_noise, generate, random_bias, write_phantom
from .pipeline import SegmentConfig, fit_mixture, run_segmentation
from .pv import load_topology
from .volume import GridGeometry, MultichannelVolume, ScalarVolume, translate_channel

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: str) -> str:
    if not os.path.isfile(path):
        raise InputError(f"input file not found: {path}", path=path)
    return path


def _set_threads(n: Optional[int]) -> int:
    """Validate the thread budget. Every kernel runs serially with a fixed
    reduction order, so the value is recorded but cannot change results."""
    if n is None:
        return 1
    if n < 1:
        raise InputError("--threads must be >= 1")
    return n


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"invalid {what}: {text!r}") from exc


def _grid(text: str) -> list[float]:
    """``a:b:step`` inclusive range or a comma list."""
    if ":" in text:
        parts = _floats(text.replace(":", ","), "grid")
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise InputError(f"invalid grid {text!r}")
        n = int(round((parts[1] - parts[0]) / parts[2]))
        return [round(parts[0] + i * parts[2], 10) for i in range(n + 1)]
    return _floats(text, "grid")


def _load_channels(paths: Sequence[str], mask_path: Optional[str]) -> MultichannelVolume:
    if not paths:
        raise InputError("at least one --in channel is required")
    chans, geom = [], None
    for p in paths:
        v = load_volume(_require(p), geom)
        geom = geom or v.geometry
        chans.append(v)
    if mask_path:
        mask = load_volume(_require(mask_path), geom).values > 0
    else:
        # voxels with signal in any channel
        mask = np.any(np.stack([c.values for c in chans]) != 0, axis=0)
    if not mask.any():
        raise InputError("empty mask")
    return MultichannelVolume(geom, tuple(chans), mask)


# ---------------------------------------------------------------- segment


def _shift_positive(mv: MultichannelVolume) -> tuple[MultichannelVolume, list[float]]:
    """Add ``1 - min`` inside the mask to every channel whose in-mask minimum is <= 0."""
    mask = mv.mask_array
    chans, shifts = [], []
    for ch in mv.channels:
        low = float(ch.values[mask].min())
        shift = 1.0 - low if low <= 0 else 0.0
        chans.append(ScalarVolume(mv.geometry, np.where(mask, ch.values + shift, ch.values)) if shift else ch)
        shifts.append(shift)
    return MultichannelVolume(mv.geometry, tuple(chans), mask), shifts


def _segment_config(args, mv: MultichannelVolume) -> SegmentConfig:
    init, manual, priors = args.init, None, None
    if init.startswith("manual:"):
        manual = load_model(_require(init.split(":", 1)[1]))
        init = "manual"
    elif init.startswith("priors:"):
        files = [f for f in init.split(":", 1)[1].split(",") if f]
        priors = tuple(load_volume(_require(f), mv.geometry) for f in files)
        init = "priors"
    elif init != "kmeans":
        raise InputError(f"unknown --init {args.init!r}")
    penalties = None
    if args.transition:
        penalties = load_transition(_require(args.transition), args.lam).penalties
    topology = load_topology(_require(args.pv)) if args.pv else None
    return SegmentConfig(
        n_classes=args.classes,
        init=init,
        manual_model=manual,
        prior_maps=priors,
        lam=args.lam,
        neighborhood=args.neighborhood,
        penalties=penalties,
        mover=args.mover,
        bias=args.bias == "on",
        bias_spacing=args.bias_spacing,
        topology=topology,
        seed=args.seed,
        max_iterations=args.max_iterations,
        tolerance=args.tolerance,
        outer_loops=args.outer_loops,
        enhance_channel=None if args.enhance_channel is None else args.enhance_channel - 1,
        enhance_percentile=args.enhance_percentile,
    )


def cmd_segment(args) -> int:
    threads = _set_threads(args.threads)
    t0 = time.perf_counter()
    mv = _load_channels(args.inputs, args.mask)
    shifts = [0.0] * mv.n_channels
    if args.shift_positive:
        mv, shifts = _shift_positive(mv)
    cfg = _segment_config(args, mv)
    t_load = time.perf_counter() - t0
    res = run_segmentation(mv, cfg)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    written = []

    def put(name, writer, obj, *extra):
        writer(obj, os.path.join(out, name), *extra)
        written.append(name)

    t = time.perf_counter()
    for k in range(res.tissue_maps.n_classes):
        put(f"tpm_{k + 1}.nii", save_volume, res.tissue_maps.volume(k))
    put("labels.nii", save_labels, res.tissue_labels)
    geom = mv.geometry
    for c in range(mv.n_channels):
        field = res.bias_fields[c] if res.bias_fields else ScalarVolume(geom, np.where(mv.mask_array, 1.0, 0.0))
        put(f"bias_{c + 1}.nii", save_volume, field)
        put(f"corrected_{c + 1}.nii", save_volume, res.corrected.channels[c])
    put("model.json", save_model, res.model)
    timings = {"load": t_load, **res.timings, "write": time.perf_counter() - t}
    manifest = {
        "tool": "mvseg",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": "segment",
        "configuration": {**cfg.as_dict(), "threads": threads},
        "intensity_shift": shifts,
        "inputs": [{"path": p, "sha256": _sha256(p)} for p in args.inputs]
        + ([{"path": args.mask, "sha256": _sha256(args.mask), "role": "mask"}] if args.mask else []),
        "em": {
            "converged": res.em.converged,
            "iterations": [r.as_dict() for r in res.em.log],
            "warnings": res.em.warnings,
        },
        "mrf": res.mrf_log,
        "model_means": res.model.means.tolist(),
        "timings_s": timings,
        "outputs": [{"path": n, "sha256": _sha256(os.path.join(out, n))} for n in written],
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return 0


# --------------------------------------------------------------- evaluate


def _load_maps(paths, geom):
    maps = [load_volume(_require(p), geom).values for p in paths]
    return np.stack(maps)


def _write_rows(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_evaluate(args) -> int:
    _set_threads(args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    names = args.names.split(",") if args.names else None
    if args.scan or args.rescan:
        if not (args.scan and args.rescan):
            raise InputError("scan-rescan mode needs both --scan and --rescan")
        a = load_labels(_require(args.scan))
        b = load_labels(_require(args.rescan), expected=a.geometry)
        k = max(a.n_classes, b.n_classes)
        a = type(a)(a.geometry, a.labels, k)
        b = type(b)(b.geometry, b.labels, k)
        ra = icv_fractions(a, a.geometry, names=names)
        rb = icv_fractions(b, b.geometry, names=names)
        delta = delta_icv(ra, rb)
        rows = [[n, fa, fb, d] for n, fa, fb, d in zip(ra.names, ra.fraction, rb.fraction, delta)]
        _write_rows(os.path.join(args.out_dir, "delta_icv.csv"), ["class", "icv_scan", "icv_rescan", "delta_icv"], rows)
        with open(os.path.join(args.out_dir, "delta_icv.json"), "w") as fh:
            json.dump({"scan": ra.as_dict(), "rescan": rb.as_dict(), "delta_icv": dict(zip(ra.names, delta))}, fh, indent=2)
        return 0

    pred = truth = pm = tm = None
    geom = None
    if args.pred_labels or args.truth_labels:
        if not (args.pred_labels and args.truth_labels):
            raise InputError("hard mode needs --pred-labels and --truth-labels")
        truth = load_labels(_require(args.truth_labels))
        pred = load_labels(_require(args.pred_labels), expected=truth.geometry)
        k = max(pred.n_classes, truth.n_classes)
        pred = type(pred)(pred.geometry, pred.labels, k)
        truth = type(truth)(truth.geometry, truth.labels, k)
        geom = truth.geometry
    if args.pred_tpm or args.truth_tpm:
        if len(args.pred_tpm or []) != len(args.truth_tpm or []):
            raise InputError("fuzzy mode needs the same number of --pred-tpm and --truth-tpm maps")
        first = load_volume(_require(args.truth_tpm[0]), geom)
        geom = first.geometry
        tm = _load_maps(args.truth_tpm, geom)
        pm = _load_maps(args.pred_tpm, geom)
    if geom is None:
        raise InputError("nothing to evaluate: give label maps and/or TPMs")
    mask = load_volume(_require(args.mask), geom).values > 0 if args.mask else None
    if mask is None and tm is not None and truth is None:
        mask = tm.sum(axis=0) > 0
    report = overlap_report(pred, truth, pm, tm, names, geom, mask, args.average)
    with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
    vol_src = truth if truth is not None else tm
    vols = {"truth": icv_fractions(vol_src, geom, mask, names).as_dict()}
    vols["prediction"] = icv_fractions(pred if pred is not None else pm, geom, mask, names).as_dict()
    with open(os.path.join(args.out_dir, "volumes.json"), "w") as fh:
        json.dump(vols, fh, indent=2)
    return 0


# ---------------------------------------------------------------- phantom


def _tissues(args) -> tuple:
    """``--means "100,200,300"`` (one channel) or ``"100:50,200:80"`` (channels split by ':')."""
    groups = [g for g in args.means.split(",") if g]
    means = [tuple(_floats(g.replace(":", ","), "means")) for g in groups]
    widths = _floats(args.pv_width, "PV widths") if args.pv_width else [0.0]
    if len(widths) == 1:
        widths = widths * len(means)
    if len(widths) != len(means):
        raise InputError("--pv-width needs one value or one per tissue")
    return tuple(TissueSpec(m, None, w) for m, w in zip(means, widths)), means


def phantom_from_args(args):
    dims = tuple(int(d) for d in _floats(args.dims, "dims"))
    spacing = tuple(_floats(args.spacing, "spacing"))
    if len(dims) != 3 or len(spacing) not in (1, 3):
        raise InputError("--dims needs 3 values and --spacing 1 or 3")
    geom = GridGeometry(dims, spacing * 3 if len(spacing) == 1 else spacing)
    tissues, means = _tissues(args)
    if args.noise is not None:
        sigma = tuple(_floats(args.noise, "noise"))
    else:
        sigma = contrast_noise(means, args.noise_fraction)
    bias = None
    if args.bias_range > 0:
        bias = random_bias(geom, len(means[0]), args.bias_range, args.bias_spacing, 3, args.seed + 1)
    spec = PhantomSpec(
        geom, tissues, args.layout, sigma, bias, args.seed, stripe_width=args.stripe_width, block=args.block
    )
    return generate(spec)


def cmd_phantom(args) -> int:
    _set_threads(args.threads)
    ph = phantom_from_args(args)
    write_phantom(ph, args.out_dir)
    return 0


# ------------------------------------------------------------------ sweep


def _sweep_inputs(args):
    if args.inputs:
        mv = _load_channels(args.inputs, args.mask)
        if not args.truth_tpm:
            raise InputError("sweep on a dataset needs --truth-tpm maps")
        truth = _load_maps(args.truth_tpm, mv.geometry)
        return mv, truth
    ph = phantom_from_args(args)
    return ph.volume, ph.truth.maps


def cmd_sweep(args) -> int:
    from .metrics import fuzzy_jaccard, similarity_index

    _set_threads(args.threads)
    mv, truth = _sweep_inputs(args)
    k = truth.shape[0]
    lambdas = _grid(args.lambdas)
    modes = [m for m in args.bias_modes.split(",") if m]
    if any(m not in ("on", "off") for m in modes):
        raise InputError("--bias-modes takes 'on' and/or 'off'")
    shifts = _floats(args.misregister, "shifts") if args.misregister else [0.0]
    axis = "xyz".index(args.misregister_axis)
    rows, best, intensity_shifts = [], {}, []
    for shift in shifts:
        offset = [0.0, 0.0, 0.0]
        offset[axis] = shift * mv.geometry.spacing[axis]
        vol = translate_channel(mv, args.misregister_channel - 1, offset) if shift else mv
        for mode in modes:
            if mode == "on":
                # resampling can pull zero background into the mask; log-domain bias needs > 0
                vol_mode, added = _shift_positive(vol)
                if any(added):
                    intensity_shifts.append({"shift_voxels": shift, "intensity_shift": added})
            else:
                vol_mode = vol
            base = SegmentConfig(n_classes=k, bias=mode == "on", seed=args.seed, mover=args.mover,
                                 neighborhood=args.neighborhood, bias_spacing=args.bias_spacing)
            em = fit_mixture(vol_mode, base)
            for lam in lambdas:
                cfg = SegmentConfig(**{**_config_kwargs(base), "lam": lam})
                res = run_segmentation(vol_mode, cfg, em)
                mask = vol.mask_array & (truth.sum(axis=0) > 0)
                fsi = [similarity_index(fuzzy_jaccard(res.responsibilities.maps[j], truth[j], mask)) for j in range(k)]
                mean = float(np.mean(fsi))
                rows.append([mode, lam, shift, *fsi, mean])
                key = (mode, shift)
                if key not in best or mean > best[key][1]:
                    best[key] = (lam, mean)
    header = ["bias", "lambda", "shift_voxels", *[f"fSI_{j + 1}" for j in range(k)], "mean_fSI"]
    os.makedirs(args.out_dir, exist_ok=True)
    _write_rows(os.path.join(args.out_dir, "sweep.csv"), header, rows)
    summary = [{"bias": m, "shift_voxels": s, "argmax_lambda": v[0], "max_mean_fSI": v[1]} for (m, s), v in best.items()]
    with open(os.path.join(args.out_dir, "sweep.json"), "w") as fh:
        json.dump({"argmax": summary, "intensity_shifts": intensity_shifts}, fh, indent=2)
    for s in summary:
        print(json.dumps(s))
    return 0


def _config_kwargs(cfg: SegmentConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# ----------------------------------------------------------------- parser


def _phantom_options(p):
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--spacing", default="1")
    p.add_argument("--layout", choices=LAYOUTS, default="nested-ellipsoids")
    p.add_argument("--means", default="100,200,300", help="tissue means; ':' separates channels")
    p.add_argument("--noise-fraction", type=float, default=0.05, help="noise sigma as a fraction of contrast")
    p.add_argument("--noise", default=None, help="explicit per-channel noise sigma")
    p.add_argument("--pv-width", default=None, help="PV band width in voxels (one or per tissue)")
    p.add_argument("--bias-range", type=float, default=0.0, help="max |log bias|; 0 disables bias")
    p.add_argument("--stripe-width", type=int, default=8)
    p.add_argument("--block", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvseg", description="Multivariate EM + graph-cut brain tissue segmentation.")
    parser.add_argument("--version", action="version", version=f"mvseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", required=True)

    s = sub.add_parser("segment", parents=[common], help="segment co-registered channels")
    s.add_argument("--in", dest="inputs", action="append", required=True, help="channel file (repeat; order kept)")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--init", default="kmeans", help="kmeans | manual:<model.json> | priors:<f1,f2,...>")
    s.add_argument("--lambda", dest="lam", type=float, default=0.6)
    s.add_argument("--neighborhood", type=int, choices=(6, 18, 26), default=6)
    s.add_argument("--transition", default=None, help="K x K penalty matrix file (Potts if omitted)")
    s.add_argument("--mover", choices=("swap", "expansion"), default="swap")
    s.add_argument("--bias", choices=("on", "off"), default="off")
    s.add_argument("--bias-spacing", type=float, default=DEFAULT_CONTROL_SPACING, help="control spacing in mm")
    s.add_argument("--pv", default=None, help="tissue topology JSON")
    s.add_argument("--mask", default=None)
    s.add_argument(
        "--shift-positive",
        action="store_true",
        help="add 1 - min inside the mask to channels with non-positive values (needed for --bias on)",
    )
    s.add_argument("--outer-loops", type=int, default=1)
    s.add_argument("--max-iterations", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-6)
    s.add_argument("--enhance-channel", type=int, default=None, help="1-based channel for tail enhancement")
    s.add_argument("--enhance-percentile", type=float, default=85.0)
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("evaluate", parents=[common], help="overlap and volume reports")
    e.add_argument("--pred-labels")
    e.add_argument("--truth-labels")
    e.add_argument("--pred-tpm", action="append")
    e.add_argument("--truth-tpm", action="append")
    e.add_argument("--mask")
    e.add_argument("--names", help="comma-separated class names")
    e.add_argument("--average", choices=("inverse", "mean"), default="inverse")
    e.add_argument("--scan", help="scan label map (scan-rescan mode)")
    e.add_argument("--rescan", help="rescan label map (scan-rescan mode)")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom")
    _phantom_options(p)
    p.add_argument("--bias-spacing", type=float, default=DEFAULT_CONTROL_SPACING)
    p.set_defaults(func=cmd_phantom)

    w = sub.add_parser("sweep", parents=[common], help="lambda / misregistration sweep")
    w.add_argument("--in", dest="inputs", action="append", help="channel files; a phantom is generated if omitted")
    w.add_argument("--truth-tpm", action="append")
    w.add_argument("--mask")
    _phantom_options(w)
    w.add_argument("--lambdas", default="0:1.2:0.1", help="a:b:step or comma list")
    w.add_argument("--bias-modes", default="off,on")
    w.add_argument("--bias-spacing", type=float, default=DEFAULT_CONTROL_SPACING)
    w.add_argument("--mover", choices=("swap", "expansion"), default="swap")
    w.add_argument("--neighborhood", type=int, choices=(6, 18, 26), default=6)
    w.add_argument("--misregister", default=None, help="comma list of shifts in voxels")
    w.add_argument("--misregister-channel", type=int, default=1)
    w.add_argument("--misregister-axis", choices=tuple("xyz"), default="y")
    w.set_defaults(func=cmd_sweep)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    err = {"type": type(exc).__name__, "message": str(exc), "exit_code": code}
    path = getattr(exc, "path", None)
    if path is not None:
        err["path"] = os.fspath(path)
    print(json.dumps({"error": err}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        return _fail(exc, 2)
    except (NumericalError, SegmentationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc, 1)
    except OSError as exc:
        return _fail(exc, 2)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
