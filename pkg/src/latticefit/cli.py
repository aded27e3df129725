"""Command-line front end.

Subcommands: simulate, calibrate-lsf, analyze, stats. Every flag can also be
given in a key-value config file (--config, or the LATTICEFIT_CONFIG
environment variable for a default path); explicit flags win. Exit codes:
0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .errors import CalibrationError, DataError, LatticefitError
from .estimator import AnalysisCalib, analyze_frame
from .lsf import fit_lsf, load_lsf, save_lsf, stack_isolated
from .pipeline import SegmentParams, bin_vertical, estimate_background, segment, Profile
from .simulate import SimConfig, run_campaign
from . import stats as stats_mod

log = logging.getLogger(__name__)

CONFIG_ENV = "LATTICEFIT_CONFIG"

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    """argparse parser using exit code 1 for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Per-subcommand flag registry: dest -> (converter, default, help).
# Defaults are applied after the config file, so a flag left at None falls
# back to the config entry of the same name, then to the default here.
_FLAGS = {
    "simulate": {
        "out": (str, None, "output directory (required)"),
        "seed": (int, 0, "master RNG seed"),
        "sequences": (int, 1, "number of sequences"),
        "frames_per_sequence": (int, 3, "frames per sequence"),
        "width": (int, 128, "frame width, px"),
        "height": (int, 24, "frame height, px"),
        "pixel_scale": (float, 294.6, "nm per pixel"),
        "sigma_sp_hor": (float, 810.0, "horizontal spot width, nm"),
        "sigma_ver": (float, 1000.0, "vertical spot width, nm"),
        "site_nm": (float, 432.95, "lattice constant, nm"),
        "i_a": (float, 60000.0, "integrated counts per atom"),
        "baseline": (float, 400.0, "background counts per pixel"),
        "readout_sigma": (float, 20.0, "readout noise, counts"),
        "shot_noise": (_to_bool, True, "Poisson shot noise"),
        "mean_atoms": (float, 4.0, "Poisson mean atom number"),
        "fixed_n": (int, None, "fixed atom number (overrides mean)"),
        "loading_sigma_nm": (float, 9.5 * 432.95, "loading distribution width, nm"),
        "on_site_loss": (_to_bool, True, "remove atoms sharing a site"),
        "mid_exposure_loss_prob": (float, 0.0, "per-atom mid-exposure loss probability"),
        "thermal_jitter_nm": (float, 23.0, "per-frame center jitter, nm"),
        "drift_nm_per_s": (float, 12.0, "slow drift rate, nm/s"),
        "exposure": (float, 1.0, "exposure time, s"),
    },
    "calibrate-lsf": {
        "frames": (str, None, "directory of single-atom frames (required)"),
        "out": (str, None, "calibration file to write (required)"),
        "form": (str, "gaussian", "LSF form: gaussian or empirical"),
    },
    "analyze": {
        "frames": (str, None, "directory of frames (required)"),
        "calib": (str, None, "LSF calibration file (required)"),
        "out": (str, None, "JSON-lines records output (required)"),
        "i_a": (float, None, "single-atom integrated counts I_a (required)"),
        "reliability_tol": (float, 0.20, "reliability tolerance on |a-I_a|/I_a"),
        "mode_cutoff": (float, 1e-3, "minimum |LSF Fourier| for usable modes"),
        "count_tolerance": (float, 0.3, "ambiguity threshold on the atom count"),
        "merge_radius_px": (float, 0.5, "merge spikes closer than this"),
        "k_on": (float, 4.0, "segmentation on-threshold, sigmas"),
        "k_off": (float, 1.5, "segmentation off-threshold, sigmas"),
        "boxcar": (int, 3, "segmentation smoothing width, px"),
        "pad": (int, 6, "ROI padding, px"),
        "min_width": (int, 9, "minimum ROI width, px"),
        "jobs": (int, 1, "parallel worker processes"),
    },
    "stats": {
        "records": (str, None, "JSON-lines records input (required)"),
        "out_dir": (str, None, "output directory (required)"),
        "frames_required": (int, 3, "frames per sequence for averaging"),
        "n_max": (int, 30, "highest lattice peak to fit"),
        "lambda_nm": (float, 865.9, "lattice laser wavelength, nm"),
    },
}

_REQUIRED = {
    "simulate": ("out",),
    "calibrate-lsf": ("frames", "out"),
    "analyze": ("frames", "calib", "out", "i_a"),
    "stats": ("records", "out_dir"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="latticefit", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for cmd, flags in _FLAGS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand", add_help=True)
        p.error = parser.error  # same usage-error exit code
        p.add_argument("--config", default=None, help="key-value config file")
        for dest, (_conv, _default, help_text) in flags.items():
            p.add_argument(f"--{dest.replace('_', '-')}", dest=dest, default=None,
                           help=help_text)
    return parser


def _resolve(args: argparse.Namespace, cmd: str) -> argparse.Namespace:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    file_conf: dict[str, str] = {}
    if config_path and Path(config_path).exists():
        file_conf = io.read_kv(config_path)
    for dest, (conv, default, _help) in _FLAGS[cmd].items():
        val = getattr(args, dest)
        if val is not None:
            setattr(args, dest, conv(val))
        elif dest in file_conf:
            setattr(args, dest, conv(file_conf[dest]))
        else:
            setattr(args, dest, default)
    missing = [d for d in _REQUIRED[cmd] if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        print(f"latticefit {cmd}: missing required option(s): {flags}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)
    return args


def _cmd_simulate(args) -> int:
    config = SimConfig(
        width=args.width, height=args.height, pixel_scale=args.pixel_scale,
        sigma_sp_hor=args.sigma_sp_hor, sigma_ver=args.sigma_ver,
        site_nm=args.site_nm, I_a=args.i_a, baseline=args.baseline,
        shot_noise=args.shot_noise, readout_sigma=args.readout_sigma,
        loading_sigma_nm=args.loading_sigma_nm, mean_atoms=args.mean_atoms,
        fixed_n=args.fixed_n, on_site_loss=args.on_site_loss,
        mid_exposure_loss_prob=args.mid_exposure_loss_prob,
        thermal_jitter_nm=args.thermal_jitter_nm,
        drift_nm_per_s=args.drift_nm_per_s,
        frames_per_sequence=args.frames_per_sequence, exposure=args.exposure,
        n_sequences=args.sequences,
    )
    campaign = run_campaign(config, args.seed)
    io.write_campaign(campaign, args.out)
    print(f"wrote {len(campaign.frames)} frames from {args.sequences} sequences to {args.out}")
    return 0


def _cmd_calibrate_lsf(args) -> int:
    files = io.list_frame_files(args.frames)
    if not files:
        raise DataError(f"no frame files in {args.frames}")
    profiles, noises = [], []
    for path in files:
        try:
            frame = io.load_frame(path)
        except DataError as exc:
            log.warning("%s skipped: %s", path, exc)
            continue
        profile = bin_vertical(frame)
        noise = estimate_background(profile)
        rois = segment(profile, noise)
        if len(rois) != 1:
            log.info("%s: %d ROIs, not an isolated atom; skipped", path, len(rois))
            continue
        roi = rois[0]
        profiles.append(Profile(
            profile.intensities[roi.start:roi.end],
            origin=roi.start, pixel_scale=frame.pixel_scale,
        ))
        noises.append(noise)
    if not profiles:
        raise DataError("no isolated-atom ROIs found in input frames")
    if len(profiles) == 1:
        print("warning: calibration from a single profile has low confidence",
              file=sys.stderr)
    stacked = stack_isolated(profiles, noises)
    model = fit_lsf(stacked, form=args.form)
    save_lsf(model, args.out)
    print(f"calibrated {args.form} LSF from {len(profiles)} profiles: "
          f"{model.metadata['sample_count']} samples, "
          f"residual RMS {model.metadata['residual_rms']:.3e}")
    return 0


def _analyze_one(path_str: str, calib_kw: dict, seg_kw: dict, merge_radius: float):
    """Worker: analyze one frame file; isolated so it can run in a pool."""
    try:
        frame = io.load_frame(Path(path_str))
    except DataError as exc:
        log.warning("%s skipped: %s", path_str, exc)
        return []
    lsf_model = load_lsf(calib_kw["lsf_path"])
    calib = AnalysisCalib(
        I_a=calib_kw["I_a"], lsf=lsf_model, pixel_scale=frame.pixel_scale,
        reliability_tol=calib_kw["reliability_tol"],
        mode_cutoff=calib_kw["mode_cutoff"],
        count_tolerance=calib_kw["count_tolerance"],
    )
    return analyze_frame(frame, calib, SegmentParams(**seg_kw),
                         merge_radius_px=merge_radius)


def _cmd_analyze(args) -> int:
    files = io.list_frame_files(args.frames)
    if not files:
        raise DataError(f"no frame files in {args.frames}")
    if not Path(args.calib).exists():
        raise DataError(f"calibration file {args.calib} not found")
    calib_kw = {
        "lsf_path": args.calib, "I_a": args.i_a,
        "reliability_tol": args.reliability_tol, "mode_cutoff": args.mode_cutoff,
        "count_tolerance": args.count_tolerance,
    }
    seg_kw = {
        "k_on": args.k_on, "k_off": args.k_off, "boxcar_px": args.boxcar,
        "pad_px": args.pad, "min_width_px": args.min_width,
    }
    tasks = [(str(p), calib_kw, seg_kw, args.merge_radius_px) for p in files]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_analyze_one, *zip(*tasks)))
    else:
        results = [_analyze_one(*t) for t in tasks]
    records = [r for frame_records in results for r in frame_records]
    records.sort(key=lambda r: (r.sequence_id, r.frame_id, r.roi_id, r.position_nm))
    io.write_records(records, args.out)
    print(f"analyzed {len(files)} frames -> {len(records)} atom records in {args.out}")
    return 0


def _peak_rows(peaks):
    return [
        {"n": p.n, "center_nm": p.center_nm, "sigma_n_nm": p.sigma_n,
         "amplitude": p.amplitude, "F_n": p.F_n}
        for p in peaks
    ]


def _model_curve(peaks, centers, site):
    out = np.zeros_like(centers)
    for p in peaks:
        if p.sigma_n is not None:
            out += p.amplitude * np.exp(-((centers - p.center_nm) ** 2)
                                        / (2.0 * p.sigma_n**2))
    return out


def _write_histogram_csv(path, centers, counts, model_vals):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("bin_center_nm,count,model_value\n")
        for c, n, m in zip(centers, counts, model_vals):
            fh.write(f"{c:.3f},{n:.0f},{m:.6g}\n")


def _cmd_stats(args) -> int:
    records = io.read_records(args.records)
    if len(records) < 2:
        raise DataError(f"too few records ({len(records)}) for statistics")
    lattice = stats_mod.LatticeCalib(lambda_nm=args.lambda_nm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    single = stats_mod.collect_distances(records, lattice)
    by_seq: dict[str, list] = {}
    for r in records:
        by_seq.setdefault(r.sequence_id, []).append(r)
    averaged = []
    for seq_id in sorted(by_seq):
        averaged.extend(stats_mod.match_and_average(
            by_seq[seq_id], frames_required=args.frames_required, lattice=lattice))

    summary: dict = {
        "n_records": len(records),
        "n_single_distances": len(single),
        "n_averaged_distances": len(averaged),
        "lambda_nm": lattice.lambda_nm,
        "site_nm": lattice.site_nm,
        "frames_required": args.frames_required,
    }
    for label, samples in (("single", single), ("averaged", averaged)):
        if len(samples) >= 10:
            centers, counts = stats_mod.histogram_counts(samples, lattice, args.n_max)
            try:
                peaks = stats_mod.fit_distance_histogram(samples, lattice, args.n_max)
                model_vals = _model_curve(peaks, centers, lattice.site_nm)
                summary[f"peaks_{label}"] = _peak_rows(peaks)
            except DataError as exc:
                log.warning("%s histogram fit skipped: %s", label, exc)
                model_vals = np.zeros_like(centers)
            _write_histogram_csv(out / f"histogram_{label}.csv", centers, counts, model_vals)
            try:
                pair_fit = stats_mod.fit_pair_occurrences(samples, lattice, args.n_max)
                summary[f"pair_model_{label}"] = {
                    "Q0": pair_fit.Q0, "sigma_P_nm": pair_fit.sigma_P_nm,
                }
            except (DataError, ValueError) as exc:
                log.info("%s pair-model fit skipped: %s", label, exc)

    by_frame: dict[str, list] = {}
    for r in records:
        by_frame.setdefault(r.frame_id, []).append(r)
    singles = []
    for frame_records in by_frame.values():
        retained = stats_mod._retained(frame_records)
        if len(retained) == 1:
            singles.append(retained[0].position_nm)
    try:
        loading = stats_mod.fit_loading(singles, lattice)
        summary["loading"] = {
            "center_nm": loading.center_nm, "sigma_P_nm": loading.sigma_P_nm,
            "n_single_atoms": len(singles),
        }
    except (DataError, CalibrationError) as exc:
        log.info("loading fit skipped: %s", exc)

    with open(out / "summary.json", "w", encoding="ascii") as fh:
        json.dump(summary, fh, indent=1)
    print(f"stats over {len(records)} records: {len(single)} single distances, "
          f"{len(averaged)} averaged; outputs in {out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "calibrate-lsf": _cmd_calibrate_lsf,
    "analyze": _cmd_analyze,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        args = _resolve(args, args.command)
    except SystemExit as exc:
        return int(exc.code or USAGE_ERROR)
    try:
        return _COMMANDS[args.command](args)
    except LatticefitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
