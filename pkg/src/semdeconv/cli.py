"""Batch command-line frontend.

Commands: simulate, estimate-psf, denoise, deconvolve, evaluate, selftest.
Parameters live in key-value files; any key can be overridden with
--set namespace.key=value for reproducible runs with small diffs. All
randomness flows from a single --seed. Exit codes: 0 success, 1 usage
error, 2 stage failure (the failing stage is named in the message).
"""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import math
import os
import sys
import time

import numpy as np

from . import psf_model
from .core import (
    Image2D,
    Kernel1D,
    StageError,
    load_image,
    read_keyvalues,
    save_image,
    save_kernel,
    write_keyvalues,
)
from .metrics import boundary_distance_avg, otsu_threshold, recall
from .core import BinaryImage2D
from .noise import NoiseParams
from .psf_estimate import ProfileConfig, estimate_psf_pipeline, register_stack
from .restore import NlmConfig, SolverOptions, compute_weights, deconvolve_map, nlms_filter
from .restore import convolve_circular  # noqa: F401  (re-exported for scripts)
from .simulate import SceneSpec, acquire, acquisition_from_keyvalues, render_scene, scene_mask

PROG = "semdeconv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_files(*paths):
    for p in paths:
        if p and not os.path.isfile(p):
            raise UsageError(f"referenced file does not exist: {p}")


def _parse_overrides(pairs) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in pairs or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects namespace.key=value, got {item!r}")
        key, value = item.split("=", 1)
        ns, name = key.split(".", 1)
        out.setdefault(ns, {})[name] = value
    return out


def _read_params(path: str, namespace: str, overrides) -> dict[str, str]:
    kv = read_keyvalues(path)
    kv.update(overrides.get(namespace, {}))
    return kv


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return None

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, (StageError, UsageError)):
                raise StageError(name, str(exc)) from exc
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(scene_path: str, acq_path: str, psf_path: str, outdir: str,
                 seed=None, overrides=None) -> dict:
    """Render a scene, acquire a frame stack, and write frames + truth sidecars."""
    overrides = overrides or {}
    with _stage("inputs"):
        scene = SceneSpec.from_keyvalues(_read_params(scene_path, "scene", overrides))
        psf = psf_model.params_from_keyvalues(_read_params(psf_path, "psf", overrides))
        acq_kv = _read_params(acq_path, "acq", overrides)
        if seed is not None:
            acq_kv["seed"] = str(seed)
        acq = acquisition_from_keyvalues(acq_kv, psf)
    with _stage("simulate"):
        os.makedirs(outdir, exist_ok=True)
        truth = render_scene(scene)
        mask = scene_mask(scene)
        frames = acquire(truth, acq)
    with _stage("outputs"):
        frame_paths = []
        for i, frame in enumerate(frames):
            p = os.path.join(outdir, f"frame_{i:03d}.pgm")
            save_image(frame, p, bit_depth=16)
            frame_paths.append(p)
        truth_path = os.path.join(outdir, "ground_truth.pgm")
        save_image(truth, truth_path, bit_depth=16)
        mask_path = os.path.join(outdir, "truth_mask.pgm")
        save_image(Image2D(np.where(mask.mask, 255.0, 0.0)), mask_path, bit_depth=8)
        write_keyvalues(os.path.join(outdir, "scene.txt"), scene.to_keyvalues())
        write_keyvalues(os.path.join(outdir, "psf.txt"), psf_model.params_to_keyvalues(psf))
        write_keyvalues(os.path.join(outdir, "noise.txt"), acq.noise.to_keyvalues())
        write_keyvalues(os.path.join(outdir, "acquisition.txt"), {
            "frames": acq.frames,
            "max_jitter": acq.max_jitter,
            "seed": acq.seed,
            "psf_half_width": acq.kernel_half_width(),
        })
    return {"frames": frame_paths, "ground_truth": truth_path, "truth_mask": mask_path}


def _expand_frames(patterns) -> list[str]:
    paths = []
    for pat in patterns:
        hits = sorted(globmod.glob(pat))
        paths.extend(hits if hits else [pat])
    return paths


def cmd_estimate_psf(frame_paths, config_path: str, outdir: str, overrides=None) -> dict:
    """Run the calibration pipeline on a frame stack and write the estimate."""
    overrides = overrides or {}
    with _stage("inputs"):
        kv = _read_params(config_path, "profile", overrides)
        lambda_wave = float(kv["lambda_wave"])
        na = float(kv["na"])
        smooth_sigma = float(kv.get("smooth_sigma", "3.0"))
        max_shift = int(kv.get("max_shift", "10"))
        directions = tuple(
            float(tok) for tok in kv.get("directions", "0 1.5707963267948966").split()
        )
        mode = kv.get("variance_threshold_mode", "auto")
        if mode == "auto":
            var_threshold = None
        elif mode == "absolute":
            var_threshold = float(kv["variance_threshold"])
        else:
            raise ValueError(f"unknown variance_threshold_mode {mode!r}")
        cfg = ProfileConfig(
            half_width=int(kv.get("half_width", "50")),
            variance_threshold=var_threshold,
            min_profiles=int(kv.get("min_profiles", "1")),
        )
        images = [load_image(p) for p in frame_paths]
    estimate = estimate_psf_pipeline(
        images, cfg, smooth_sigma, lambda_wave, na,
        directions=directions, max_shift=max_shift,
    )
    with _stage("outputs"):
        os.makedirs(outdir, exist_ok=True)
        save_kernel(estimate.h_raw, os.path.join(outdir, "h_raw.txt"))
        write_keyvalues(os.path.join(outdir, "fit.txt"), {
            "tau_hat": estimate.airy_fit.params.tau,
            "sigma_hat": estimate.gaussian_fit.params.sigma_psf,
            "airy_residual": estimate.airy_fit.residual,
            "gaussian_residual": estimate.gaussian_fit.residual,
        })
        write_keyvalues(os.path.join(outdir, "diagnostics.txt"), estimate.diagnostics)
    return {
        "sigma_hat": estimate.gaussian_fit.params.sigma_psf,
        "tau_hat": estimate.airy_fit.params.tau,
        "outdir": outdir,
    }


def _load_psf_kernel(path: str, kv_overrides: dict[str, str]):
    """PSF input: either a model parameter file or a 2D tap table."""
    from .core import load_kernel2d

    try:
        kv = read_keyvalues(path)
    except ValueError:
        return load_kernel2d(path)
    kv.update(kv_overrides)
    model = psf_model.params_from_keyvalues(kv)
    if "half_width" in kv:
        half_width = int(kv["half_width"])
    else:
        half_width = psf_model.default_half_width(model)
    return psf_model.discretize_2d(model, half_width)


def cmd_denoise(image_path: str, noise_path: str, nlm_path: str, outdir: str,
                overrides=None) -> dict:
    overrides = overrides or {}
    with _stage("inputs"):
        y = load_image(image_path)
        noise = NoiseParams.from_keyvalues(_read_params(noise_path, "noise", overrides))
        cfg = NlmConfig.from_keyvalues(_read_params(nlm_path, "nlm", overrides))
    with _stage("denoise"):
        weights = compute_weights(y, cfg, noise)
        result = nlms_filter(y, weights)
    with _stage("outputs"):
        os.makedirs(outdir, exist_ok=True)
        out_path = os.path.join(outdir, "denoised.pgm")
        save_image(result, out_path, bit_depth=16)
    return {"denoised": out_path}


def cmd_deconvolve(image_path: str, psf_path: str, noise_path: str, nlm_path: str,
                   solver_path: str, outdir: str, overrides=None) -> dict:
    overrides = overrides or {}
    with _stage("inputs"):
        y = load_image(image_path)
        kernel = _load_psf_kernel(psf_path, (overrides or {}).get("psf", {}))
        noise = NoiseParams.from_keyvalues(_read_params(noise_path, "noise", overrides))
        cfg = NlmConfig.from_keyvalues(_read_params(nlm_path, "nlm", overrides))
        opts = SolverOptions.from_keyvalues(_read_params(solver_path, "solver", overrides))
    with _stage("deconvolve"):
        restored, log = deconvolve_map(y, kernel, cfg, noise, opts)
    with _stage("outputs"):
        os.makedirs(outdir, exist_ok=True)
        out_path = os.path.join(outdir, "restored.pgm")
        save_image(restored, out_path, bit_depth=16)
        log_path = os.path.join(outdir, "solver_log.csv")
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "energy", "step"])
            for rec in log:
                writer.writerow([rec.iteration, format(rec.energy, ".17g"), format(rec.step, ".17g")])
    return {"restored": out_path, "solver_log": log_path}


def _load_mask(path: str) -> BinaryImage2D:
    img = load_image(path)
    return BinaryImage2D(img.data > 0)


def cmd_evaluate(pred_paths, gt_paths, outdir: str) -> dict:
    """Per-slice recall and averaged boundary distance, plus the means."""
    if len(pred_paths) != len(gt_paths):
        raise UsageError(
            f"{len(pred_paths)} prediction masks vs {len(gt_paths)} ground-truth masks"
        )
    with _stage("metrics"):
        rows = []
        for i, (pp, gp) in enumerate(zip(pred_paths, gt_paths)):
            pred = _load_mask(pp)
            gt = _load_mask(gp)
            rows.append((i, recall(pred, gt), boundary_distance_avg(pred, gt)))
    with _stage("outputs"):
        os.makedirs(outdir, exist_ok=True)
        out_path = os.path.join(outdir, "metrics.csv")
        with open(out_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["slice", "recall", "hd_avg"])
            for i, r, hd in rows:
                writer.writerow([i, format(r, ".17g"), format(hd, ".17g")])
            writer.writerow([
                "mean",
                format(float(np.mean([r for _, r, _ in rows])), ".17g"),
                format(float(np.mean([hd for _, _, hd in rows])), ".17g"),
            ])
    return {"metrics": out_path, "rows": rows}


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

_AIRY_LAMBDA = 0.07874  # with na = 0.01 puts the unstretched first dark ring at 4.8 px
_AIRY_NA = 0.01


def _selftest_files(workdir: str, psf_kind: str, seed: int) -> dict:
    os.makedirs(workdir, exist_ok=True)
    scene_path = os.path.join(workdir, "scene.txt")
    write_keyvalues(scene_path, {
        "width": 512, "height": 512, "pattern": "cross",
        "arm_width": 80, "mu1": 50.0, "mu2": 200.0, "margin": 64,
    })
    psf_path = os.path.join(workdir, "psf.txt")
    if psf_kind == "gaussian":
        write_keyvalues(psf_path, {"model": "gaussian", "sigma_psf": 2.0})
    else:
        write_keyvalues(psf_path, {
            "model": "airy", "tau": 1.2,
            "lambda_wave": _AIRY_LAMBDA, "na": _AIRY_NA,
        })
    acq_path = os.path.join(workdir, "acq.txt")
    write_keyvalues(acq_path, {
        "sigma2": 25.0, "alpha": 0.1, "corr_taps": [0.25, 0.5, 0.25],
        "frames": 16, "max_jitter": 3, "seed": seed,
    })
    profile_path = os.path.join(workdir, "profile.txt")
    write_keyvalues(profile_path, {
        "half_width": 25, "min_profiles": 50, "smooth_sigma": 3.0,
        "max_shift": 10, "lambda_wave": _AIRY_LAMBDA, "na": _AIRY_NA,
    })
    return {"scene": scene_path, "psf": psf_path, "acq": acq_path, "profile": profile_path}


def _selftest_roundtrip(workdir: str, psf_kind: str, seed: int) -> dict:
    files = _selftest_files(workdir, psf_kind, seed)
    sim = cmd_simulate(files["scene"], files["acq"], files["psf"], workdir, seed=seed)
    est = cmd_estimate_psf(sim["frames"], files["profile"], os.path.join(workdir, "psf_estimate"))
    fit = read_keyvalues(os.path.join(workdir, "psf_estimate", "fit.txt"))
    est.update({k: float(v) for k, v in fit.items()})
    est["sim"] = sim
    return est


def _mse(a: Image2D, b: Image2D) -> float:
    d = a.data - b.data
    return float(np.mean(d * d))


def _otsu_mask(img: Image2D) -> BinaryImage2D:
    return BinaryImage2D(img.data > otsu_threshold(img))


def run_selftest(outdir: str, seed: int = 0) -> tuple[str, bool, dict]:
    """Fixed-seed end-to-end check of the whole pipeline.

    Exercises the PSF round trips, the monotone-energy contract, the
    restoration quality ordering, and the segmentation improvement, all on
    simulator scenes with known truth. The report is free of timestamps and
    machine specifics, so repeated runs are byte-identical.
    """
    os.makedirs(outdir, exist_ok=True)
    lines = [f"{PROG} selftest", f"seed = {seed}", ""]
    details: dict = {}
    all_pass = True

    def record(ok: bool, text: str):
        nonlocal all_pass
        all_pass = all_pass and ok
        lines.append(f"{'PASS' if ok else 'FAIL'}  {text}")

    # criterion: gaussian PSF round trip
    g = _selftest_roundtrip(os.path.join(outdir, "work_gaussian"), "gaussian", seed)
    err = abs(g["sigma_hat"] - 2.0)
    record(err <= 0.1, f"psf-roundtrip-gaussian: sigma_hat = {g['sigma_hat']:.6f}, "
                       f"|err| = {err:.6f}, tol = 0.1")
    details["gaussian"] = g

    # criterion: airy PSF round trip
    a = _selftest_roundtrip(os.path.join(outdir, "work_airy"), "airy", seed)
    err = abs(a["tau_hat"] - 1.2)
    res_ok = a["airy_residual"] <= a["gaussian_residual"]
    record(err <= 0.06 and res_ok,
           f"psf-roundtrip-airy: tau_hat = {a['tau_hat']:.6f}, |err| = {err:.6f}, tol = 0.06, "
           f"airy_residual <= gaussian_residual: {res_ok}")
    details["airy"] = a

    # criteria: monotone energy, restoration ordering, segmentation recall
    noise = NoiseParams(sigma2=25.0, alpha=0.1, corr=np.array([0.25, 0.5, 0.25]))
    nlm_cfg = NlmConfig(patch_radius=1, search_radius=3, h_filter=10.0, weight_mode="noise-aware")
    opts = SolverOptions(lambda_reg=0.01, max_iters=60, tol_rel=1e-5, init_mode="nlms")
    monotone_ok, ordering_ok, recall_wins = True, True, 0
    runs = []
    for k in range(5):
        run_seed = seed * 1000 + 17 + k
        wd = os.path.join(outdir, f"work_restore_{k}")
        rt = _selftest_roundtrip(wd, "gaussian", run_seed)
        truth = load_image(rt["sim"]["ground_truth"])
        truth_mask = _load_mask(rt["sim"]["truth_mask"])
        raw = load_image(rt["sim"]["frames"][0])
        raw = register_stack([truth, raw], max_shift=5)[1]  # undo acquisition jitter
        sigma_hat = rt["sigma_hat"]
        kernel = psf_model.discretize_2d(
            psf_model.GaussianParams(sigma_hat), max(1, math.ceil(4 * sigma_hat)))
        denoised = nlms_filter(raw, compute_weights(raw, nlm_cfg, noise))
        restored, log = deconvolve_map(raw, kernel, nlm_cfg, noise, opts)
        energies = [rec.energy for rec in log]
        monotone_ok &= all(e1 <= e0 + 1e-12 for e0, e1 in zip(energies, energies[1:]))
        m_raw, m_den, m_dec = _mse(raw, truth), _mse(denoised, truth), _mse(restored, truth)
        ordering_ok &= m_dec < m_den < m_raw
        r_raw = recall(_otsu_mask(raw), truth_mask)
        r_dec = recall(_otsu_mask(restored), truth_mask)
        recall_wins += int(r_dec >= r_raw)
        runs.append({
            "seed": run_seed, "mse_raw": m_raw, "mse_denoised": m_den, "mse_deconvolved": m_dec,
            "recall_raw": r_raw, "recall_deconvolved": r_dec, "iterations": len(log) - 1,
        })
        lines.append(
            f"      run {k}: mse raw/denoised/deconvolved = "
            f"{m_raw:.3f}/{m_den:.3f}/{m_dec:.3f}, recall raw/deconvolved = "
            f"{r_raw:.6f}/{r_dec:.6f}, iters = {len(log) - 1}"
        )
    record(monotone_ok, "monotone-energy: every descent log non-increasing (tol 1e-12)")
    record(ordering_ok, "restoration-ordering: mse deconvolved < denoised < raw on 5/5 runs")
    record(recall_wins >= 4, f"segmentation-recall: deconvolved >= raw on {recall_wins}/5 runs (need 4)")
    details["runs"] = runs

    lines.append("")
    lines.append(f"overall: {'PASS' if all_pass else 'FAIL'}")
    report = "\n".join(lines) + "\n"
    with open(os.path.join(outdir, "selftest_report.txt"), "w", encoding="utf-8") as f:
        f.write(report)
    return report, all_pass, details


def cmd_selftest(outdir: str, seed: int = 0) -> int:
    started = time.monotonic()
    report, ok, _ = run_selftest(outdir, seed)
    sys.stdout.write(report)
    sys.stderr.write(f"[selftest wall time: {time.monotonic() - started:.1f}s]\n")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_common(parser, suppress: bool):
    # the same flags are accepted before and after the subcommand; the
    # subcommand copies use SUPPRESS defaults so they never clobber values
    # parsed at the top level
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="override the run seed")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="upper bound on worker parallelism (results are identical for any value)")
    parser.add_argument("--set", action="append", metavar="NS.KEY=VALUE", dest="overrides",
                        default=d, help="override a parameter-file key (e.g. --set noise.sigma2=25)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description=__doc__)
    _add_common(parser, suppress=False)
    common = _Parser(add_help=False)
    _add_common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a scene and acquire a frame stack",
                       parents=[common])
    p.add_argument("--scene", required=True)
    p.add_argument("--acq", required=True)
    p.add_argument("--psf", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate-psf", help="calibrate the PSF from frame files")
    p.add_argument("--frames", required=True, nargs="+",
                   help="frame files in order (globs are expanded and sorted)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("denoise", help="non-local means filtering")
    p.add_argument("--image", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--nlm", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("deconvolve", help="MAP deconvolution with a non-local prior")
    p.add_argument("--image", required=True)
    p.add_argument("--psf", required=True, help="PSF model parameters or a 2D tap table")
    p.add_argument("--noise", required=True)
    p.add_argument("--nlm", required=True)
    p.add_argument("--solver", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="segmentation quality metrics")
    p.add_argument("--pred", required=True, nargs="+")
    p.add_argument("--gt", required=True, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="end-to-end fixed-seed verification")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        sys.stderr.write(f"{PROG}: usage error: {err}\n")
        return 1
    except SystemExit as err:  # --help
        return int(err.code or 0)

    try:
        overrides = _parse_overrides(args.overrides)
        if args.command == "simulate":
            _require_files(args.scene, args.acq, args.psf)
            cmd_simulate(args.scene, args.acq, args.psf, args.out,
                         seed=args.seed, overrides=overrides)
        elif args.command == "estimate-psf":
            frames = _expand_frames(args.frames)
            _require_files(args.config, *frames)
            cmd_estimate_psf(frames, args.config, args.out, overrides=overrides)
        elif args.command == "denoise":
            _require_files(args.image, args.noise, args.nlm)
            cmd_denoise(args.image, args.noise, args.nlm, args.out, overrides=overrides)
        elif args.command == "deconvolve":
            _require_files(args.image, args.psf, args.noise, args.nlm, args.solver)
            cmd_deconvolve(args.image, args.psf, args.noise, args.nlm, args.solver,
                           args.out, overrides=overrides)
        elif args.command == "evaluate":
            preds = _expand_frames(args.pred)
            gts = _expand_frames(args.gt)
            _require_files(*preds, *gts)
            cmd_evaluate(preds, gts, args.out)
        elif args.command == "selftest":
            return cmd_selftest(args.out, seed=args.seed or 0)
        return 0
    except UsageError as err:
        sys.stderr.write(f"{PROG}: usage error: {err}\n")
        return 1
    except StageError as err:
        sys.stderr.write(f"{PROG}: {err}\n")
        return 2
    except (ValueError, OSError) as err:
        sys.stderr.write(f"{PROG}: stage 'run': {err}\n")
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
