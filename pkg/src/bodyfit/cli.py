"""Command-line driver: ``bodyfit fit``, ``bodyfit synth`` and ``bodyfit make-model``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import io
from .camera import CameraIntrinsics
from .errors import BodyFitError
from .fitter import fit_single, to_model_detections

log = logging.getLogger("bodyfit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_assets(path):
    return io.load_model(path) if path else io.load_default_model()


def _load_config(path, assets, flip_threshold=None):
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise io.ParseError(f"cannot read config {path}: {exc}") from exc
    if flip_threshold is not None:
        d["shoulder_flip_threshold_px"] = flip_threshold
    try:
        return io.config_from_dict(d, assets)
    except (TypeError, ValueError) as exc:
        raise io.ParseError(f"bad config: {exc}") from exc


def _camera_for(det, cam, focal):
    """Intrinsics for one image plus a note on where they came from."""
    if cam is not None and focal is None:
        return cam, "detections"
    if det.image_size is None:
        if cam is not None:
            return CameraIntrinsics(focal, focal, cam.cx, cam.cy, cam.k1, cam.k2), "flag"
        raise io.ParseError(f"image {det.image_id!r}: no camera and no image size")
    w, h = det.image_size
    if focal is None:
        return CameraIntrinsics(float(w), float(w), w / 2.0, h / 2.0), "default_image_width"
    cx, cy = (cam.cx, cam.cy) if cam is not None else (w / 2.0, h / 2.0)
    return CameraIntrinsics(focal, focal, cx, cy), "flag"


def _safe_id(image_id, i):
    s = "".join(c if c.isalnum() or c in "-_." else "_" for c in str(image_id))
    return s or f"image{i:05d}"


def _fit_one(assets, cfg, det, cam, focal, outdir, name):
    logger = logging.getLogger(f"bodyfit.{name}")
    handler = logging.FileHandler(outdir / f"{name}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    logger.propagate = False
    try:
        camera, source = _camera_for(det, cam, focal)
        logger.info("camera %s (%s)", camera.to_dict(), source)
        t0 = time.perf_counter()
        result = fit_single(assets.model, camera, det, cfg)
        logger.info("fit in %.2f s, branch %s, energies %s", time.perf_counter() - t0,
                    result.branch, result.energies)
        for i, rep in enumerate(result.reports):
            logger.info("stage %d: %d iterations, %s", i, rep.iterations, rep.reason)
        rec = io.fit_record(result, camera, to_model_detections(assets.model, det), cfg, det.image_id)
        rec["camera_source"] = source
        io.write_obj(outdir / f"{name}.obj", result.mesh)
        io.write_params(outdir / f"{name}.json", rec)
        return None
    except BodyFitError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return f"{type(exc).__name__}: {exc}"
    finally:
        handler.close()
        logger.removeHandler(handler)


def cmd_fit(args):
    assets = _load_assets(args.model)
    cfg = _load_config(args.config, assets, args.flip_threshold)
    images = io.read_detections(args.detections)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = [_safe_id(d.image_id, i) for i, (d, _) in enumerate(images)]
    if len(set(names)) != len(names):
        names = [f"{i:05d}_{n}" for i, n in enumerate(names)]
    jobs = max(1, int(args.jobs))

    def run(i):
        det, cam = images[i]
        return _fit_one(assets, cfg, det, cam, args.focal, outdir, names[i])

    if jobs == 1:
        errors = [run(i) for i in range(len(images))]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            errors = list(pool.map(run, range(len(images))))
    failed = [(n, e) for n, e in zip(names, errors) if e]
    for n, e in failed:
        print(f"{n}: {e}", file=sys.stderr)
    print(f"fitted {len(images) - len(failed)}/{len(images)} images into {outdir}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args):
    from . import synth

    assets = _load_assets(args.model)
    cfg = _load_config(args.config, assets)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "n_scenes": args.n_scenes, "noise_px": list(args.noise),
                "config": cfg.schedule_dict(), "tables": []}
    try:
        if args.noise:
            rows = synth.noise_sweep(assets.model, assets, cfg, args.noise, args.n_scenes, args.seed)
            io.write_table(outdir / "noise_sweep.csv", rows)
            manifest["tables"].append("noise_sweep.csv")
            for r in rows:
                print(f"noise {r['noise_px']:g} px: shape {1000 * r['shape_error_m']:.1f} mm, "
                      f"baseline {1000 * r['baseline_m']:.1f} mm, joints {r['joint_error_mm']:.1f} mm")
        if args.subset_experiment:
            scenes = synth.generate_scenes(assets.model, assets, args.n_scenes, args.subset_noise, args.seed)
            table = synth.joint_subset_experiment(assets.model, scenes)
            rows = [{"subset": k, "n_joints": len(assets.model.joint_sets[k]), "noise_px": args.subset_noise,
                     "shape_error_m": v} for k, v in table.items()]
            io.write_table(outdir / "joint_subsets.csv", rows)
            manifest["tables"].append("joint_subsets.csv")
            for r in rows:
                print(f"subset {r['subset']} ({r['n_joints']} joints): {1000 * r['shape_error_m']:.1f} mm")
    except BodyFitError as exc:
        print(f"synthetic run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    io.write_manifest(outdir / "manifest.json", manifest)
    return EXIT_OK


def cmd_make_model(args):
    from .humanoid import build_humanoid

    assets = build_humanoid(seed=args.seed)
    io.save_model(args.output, assets, fmt=args.format)
    cv = assets.capsules.regressor.cv_error
    rel = max(h / t for h, t in zip(cv["heldout_mae"], cv["mean_target"]))
    print(f"wrote {args.output}: N={assets.model.N} K={assets.model.K} B={assets.model.B}, "
          f"worst capsule CV error {100 * rel:.1f}%")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="bodyfit", description="Fit a skinned body model to 2D joint detections.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit every image in a detections file")
    f.add_argument("--model", help=f"model file (default: ${io.MODEL_ENV} or the bundled model)")
    f.add_argument("--detections", required=True)
    f.add_argument("--output-dir", required=True)
    f.add_argument("--config", help="JSON file with stage weights and fit options")
    f.add_argument("--focal", type=float, help="focal length in pixels (default: image width)")
    f.add_argument("--flip-threshold", type=float, help="shoulder distance in pixels below "
                   "which the turned-around branch is also tried")
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("synth", help="synthetic shape-from-joints experiments")
    s.add_argument("--model")
    s.add_argument("--config")
    s.add_argument("--n-scenes", type=int, default=200)
    s.add_argument("--noise", type=float, nargs="*", default=[0.0, 1.0, 3.0, 5.0])
    s.add_argument("--subset-experiment", action="store_true")
    s.add_argument("--subset-noise", type=float, default=0.0,
                   help="pixel noise for the joint-subset scenes (default 0)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output-dir", required=True)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("make-model", help="generate the low-resolution humanoid test model")
    m.add_argument("--output", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--format", choices=("binary", "json"), default="binary")
    m.set_defaults(func=cmd_make_model)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "focal", None) is not None and not args.focal > 0:
        parser.error("--focal must be positive")
    if getattr(args, "n_scenes", 1) < 1:
        parser.error("--n-scenes must be at least 1")
    try:
        return args.func(args)
    except (io.ParseError, io.InvariantViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
