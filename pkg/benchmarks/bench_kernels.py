"""Compare the compiled kernels with the numpy fallback.

Inputs are captured from real calls on the bundled model, then each backend's
kernel is timed on the same arguments. A full fit is also timed per backend.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--fit]
"""
import argparse
import time
import timeit

import numpy as np

from bodyfit import io, kernels
from bodyfit.capsules import SphereRig
from bodyfit.model import FitParams, posed_joints
from bodyfit.synth import make_scene

NAMES = ("rodrigues_batch", "forward_chain", "point_jacobian", "overlap_residuals")


def capture_inputs(assets):
    """Arguments of one call to every kernel during a pose Jacobian and a rig evaluation."""
    seen = {}
    originals = {n: getattr(kernels, n) for n in NAMES}

    def spy(name):
        def call(*args):
            seen.setdefault(name, args)
            return originals[name](*args)
        return call

    for n in NAMES:
        setattr(kernels, n, spy(n))
    try:
        model = assets.model
        rng = np.random.default_rng(0)
        params = FitParams(np.zeros(model.B), 0.3 * rng.standard_normal(model.n_pose), np.r_[0, 0, 5.0])
        posed_joints(model, params, jacobian=True)
        rig = SphereRig(model, assets.capsules, params.beta)
        rig.residuals(params.theta)
    finally:
        for n, f in originals.items():
            setattr(kernels, n, f)
    return seen


def bench_kernels(inputs, repeat):
    rows = []
    backends = kernels.available_backends()
    for name in NAMES:
        times = {}
        for b, mod in backends.items():
            fn = getattr(mod, name)
            args = inputs[name]
            times[b] = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat
        rows.append((name, times))
    return rows


def bench_fit(assets, n=3):
    from bodyfit.fitter import FitConfig, fit_single

    cfg = FitConfig.from_assets(assets)
    scenes = [make_scene(assets.model, assets, 0, i) for i in range(n)]
    out = {}
    for b, mod in kernels.available_backends().items():
        saved = {name: getattr(kernels, name) for name in NAMES}
        for name in NAMES:
            setattr(kernels, name, getattr(mod, name))
        try:
            t0 = time.perf_counter()
            for s in scenes:
                fit_single(assets.model, s.camera, s.detections, cfg)
            out[b] = (time.perf_counter() - t0) / n
        finally:
            for name, f in saved.items():
                setattr(kernels, name, f)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--fit", action="store_true", help="also time full fits")
    args = ap.parse_args()
    assets = io.load_default_model()
    backends = list(kernels.available_backends())
    print(f"backends: {', '.join(backends)} (active: {kernels.BACKEND})")
    for name, times in bench_kernels(capture_inputs(assets), args.repeat):
        cells = "  ".join(f"{b} {1e6 * t:9.1f} us" for b, t in times.items())
        speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:18s} {cells}  speedup {speedup:5.1f}x")
    if args.fit:
        for b, t in bench_fit(assets).items():
            print(f"fit_single ({b}): {t:.2f} s per fit")


if __name__ == "__main__":
    main()
