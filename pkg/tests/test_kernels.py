import os
import subprocess
import sys

import numpy as np
import pytest

from bodyfit import _kernels_py, kernels
from bodyfit.capsules import SphereRig
from bodyfit.model import posed_joints

from conftest import KERNEL_NAMES, random_params

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernels not built")


def recorded_calls(assets, monkeypatch, n=3):
    """Arguments of every kernel call made by a few posed-joint Jacobians and rig evaluations."""
    calls = []
    for name in KERNEL_NAMES:
        fn = getattr(_kernels_py, name)

        def spy(*args, _fn=fn, _name=name):
            calls.append((_name, tuple(np.copy(a) if isinstance(a, np.ndarray) else a for a in args)))
            return _fn(*args)

        monkeypatch.setattr(kernels, name, spy)
    rng = np.random.default_rng(0)
    m = assets.model
    for _ in range(n):
        p = random_params(m, rng, pose_scale=0.8)
        posed_joints(m, p, jacobian=True)
        SphereRig(m, assets.capsules, p.beta).residuals(p.theta)
    monkeypatch.undo()
    return calls


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


@needs_compiled
def test_backends_agree_on_recorded_calls(assets, monkeypatch):
    calls = recorded_calls(assets, monkeypatch)
    assert {name for name, _ in calls} == set(KERNEL_NAMES)
    compiled = BACKENDS["compiled"]
    for name, args in calls:
        ref = as_tuple(getattr(_kernels_py, name)(*args))
        got = as_tuple(getattr(compiled, name)(*args))
        assert len(ref) == len(got)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-12, err_msg=name)


@needs_compiled
def test_rodrigues_small_angles_agree():
    v = np.r_[np.zeros((1, 3)), 1e-12 * np.ones((1, 3)), 1e-7 * np.eye(3),
              np.random.default_rng(1).normal(size=(20, 3)) * 2.0]
    ref = as_tuple(_kernels_py.rodrigues_batch(v))
    got = as_tuple(BACKENDS["compiled"].rodrigues_batch(v))
    for a, b in zip(ref, got):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)


def test_fallback_selected_by_environment():
    code = "from bodyfit import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, BODYFIT_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_is_default_when_built():
    code = "from bodyfit import kernels; print(kernels.BACKEND)"
    env = {k: v for k, v in os.environ.items() if k != "BODYFIT_KERNELS"}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "compiled"
