from functools import lru_cache

import numpy as np
import pytest

from bodyfit import io, kernels
from bodyfit.model import FitParams

KERNEL_NAMES = ("rodrigues_batch", "forward_chain", "point_jacobian", "overlap_residuals")


@lru_cache(maxsize=None)
def bundled_assets():
    """The bundled model; also usable from hypothesis tests, which cannot take fixtures."""
    return io.load_model(io.default_model_path())


@pytest.fixture(scope="session")
def assets():
    return bundled_assets()


@pytest.fixture(scope="session")
def model(assets):
    return assets.model


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run the test once per importable kernel backend."""
    mod = kernels.available_backends()[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


def random_params(model, rng, pose_scale=0.4, depth=5.0):
    return FitParams(
        rng.standard_normal(model.B),
        pose_scale * rng.standard_normal(model.n_pose),
        np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), depth]),
    )


# --- acceptance summary -------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
