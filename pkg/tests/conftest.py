import numpy as np
import pytest

from fedev import kernels
from fedev.model import Arch, ModelState, init_model


def pytest_report_header(config):
    return f"fedev kernel backend: {kernels.BACKEND}"


@pytest.fixture
def arch():
    return Arch(input_dim=4, hidden_dim=6, feature_dim=5, num_classes=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(arch, rng, scale=1.0):
    return ModelState(rng.normal(0.0, scale, size=arch.param_count), arch)


def central_diff(fn, params, h=1e-5):
    out = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(up) - fn(dn)) / (2 * h)
    return out


def rel_err(analytic, numeric, floor=1e-6):
    """Per-coordinate relative error with an absolute floor for near-zero entries."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


__all__ = ["random_model", "central_diff", "rel_err", "init_model", "record_acceptance"]


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
