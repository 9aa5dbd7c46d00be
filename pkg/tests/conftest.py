import numpy as np
import pytest

from lbnmpc import core

KERNELS = ("kernel_vector", "gram", "gp_channel", "nominal_accel", "accel", "interval")


def _backends():
    out = ["python"]
    if core.load_backend("compiled") is not core._core_py:
        out.append("compiled")
    return out


@pytest.fixture(params=_backends())
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the test's duration."""
    mod = core.load_backend(request.param)
    for name in KERNELS:
        monkeypatch.setattr(core, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
