import numpy as np
import pytest

from cttnet.config import micro_profile
from cttnet.ctt import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return micro_profile()


@pytest.fixture
def tiny_model_cfg():
    """Smallest useful model: 64x64 input, P=4, D=8."""
    return ModelConfig(channels=(2, 2, 2, 2, 2), dim=8, layers=2, heads=2, cross_layer_start=1, ffn_mult=2)


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  {name}  {detail}")
