import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuronal_prune.model_store import ModelBundle, ModelDims, generate_model, generate_tokens  # noqa: E402

TINY = ModelDims(d_model=8, n_heads=2, d_ff=16, n_blocks=2, vocab=11)


@pytest.fixture
def tiny_model():
    return generate_model(TINY, 0)


@pytest.fixture
def tiny_tokens():
    return generate_tokens(11, 40, 3)


def zero_model(dims):
    named = {name: np.zeros(shape, dtype=np.float32) for name, shape in dims.tensor_specs()}
    return ModelBundle.from_tensors(dims, named)


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    key = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[key] = _ACCEPTANCE.get(key, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), passed in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}")
