import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fastpowerformer import _kernels  # noqa: E402
from fastpowerformer.model import ModelConfig  # noqa: E402


@pytest.fixture(params=_kernels.available_backends())
def kernel_backend(request, monkeypatch):
    """Run the test once per importable kernel backend."""
    monkeypatch.setattr(_kernels, "_impl", _kernels.get_backend(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return ModelConfig(seq_len=32, pred_len=8, n_channels=4, d_model=16, d_h=8, n_layers=2, chunk=8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
