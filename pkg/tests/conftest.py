import numpy as np
import pytest
from hypothesis import settings

from gsa_mia.diffusion import make_linear_schedule
from gsa_mia.model import init_denoiser
from gsa_mia.rng import Rng

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def tiny_net():
    """1x2x2 images, one hidden layer of width 5, 4-dim time embedding, T = 10."""
    return init_denoiser((1, 2, 2), (5,), 4, Rng(11), 10)


@pytest.fixture
def schedule10():
    return make_linear_schedule(10)


@pytest.fixture
def rng():
    return Rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(b) + 1e-12))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
