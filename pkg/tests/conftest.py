import numpy as np
import pytest

from pinvnet.nn import Rng
from pinvnet.spnn import SpnnModel


def small_model(seed=0, dims=(6, 3), input_dim=8, **kw):
    return SpnnModel.build(input_dim, list(dims), Rng(seed), hidden=kw.pop("hidden", 8), depth=kw.pop("depth", 1), **kw)


@pytest.fixture
def model():
    return small_model(3, mixer_scale=0.5)


@pytest.fixture
def image_model():
    return SpnnModel.build((1, 4, 4), [6, 2], Rng(5), unshuffle=2, hidden=8, depth=1)


@pytest.fixture
def rng():
    return Rng(1234)


def perturb_outputs(m, rng, scale=0.3):
    """Give s and t nets non-trivial last layers so the model is genuinely non-linear."""
    for b in m.blocks:
        for net in (b.s_net, b.t_net, b.r_net):
            net.weights[-1][:] = rng.normal(size=net.weights[-1].shape, scale=scale)
            net.biases[-1][:] = rng.normal(size=net.biases[-1].shape, scale=scale)
    return m


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
