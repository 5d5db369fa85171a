import numpy as np
import pytest
import torch

from cacl import codebook as vq
from cacl.data import SyntheticConfig, generate_synthetic

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class FrozenStopGradient:
    """Records every stop-gradient value on the first pass and replays them afterwards.

    With the stopped values frozen, the loss becomes an ordinary smooth
    function of the parameters, and its central differences are what the
    straight-through/stop-gradient autograd result should match.
    """

    def __init__(self):
        self.values = []
        self.replaying = False
        self.pos = 0

    def __call__(self, x):
        if not self.replaying:
            v = x.detach().clone()
            self.values.append(v)
            return v
        v = self.values[self.pos]
        self.pos += 1
        return v

    def replay(self):
        self.replaying = True
        self.pos = 0


@pytest.fixture
def frozen_sg(monkeypatch):
    rec = FrozenStopGradient()
    monkeypatch.setattr(vq, "stop_gradient", rec)
    return rec


def central_difference(fn, tensor, index, h, rec):
    """d fn / d tensor[index] with stop-gradient values replayed from ``rec``."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        rec.replay()
        f_plus = float(fn())
        tensor[index] = orig - h
        rec.replay()
        f_minus = float(fn())
        tensor[index] = orig
    return (f_plus - f_minus) / (2 * h)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = SyntheticConfig(size=32, n_pos=12, n_neg=12, seed=3)
    generate_synthetic(cfg, out, fractions=(0.5, 0.25, 0.25))
    return out / "manifest.tsv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
