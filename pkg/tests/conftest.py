import numpy as np
import pytest

from layerforge.core import ForegroundLayer, LayeredSample, composite, shadow_residual

# criterion lines recorded by test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_layer(rng, h, w, k, soft=True):
    rgb = rng.random((h, w, 3))
    if soft:
        alpha = rng.random((h, w))
    else:
        alpha = (rng.random((h, w)) > 0.5).astype(float)
    return ForegroundLayer(rgb=rgb, alpha=alpha, order_index=k)


def random_sample(rng, h, w, n_layers, with_shadow=True):
    source = rng.random((h, w, 3))
    background = rng.random((h, w, 3))
    layers = [random_layer(rng, h, w, k) for k in range(1, n_layers + 1)]
    shadow = shadow_residual(source, composite(background, layers)) if with_shadow else None
    return LayeredSample(source, background, layers, shadow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
