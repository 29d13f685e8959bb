import numpy as np
import pytest

from ctbody.synth import ToySpec, make_toy_model


@pytest.fixture(scope="session")
def spec():
    return make_toy_model()


@pytest.fixture(scope="session")
def tiny_spec():
    # 1-segment limbs, coarse rings: cheap enough for dense finite differences
    return make_toy_model(ToySpec(limb_segments=1, n_joints=8, ring_spacing=0.12, n_around_torso=8, n_around_limb=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, float)
    f0 = np.asarray(f(x))
    out = np.zeros(f0.shape + x.shape)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        out[(Ellipsis,) + i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
