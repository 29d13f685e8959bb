import numpy as np
import pytest

from ctbody.errors import ConfigError, DimensionMismatch, MissingBeta
from ctbody.mixing import MODES, MixPolicy, mix


def test_modes():
    bc, bd = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    th, t = np.zeros((3, 3)), np.ones(3)
    np.testing.assert_array_equal(mix(bc, bd, th, t, MixPolicy("ct_only")).beta, bc)
    np.testing.assert_array_equal(mix(bc, bd, th, t, MixPolicy("depth_only")).beta, bd)
    np.testing.assert_array_equal(mix(bc, bd, th, t, MixPolicy("average")).beta, [2.0, 0.0])
    p = mix(bc, None, th, t)
    np.testing.assert_array_equal(p.theta, th)
    np.testing.assert_array_equal(p.trans, t)
    assert MODES == ("ct_only", "depth_only", "average")


def test_errors():
    th, t = np.zeros((3, 3)), np.zeros(3)
    with pytest.raises(ConfigError):
        MixPolicy("median")
    with pytest.raises(MissingBeta):
        mix(None, np.zeros(2), th, t, MixPolicy("ct_only"))
    with pytest.raises(MissingBeta):
        mix(np.zeros(2), None, th, t, MixPolicy("average"))
    with pytest.raises(DimensionMismatch):
        mix(np.zeros(2), np.zeros(3), th, t, MixPolicy("average"))
