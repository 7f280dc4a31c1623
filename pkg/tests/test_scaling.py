import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from autoscvx.scaling import (
    UNIT_KINDS, InvalidConstantsError, PhysicalConstants, make_scales, nondimensionalize, redimensionalize,
)


def test_reference_scales():
    s = make_scales(PhysicalConstants())
    assert s.time_scale == pytest.approx(math.sqrt(6378e3 / 9.81), rel=1e-14)
    assert s.time_scale == pytest.approx(806.32, abs=0.01)
    assert s.velocity_scale == pytest.approx(math.sqrt(9.81 * 6378e3), rel=1e-14)
    assert s.velocity_scale == pytest.approx(7910.0, abs=0.5)
    assert s.length_scale == 6378e3
    assert s.accel_scale == 9.81


@given(g=st.floats(0.1, 100.0), radius=st.floats(1e3, 1e8))
def test_velocity_time_identity(g, radius):
    s = make_scales(PhysicalConstants(g_earth=g, R_earth=radius))
    assert s.velocity_scale * s.time_scale == pytest.approx(s.length_scale, rel=1e-15)


@pytest.mark.parametrize("name", ["g_earth", "R_earth", "omega_earth", "rho_sl", "H_scale"])
@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_constants(name, bad):
    with pytest.raises(InvalidConstantsError):
        PhysicalConstants(**{name: bad})


def test_beta_is_derived():
    c = PhysicalConstants(H_scale=5000.0)
    assert c.beta == 1 / 5000.0


def test_examples():
    assert nondimensionalize(7450.0, "velocity") == pytest.approx(7450 / math.sqrt(9.81 * 6378e3), rel=1e-14)
    assert nondimensionalize(7450.0, "velocity") == pytest.approx(0.94185, abs=1e-5)
    assert nondimensionalize(30 * math.pi / 180, "angle") == 30 * math.pi / 180
    for kind in UNIT_KINDS:
        assert nondimensionalize(0.0, kind) == 0.0
    assert redimensionalize(1.0, "distance") == 6378e3
    assert redimensionalize(0.94185, "velocity") == pytest.approx(7450.0, abs=0.1)
    assert redimensionalize(nondimensionalize(1714.93, "time"), "time") == pytest.approx(1714.93, rel=1e-12)


def test_unknown_kind():
    with pytest.raises(ValueError):
        nondimensionalize(1.0, "mass")
    with pytest.raises(ValueError):
        redimensionalize(1.0, "furlong")


@given(kind=st.sampled_from(UNIT_KINDS), mag=st.floats(-6, 9), sign=st.sampled_from([-1.0, 1.0]))
def test_round_trip(kind, mag, sign):
    x = sign * 10.0**mag
    assert redimensionalize(nondimensionalize(x, kind), kind) == pytest.approx(x, rel=1e-12)
    assert nondimensionalize(redimensionalize(x, kind), kind) == pytest.approx(x, rel=1e-12)
