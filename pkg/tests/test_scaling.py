import warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st

from porohyper.scaling import (KINDS, PRESETS, CharacteristicSet, dimensionalize, format_quantity, get_preset,
                               nondimensionalize)

BRAIN = get_preset("brain")
SOIL = get_preset("soil")


@pytest.mark.parametrize("chars,kind,expected,unit", [
    (BRAIN, "time", 250.0, "s"),
    (BRAIN, "pressure", 1e3, "Pa"),
    (BRAIN, "displacement", 1e-3, "m"),
    (BRAIN, "velocity", 4e-6, "m/s"),
    (SOIL, "time", 1 / (1.5e6 * 4e-8), "s"),
    (SOIL, "pressure", 1.5e6, "Pa"),
])
def test_preset_scale_factors(chars, kind, expected, unit):
    value, u = dimensionalize(kind, 1.0, chars)
    assert value == pytest.approx(expected, rel=1e-12)
    assert u == unit


def test_displayed_soil_time_rounding():
    assert round(dimensionalize("time", 1.0, SOIL)[0], 1) == pytest.approx(16.7)
    assert abs(dimensionalize("time", 1.0, SOIL)[0] - 16.6) <= 0.05 * 16.6


def test_conductivity_factor_is_velocity_over_pressure_gradient():
    c = BRAIN
    assert c.conductivity_scale == pytest.approx(c.micro_length**2 / c.viscosity, rel=1e-12)


def test_inverse_and_zero():
    assert nondimensionalize("pressure", 1e3, BRAIN) == pytest.approx(1.0)
    assert nondimensionalize("time", 0.0, SOIL) == 0.0


@given(st.sampled_from(sorted(KINDS)), st.floats(-1e6, 1e6), st.sampled_from(sorted(PRESETS)))
def test_round_trip(kind, value, preset):
    c = PRESETS[preset]
    back = nondimensionalize(kind, dimensionalize(kind, value, c)[0], c)
    assert back == pytest.approx(value, rel=1e-12, abs=1e-12)


def test_errors_and_warnings():
    with pytest.raises(ValueError, match="unknown quantity kind"):
        dimensionalize("mass", 1.0, BRAIN)
    with pytest.raises(ValueError, match="unknown preset"):
        get_preset("moon")
    with pytest.raises(ValueError, match="force must be positive"):
        CharacteristicSet(0.0, 1e-6, 1e-3, 1.0)
    with pytest.raises(ValueError, match="below 1"):
        CharacteristicSet(1.0, 1.0, 1.0, 1.0)
    with pytest.warns(UserWarning, match="weak scale separation"):
        CharacteristicSet(1.0, 0.5, 1.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        CharacteristicSet(1.0, 0.05, 1.0, 1.0)


def test_format_quantity():
    assert format_quantity(*dimensionalize("time", 1.0, BRAIN)) == "250 s"
