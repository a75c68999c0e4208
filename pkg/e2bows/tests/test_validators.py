"""Unit tests for the value validators shared by the ini config and the CLI."""
import pytest

import e2bows.validators as validators
from e2bows.errors import ArgumentError, Invalid


def test_integers_accept_ini_strings():
    assert validators.positive_int(" 12 ") == 12
    assert validators.non_negative_int("0") == 0


@pytest.mark.parametrize("value", ["1.5", 2.5, True, None, "ten"])
def test_integer_rejects_non_integers(value):
    with pytest.raises(Invalid):
        validators.integer(value)


def test_integer_accepts_integral_floats():
    assert validators.integer(3.0) == 3


def test_bounds():
    with pytest.raises(Invalid):
        validators.positive_int(0)
    with pytest.raises(Invalid):
        validators.non_negative_float("-0.1")
    with pytest.raises(Invalid):
        validators.positive_float(0)
    assert validators.unit_interval("1") == 1.0
    assert validators.open_unit_interval("0.08") == 0.08


@pytest.mark.parametrize("value", [0, 1, "1.0", "nan", "inf"])
def test_open_unit_interval_rejects(value):
    with pytest.raises(Invalid):
        validators.open_unit_interval(value)


def test_boolean_strings():
    assert validators.boolean("Yes") is True
    assert validators.boolean("off") is False
    assert validators.boolean(False) is False
    with pytest.raises(Invalid):
        validators.boolean("maybe")


def test_block_list_from_ini_string():
    assert validators.block_list("3:16, 5:32") == ((3, 16), (5, 32))
    assert validators.block_list([(3, 8)]) == ((3, 8),)


@pytest.mark.parametrize("value", ["", "3:16:1", "4:16", "3:0", "3-16"])
def test_block_list_rejects(value):
    with pytest.raises(Invalid):
        validators.block_list(value)


def test_float_list():
    assert validators.float_list("0,0.05, 0.1") == (0.0, 0.05, 0.1)
    assert validators.float_list([0.2]) == (0.2,)
    with pytest.raises(Invalid):
        validators.float_list("0.1,-1")
    with pytest.raises(Invalid):
        validators.float_list(",")


def test_invalid_is_an_argument_error():
    with pytest.raises(ArgumentError):
        validators.positive_int("x")
