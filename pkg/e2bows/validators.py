"""Validators for configured and command-line values.

Each validator takes a raw value (ini files and argv hand over strings),
returns the normalized typed value, and raises ``Invalid`` otherwise.
"""
from typing import Any, Tuple

from e2bows.errors import Invalid

TRUE_STRINGS = ("true", "yes", "on", "1")
FALSE_STRINGS = ("false", "no", "off", "0")


def integer(value: Any) -> int:
    if isinstance(value, bool):
        raise Invalid(f"expected an integer, got {value!r}")
    try:
        number = int(str(value).strip()) if isinstance(value, str) else int(value)
    except (TypeError, ValueError):
        raise Invalid(f"expected an integer, got {value!r}")
    if not isinstance(value, str) and number != value:
        raise Invalid(f"expected an integer, got {value!r}")
    return number


def positive_int(value: Any) -> int:
    number = integer(value)
    if number < 1:
        raise Invalid(f"expected a positive integer, got {value!r}")
    return number


def non_negative_int(value: Any) -> int:
    number = integer(value)
    if number < 0:
        raise Invalid(f"expected a non-negative integer, got {value!r}")
    return number


def _real(value: Any) -> float:
    if isinstance(value, bool):
        raise Invalid(f"expected a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise Invalid(f"expected a number, got {value!r}")
    if number != number or number in (float("inf"), float("-inf")):
        raise Invalid(f"expected a finite number, got {value!r}")
    return number


def positive_float(value: Any) -> float:
    number = _real(value)
    if number <= 0:
        raise Invalid(f"expected a positive number, got {value!r}")
    return number


def non_negative_float(value: Any) -> float:
    number = _real(value)
    if number < 0:
        raise Invalid(f"expected a non-negative number, got {value!r}")
    return number


def open_unit_interval(value: Any) -> float:
    number = _real(value)
    if not 0 < number < 1:
        raise Invalid(f"expected a number strictly between 0 and 1, got {value!r}")
    return number


def unit_interval(value: Any) -> float:
    number = _real(value)
    if not 0 <= number <= 1:
        raise Invalid(f"expected a number in [0, 1], got {value!r}")
    return number


def boolean(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in TRUE_STRINGS:
        return True
    if text in FALSE_STRINGS:
        return False
    raise Invalid(f"expected a boolean, got {value!r}")


def block_list(value: Any) -> Tuple[Tuple[int, int], ...]:
    """Backbone blocks as ``((kernel, channels), ...)``.

    Strings use the ini form ``"3:16,3:32,3:64"``.
    """
    if isinstance(value, str):
        try:
            pairs = [part.split(":") for part in value.split(",") if part.strip()]
            value = [(kernel, channels) for kernel, channels in pairs]
        except ValueError:
            raise Invalid(f"blocks must look like '3:16,3:32', got {value!r}")
    try:
        blocks = tuple((positive_int(kernel), positive_int(channels)) for kernel, channels in value)
    except (TypeError, ValueError):
        raise Invalid(f"blocks must be (kernel, channels) pairs, got {value!r}")
    if not blocks:
        raise Invalid("at least one backbone block is required")
    for kernel, _ in blocks:
        if kernel % 2 == 0:
            raise Invalid(f"kernel sizes must be odd for same padding, got {kernel}")
    return blocks


def float_list(value: Any) -> Tuple[float, ...]:
    if isinstance(value, str):
        value = [part for part in value.split(",") if part.strip()]
    numbers = tuple(non_negative_float(part) for part in value)
    if not numbers:
        raise Invalid("expected at least one number")
    return numbers
