"""Small numeric helpers shared across modules."""

import math

# Guard band for float noise in expressions like (1 - 0.7) * 10, which lands a
# few ulps above the exact integer and would otherwise flip ceil/round results.
_FLOAT_GUARD_DECIMALS = 9


def round_half_up(x: float) -> int:
    """Round to nearest integer with ties going up (never banker's rounding)."""
    return int(math.floor(round(x, _FLOAT_GUARD_DECIMALS) + 0.5))


def ceil_exact(x: float) -> int:
    """Ceiling that ignores sub-nanoscale float noise from prior arithmetic."""
    return int(math.ceil(round(x, _FLOAT_GUARD_DECIMALS)))
