"""Global numerical knobs shared across the package."""
from __future__ import annotations

import os

# Minimum per-dimension variance. Applied after every M-step and after
# every bias-corrected snapshot; keeps densities and gradients finite.
VAR_FLOOR = 1e-6

# A component is considered empty in a batch when its effective count
# drops below COUNT_EPS_FACTOR * N.
COUNT_EPS_FACTOR = 1e-8

_deterministic = os.environ.get("FVE_DETERMINISTIC", "") == "1"


def deterministic_reductions() -> bool:
    return _deterministic


def set_deterministic_reductions(flag: bool) -> None:
    global _deterministic
    _deterministic = bool(flag)
