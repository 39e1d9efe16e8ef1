"""Tracks how close piecewise-linear ops were evaluated to their kinks.

Finite differences are meaningless across a kink (|x| at 0, floor in bilinear
sampling, max/min ties in the flow constraint). Gradient checks enable the
monitor, run a forward pass, and redraw inputs when the closest recorded
distance is under their step tolerance.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional

import numpy as np

_active: Optional[list] = None


@contextlib.contextmanager
def monitor() -> Iterator[list]:
    """Collect kink distances recorded inside the block (one float per call)."""
    global _active
    prev = _active
    _active = []
    try:
        yield _active
    finally:
        _active = prev


def record(distance: np.ndarray) -> None:
    """Record ``min |distance|``; callers pass signed distances to the kink."""
    if _active is not None and np.size(distance):
        _active.append(float(np.min(np.abs(distance))))


def record_fractional(pos: np.ndarray) -> None:
    """Distance of sampling coordinates to the nearest integer.

    Exact integers are ignored: they are taps whose position cannot move
    (the DFC center tap has no drift), not samples sitting near a kink.
    """
    if _active is not None and np.size(pos):
        frac = np.abs(pos - np.round(pos))
        frac = frac[frac > 0]
        if frac.size:
            _active.append(float(np.min(frac)))


def closest(records: list) -> float:
    return min(records) if records else float("inf")
