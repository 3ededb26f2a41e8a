"""Smooth cutoff/blend functions with closed-form derivatives.

All gluing of near-puncture model data to the rest of the sphere goes
through these polynomial ramps (C^3 septic smoothstep), so curvatures and
Laplacians of blended fields can be evaluated analytically instead of by
finite differences across the seam, and quadrature across the seam stays
accurate at moderate resolution.
"""

from __future__ import annotations

import numpy as np


def smoothstep(x):
    """C^3 step: 0 for x <= 0, 1 for x >= 1, septic polynomial between."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return x**4 * (35.0 - 84.0 * x + 70.0 * x**2 - 20.0 * x**3)


def smoothstep_d1(x):
    x = np.asarray(x, dtype=float)
    inside = (x > 0.0) & (x < 1.0)
    xc = np.clip(x, 0.0, 1.0)
    val = 140.0 * xc**3 * (1.0 - xc) ** 3
    return np.where(inside, val, 0.0)


def smoothstep_d2(x):
    x = np.asarray(x, dtype=float)
    inside = (x > 0.0) & (x < 1.0)
    xc = np.clip(x, 0.0, 1.0)
    val = 420.0 * xc**2 * (1.0 - xc) ** 2 * (1.0 - 2.0 * xc)
    return np.where(inside, val, 0.0)


class Ramp:
    """Smooth transition 0 -> 1 over [a, b], with first two derivatives."""

    def __init__(self, a: float, b: float):
        if not b > a:
            raise ValueError("ramp needs b > a")
        self.a, self.b = float(a), float(b)
        self._w = self.b - self.a

    def __call__(self, x):
        return smoothstep((np.asarray(x, dtype=float) - self.a) / self._w)

    def d1(self, x):
        return smoothstep_d1((np.asarray(x, dtype=float) - self.a) / self._w) / self._w

    def d2(self, x):
        return smoothstep_d2((np.asarray(x, dtype=float) - self.a) / self._w) / self._w**2


class Bump:
    """Radial cutoff: 1 on r <= r1, 0 on r >= r2, smooth in between."""

    def __init__(self, r1: float, r2: float):
        self._ramp = Ramp(r1, r2)
        self.r1, self.r2 = float(r1), float(r2)

    def __call__(self, r):
        return 1.0 - self._ramp(r)

    def d1(self, r):
        return -self._ramp.d1(r)

    def d2(self, r):
        return -self._ramp.d2(r)
