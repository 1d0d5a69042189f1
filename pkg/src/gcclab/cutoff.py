"""Smooth cutoff and bump profiles shared across modules.

All cutoffs are built from the quintic smoothstep ``6t^5 - 15t^4 + 10t^3``,
which is C^2. That is enough for central-difference brackets.
"""

import numpy as np


def smoothstep(t):
    """Quintic smoothstep, 0 for t <= 0 and 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep_deriv(t):
    t = np.clip(t, 0.0, 1.0)
    return 30.0 * t * t * (t - 1.0) ** 2


def chi(s):
    """Cutoff equal to 1 for s <= 1 and 0 for s >= 2."""
    return 1.0 - smoothstep(np.asarray(s, dtype=float) - 1.0)


def chi_lt(r, R):
    """chi_{<R}(r) = chi(r/R): 1 on r <= R, 0 on r >= 2R."""
    return chi(np.asarray(r, dtype=float) / R)


def chi_gt(r, R):
    """chi_{>R}(r) = 1 - chi_{<R}(r)."""
    return 1.0 - chi_lt(r, R)


def bump(s):
    """C-infinity bump exp(1 - 1/(1 - s^2)) on |s| < 1, peak value 1 at s = 0."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    den = np.where(inside, 1.0 - s * s, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / den), 0.0)


def bump_deriv(s):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    den = np.where(inside, 1.0 - s * s, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / den) * (-2.0 * s / den**2), 0.0)


def poly_bump(r, radius):
    """C^2 radial bump (1 - (r/radius)^2)^3 supported in r < radius."""
    q = 1.0 - (np.asarray(r, dtype=float) / radius) ** 2
    return np.where(q > 0.0, q, 0.0) ** 3
