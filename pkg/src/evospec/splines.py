"""Constrained cubic B-spline bases for regimes and the coherence range.

Frequencies are in cycles per day (cpd); one-minute sampling puts the
Nyquist frequency at 720 cpd.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

NYQUIST_CPD = 720.0
REGIME_KNOTS = np.array([1 / 3, 2 / 3, 1, 4 / 3, 5 / 3, 2, 4, 8, 12, 24, 60, 120, 360])
COHERENCE_KNOTS = np.array([1.0, 3.0, 6.0, 12.0, 24.0])
COHERENCE_CUTOFF_CPD = 48.0
LOW_FREQ_CPD = 2.0


def rad_to_cpd(omega):
    return np.asarray(omega, dtype=float) * 1440.0 / (2 * np.pi)


def cpd_to_rad(cpd):
    return np.asarray(cpd, dtype=float) * 2 * np.pi / 1440.0


def fold_cpd(omega):
    """Map radians/minute to [0, 720] cpd using evenness and 2*pi periodicity."""
    w = np.mod(np.asarray(omega, dtype=float), 2 * np.pi)
    w = np.minimum(w, 2 * np.pi - w)
    return rad_to_cpd(w)


def _full_knots(lo, interior, hi):
    return np.concatenate([[lo] * 4, interior, [hi] * 4])


def _raw_basis(x, knots):
    nb = len(knots) - 4
    x = np.clip(np.asarray(x, dtype=float), knots[0], knots[-1])
    return BSpline(knots, np.eye(nb), 3, extrapolate=True)(x)


def regime_basis(cpd) -> np.ndarray:
    """(len(cpd), 15) basis with zero slope at 0 and 720 cpd.

    The first 8 columns are the only ones nonzero below 2 cpd.
    """
    raw = _raw_basis(cpd, _full_knots(0.0, REGIME_KNOTS, NYQUIST_CPD))
    first = raw[..., :1] + raw[..., 1:2]
    last = raw[..., -2:-1] + raw[..., -1:]
    return np.concatenate([first, raw[..., 2:-2], last], axis=-1)


N_REGIME_BASIS = 15
N_LOW_BASIS = 8


def coherence_basis(cpd) -> np.ndarray:
    """(len(cpd), 5) basis for the coherence range function.

    Zero slope at 0; value, slope and curvature vanish at the 48 cpd cutoff
    and the basis is identically zero beyond it.
    """
    cpd = np.abs(np.asarray(cpd, dtype=float))
    raw = _raw_basis(cpd, _full_knots(0.0, COHERENCE_KNOTS, COHERENCE_CUTOFF_CPD))
    first = raw[..., :1] + raw[..., 1:2]
    out = np.concatenate([first, raw[..., 2:6]], axis=-1)
    out[cpd > COHERENCE_CUTOFF_CPD] = 0.0
    return out


N_COHERENCE_BASIS = 5
