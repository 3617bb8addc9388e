"""Pair energies of the inverse contrastive loss and the derived kernels.

``f`` repels pairs that share an extraneous value, ``s`` attracts pairs that
do not. ``g`` and ``w`` split the loss into a discrepancy kernel and an
interaction potential. All functions are vectorised over ``d``.
"""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from .core import ContractViolation, IclParams


def f_repulse(params: IclParams, d):
    return np.exp(params.alpha - params.beta * np.asarray(d, dtype=np.float64))


def s_attract(d):
    d = np.asarray(d, dtype=np.float64)
    return d * d


def grad_f(params: IclParams, d):
    """Derivative of ``f`` with respect to the distance."""
    return -params.beta * f_repulse(params, d)


def grad_s(d):
    return 2.0 * np.asarray(d, dtype=np.float64)


def _multiclass_coefficients(n_classes: Optional[int]):
    # (weight on f, weight on s); binary uses the /8 forms
    if n_classes is None:
        return 1.0 / 8.0, 1.0 / 8.0
    m = int(n_classes)
    if m < 2:
        raise ContractViolation("n_classes must be >= 2")
    return 1.0 / (m * m * (m - 1)), 1.0 / (m * m)


def g_kernel(params: IclParams, d, n_classes: Optional[int] = None):
    """Discrepancy kernel ``g``.

    With ``n_classes=None`` this is the binary form ``(f - s) / 8``; with an
    integer ``m`` it is ``(f / (m - 1) - s) / m**2``.
    """
    cf, cs = _multiclass_coefficients(n_classes)
    return cf * f_repulse(params, d) - cs * s_attract(d)


def w_potential(params: IclParams, d, n_classes: Optional[int] = None):
    """Interaction potential ``w``; same normalisation rules as :func:`g_kernel`."""
    cf, cs = _multiclass_coefficients(n_classes)
    return cf * f_repulse(params, d) + cs * s_attract(d)


def crossing_point(params: IclParams, tol: float = 1e-10) -> float:
    """Distance where attraction ``2d`` equals repulsion ``beta exp(alpha - beta d)``.

    The difference is strictly increasing, so bisection finds the unique root.
    """
    def h(d):
        return 2.0 * d - params.beta * np.exp(params.alpha - params.beta * d)

    lo, hi = 0.0, 1.0
    while h(hi) < 0:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


CURVE_COLUMNS = ("d", "grad_s_abs", "grad_f_abs", "w", "g")


def force_curves(params: IclParams, d_grid, n_classes: Optional[int] = None) -> dict:
    """Attraction/repulsion magnitudes and ``w``/``g`` on an ascending grid."""
    d = np.asarray(d_grid, dtype=np.float64).ravel()
    if d.size == 0 or np.any(d < 0) or np.any(np.diff(d) <= 0):
        raise ContractViolation("grid must be non-empty, non-negative and ascending")
    return {
        "d": d,
        "grad_s_abs": np.abs(grad_s(d)),
        "grad_f_abs": np.abs(grad_f(params, d)),
        "w": w_potential(params, d, n_classes),
        "g": g_kernel(params, d, n_classes),
    }


def write_curves_csv(path, curves: dict, crossing: Optional[float] = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in zip(*(curves[k] for k in CURVE_COLUMNS)):
            writer.writerow([repr(float(v)) for v in row])
        if crossing is not None:
            fh.write(f"# crossing_point,{crossing!r}\n")
