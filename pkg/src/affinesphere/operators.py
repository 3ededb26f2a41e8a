"""Discrete complex-analytic operators on chart grids.

Derivatives are second-order centered differences in the chart's own flat
grid coordinates; singular tag parts are differentiated analytically.
All reductions that feed reported numbers go through exact compensated
summation (math.fsum) in a fixed C-order traversal.
"""

from __future__ import annotations

import math

import numpy as np

from .charts import Chart
from .fields import ConformalMetric, CubicDifferential, ScalarField


def fsum_array(values) -> float:
    """Deterministic error-free-transformation sum (Shewchuk), C-order."""
    a = np.asarray(values, dtype=float).ravel(order="C")
    return math.fsum(a[np.isfinite(a)])


def _d_a(values: np.ndarray, h: float) -> np.ndarray:
    out = np.full_like(values, np.nan)
    out[1:-1, :] = (values[2:, :] - values[:-2, :]) / (2.0 * h)
    return out


def _d_b(values: np.ndarray, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(values, -1, axis=1) - np.roll(values, 1, axis=1)) / (2.0 * h)
    out = np.full_like(values, np.nan)
    out[:, 1:-1] = (values[:, 2:] - values[:, :-2]) / (2.0 * h)
    return out


def _d2_a(values: np.ndarray, h: float) -> np.ndarray:
    out = np.full_like(values, np.nan)
    out[1:-1, :] = (values[2:, :] - 2.0 * values[1:-1, :] + values[:-2, :]) / h**2
    return out


def _d2_b(values: np.ndarray, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(values, -1, axis=1) - 2.0 * values + np.roll(values, 1, axis=1)) / h**2
    out = np.full_like(values, np.nan)
    out[:, 1:-1] = (values[:, 2:] - 2.0 * values[:, 1:-1] + values[:, :-2]) / h**2
    return out


def interior_mask(chart: Chart) -> np.ndarray:
    mask = np.zeros(chart.shape, dtype=bool)
    if chart.periodic_b:
        mask[1:-1, :] = True
    else:
        mask[1:-1, 1:-1] = True
    return mask


def complex_derivatives(field: ScalarField):
    """(d/dz f, d/dzbar f, Laplacian f) in the chart's grid coordinates.

    For a cartesian chart the complex coordinate is w = x + iy; for a
    log-polar chart it is sigma = t - i*theta.  Boundary nodes are NaN and
    flagged in the returned interior mask.
    """
    chart = field.chart
    if min(chart.shape) < 8:
        raise ValueError("chart too coarse for differencing")
    da, db = chart.spacings()
    periodic = chart.periodic_b
    vals = field.values

    fa = _d_a(vals, da)
    fb = _d_b(vals, db, periodic)
    lap = _d2_a(vals, da) + _d2_b(vals, db, periodic)

    if chart.kind == "cartesian":
        dz = 0.5 * (fa - 1j * fb)
    else:
        # sigma = t - i*theta: d/dsigma = (d/dt + i d/dtheta)/2
        dz = 0.5 * (fa + 1j * fb)

    if field.tag is not None and not field.tag.is_zero():
        t, _ = chart.axes()
        dz = dz + 0.5 * field.tag.d1(t)[:, None]
        lap = lap + field.tag.d2(t)[:, None]

    dzbar = np.conj(dz)
    return dz, dzbar, lap, interior_mask(chart)


def gauss_curvature(metric: ConformalMetric):
    """Gauss curvature kappa = -1/2 e^{-psi} Lap(psi) per chart.

    Returns (fields, atoms): fields maps chart id -> ScalarField of the
    smooth part; atoms lists (puncture, mass) pairs, where mass is the
    point contribution to the integral of kappa dV carried by the
    puncture (pi per unit of -log|zeta| in the singular tag).
    """
    fields = {}
    atoms = []
    for cid, psi in metric.log_factors.items():
        if not np.all(np.isfinite(psi.values)):
            raise ValueError(f"non-finite log factor on chart {cid}")
        _, _, lap, mask = complex_derivatives(psi)
        kappa = np.where(mask, -0.5 * np.exp(-psi.total()) * lap, np.nan)
        fields[cid] = ScalarField(psi.chart, np.where(mask, kappa, 0.0))
        if psi.tag is not None and psi.tag.flux_coefficient != 0.0:
            atoms.append((psi.chart.puncture, math.pi * psi.tag.flux_coefficient))
    return fields, atoms


def cubic_norm(U: CubicDifferential, metric: ConformalMetric):
    """Pointwise norm ||U|| = |U| e^{-3 psi / 2} with respect to the metric.

    Chart independent by the K^3 transformation law; nodes at poles of U
    come out infinite and are left for quadrature routines to exclude.
    """
    out = {}
    for cid, psi in metric.log_factors.items():
        chart = psi.chart
        A, B = chart.grid()
        coeff = U.coeff_on_chart(chart, A, B)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            norm = np.abs(coeff) * np.exp(-1.5 * psi.total())
        out[cid] = ScalarField(chart, np.where(np.isfinite(norm), norm, 0.0))
    return out


def chart_cell_measure(chart: Chart) -> np.ndarray:
    """Trapezoid quadrature weights in the grid coordinates."""
    a, b = chart.axes()
    da, db = chart.spacings()
    wa = np.full(len(a), da)
    wa[0] = wa[-1] = da / 2.0
    if chart.periodic_b:
        wb = np.full(len(b), db)
    else:
        wb = np.full(len(b), db)
        wb[0] = wb[-1] = db / 2.0
    return np.outer(wa, wb)


def integrate_chart(values: np.ndarray, chart: Chart, log_area_factor=None) -> float:
    """Integrate samples over one chart; log_area_factor is log of the
    conformal factor of the area element w.r.t. the grid coordinates."""
    w = chart_cell_measure(chart)
    integrand = values * w
    if log_area_factor is not None:
        integrand = integrand * np.exp(log_area_factor)
    return fsum_array(integrand)
