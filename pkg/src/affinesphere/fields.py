"""Field containers: sampled scalars with symbolic singular parts, conformal
metrics as per-chart log factors, and meromorphic cubic differentials."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .charts import Chart, _is_inf


@dataclass(frozen=True)
class RadialTag:
    """Radial singular part v(t) = c_t*t + c_log*log(2t) + c_pow*t^alpha.

    Attached to fields on a log-polar chart around a puncture; t is the
    chart's first grid coordinate.  These cover every singular profile the
    solvers need (e.g. log|log|z|^2| - log|z| is c_t = c_log = 1) and are
    differentiated analytically, so only bounded remainders get sampled.
    """

    c_t: float = 0.0
    c_log: float = 0.0
    c_pow: float = 0.0
    alpha: float = 0.0

    def value(self, t):
        t = np.asarray(t, dtype=float)
        v = self.c_t * t
        if self.c_log:
            v = v + self.c_log * np.log(2.0 * t)
        if self.c_pow:
            v = v + self.c_pow * t**self.alpha
        return v

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        v = np.full_like(t, self.c_t)
        if self.c_log:
            v = v + self.c_log / t
        if self.c_pow:
            v = v + self.c_pow * self.alpha * t ** (self.alpha - 1.0)
        return v

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        v = np.zeros_like(t)
        if self.c_log:
            v = v - self.c_log / t**2
        if self.c_pow:
            v = v + self.c_pow * self.alpha * (self.alpha - 1.0) * t ** (self.alpha - 2.0)
        return v

    def d2_tail_integral(self, t_max: float) -> float:
        """Exact integral of v'' over (t_max, infinity)."""
        return float(self.c_t - self.d1(t_max))

    @property
    def flux_coefficient(self) -> float:
        """Coefficient of t = -log|zeta|; sets the 2*pi puncture atom of the Laplacian."""
        return self.c_t

    def is_zero(self) -> bool:
        return self.c_t == 0.0 and self.c_log == 0.0 and self.c_pow == 0.0


@dataclass
class ScalarField:
    """Sampled real function on one chart, plus an optional singular tag.

    ``values`` holds the bounded remainder; the full field at a node is
    remainder + tag(t).  Cartesian charts never carry tags.
    """

    chart: Chart
    values: np.ndarray
    tag: RadialTag | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(self.chart.shape):
            raise ValueError(f"values shape {self.values.shape} != chart shape {self.chart.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field remainder must be finite at all nodes")
        if self.tag is not None and self.chart.kind != "log-polar":
            raise ValueError("singular tags only make sense on log-polar charts")

    def total(self) -> np.ndarray:
        if self.tag is None or self.tag.is_zero():
            return self.values
        t, _ = self.chart.axes()
        return self.values + self.tag.value(t)[:, None]

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.chart, values, self.tag)


def sample_field(chart: Chart, fn, tag: RadialTag | None = None) -> ScalarField:
    """Sample fn(z_reference) on the chart grid, subtracting tag if given."""
    A, B = chart.grid()
    z = chart.to_reference(A, B)
    vals = np.asarray(fn(z), dtype=float)
    if tag is not None and not tag.is_zero():
        vals = vals - tag.value(A)
    return ScalarField(chart, vals, tag)


@dataclass
class ConformalMetric:
    """Metric e^psi |d(grid coord)|^2 per chart.

    log_factors maps chart id -> ScalarField of psi with respect to that
    chart's own flat grid coordinate (so transporting between charts adds
    the log-Jacobian of the coordinate change).
    """

    log_factors: dict

    def chart_ids(self):
        return list(self.log_factors)

    def factor(self, chart_id: str) -> ScalarField:
        return self.log_factors[chart_id]

    def charts(self):
        return [f.chart for f in self.log_factors.values()]

    def overlap_consistency(self, id_a: str, id_b: str, n_samples: int = 200,
                            rng=None) -> float:
        """Max relative disagreement of e^psi|dz|^2 on the chart overlap.

        Compares psi_a + log|dz/da|^2 against psi_b + log|dz/db|^2 at
        points of chart a that chart b also covers.
        """
        fa, fb = self.log_factors[id_a], self.log_factors[id_b]
        ca, cb = fa.chart, fb.chart
        A, B = ca.grid()
        z = ca.to_reference(A, B)
        inside = cb.contains_reference(z, margin=1e-9)
        if not inside.any():
            return 0.0
        idx = np.argwhere(inside)
        if rng is None:
            rng = np.random.default_rng(0)
        if len(idx) > n_samples:
            idx = idx[rng.choice(len(idx), n_samples, replace=False)]
        worst = 0.0
        from .charts import bilinear_sample
        for i, j in idx:
            zij = z[i, j]
            ref_a = fa.total()[i, j] - ca.log_jacobian(A[i, j], B[i, j])
            Ab, Bb = cb.from_reference(zij)
            val_b = bilinear_sample(cb, fb.values, Ab, Bb)
            if fb.tag is not None:
                val_b = val_b + fb.tag.value(Ab)
            ref_b = val_b - cb.log_jacobian(Ab, Bb)
            worst = max(worst, abs(ref_a - ref_b) / max(1.0, abs(ref_a)))
        return worst


@dataclass(frozen=True)
class CubicDifferential:
    """Meromorphic cubic differential on the sphere.

    ``ref_coeff`` evaluates the coefficient U(z) of U dz^3 in the reference
    coordinate; poles lists (location, order) with location possibly inf.
    The coefficient on any chart follows from the K^3 transformation law
    U_local = U(z) * (dz/dw)^3.
    """

    ref_coeff: callable
    poles: tuple
    scale: complex = 1.0 + 0.0j
    label: str = "U"

    def coeff_reference(self, z):
        return self.scale * np.asarray(self.ref_coeff(z), dtype=complex)

    def coeff_on_chart(self, chart: Chart, A, B):
        z = chart.to_reference(A, B)
        return self.coeff_reference(z) * chart.dref_dlocal(A, B) ** 3

    def rescaled(self, c) -> "CubicDifferential":
        return CubicDifferential(self.ref_coeff, self.poles, self.scale * c, self.label)

    def pole_locations(self):
        return [p for p, _ in self.poles]

    def total_pole_order(self) -> int:
        return sum(o for _, o in self.poles)
