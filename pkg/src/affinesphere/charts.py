"""Charts on the Riemann sphere with a reference inhomogeneous coordinate z.

Two kinds of chart are supported:

* ``cartesian`` -- a rectangle in a complex coordinate w related to the
  reference coordinate by a Moebius map z = m(w).  The grid coordinates
  are (Re w, Im w).

* ``log-polar`` -- a cylinder (t, theta) wrapped around a puncture p with
  canonical local coordinate zeta = s*(z - p) (or zeta = s/z for the
  puncture at infinity) and zeta = exp(-t + i*theta).  Large t means
  close to the puncture; the holomorphic grid coordinate is
  sigma = t - i*theta.

All per-chart differential operators act in the grid coordinates, which
are flat; conformal factors of metrics are stored with respect to the
grid coordinate, so transporting them between charts uses log_jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INF = complex(np.inf)


@dataclass(frozen=True)
class Mobius:
    """z -> (a z + b) / (c z + d)."""

    a: complex = 1.0
    b: complex = 0.0
    c: complex = 0.0
    d: complex = 1.0

    def __call__(self, w):
        return (self.a * w + self.b) / (self.c * w + self.d)

    def inverse(self) -> "Mobius":
        return Mobius(self.d, -self.b, -self.c, self.a)

    def deriv(self, w):
        det = self.a * self.d - self.b * self.c
        return det / (self.c * w + self.d) ** 2

    @property
    def is_identity(self) -> bool:
        return self.a == 1 and self.b == 0 and self.c == 0 and self.d == 1


def _is_inf(p) -> bool:
    return p is not None and np.isinf(complex(p).real)


@dataclass(frozen=True)
class Chart:
    """A structured grid patch with an analytic map to the reference coordinate."""

    id: str
    kind: str                       # "cartesian" | "log-polar"
    domain: tuple                   # cartesian: (x0, x1, y0, y1); log-polar: (t0, t1)
    shape: tuple                    # nodes per axis; log-polar theta axis is periodic
    mobius: Mobius = field(default_factory=Mobius)   # cartesian only
    puncture: complex | None = None                  # log-polar only; INF allowed
    scale: complex = 1.0 + 0.0j                      # canonical-coordinate scale

    def __post_init__(self):
        if self.kind not in ("cartesian", "log-polar"):
            raise ValueError(f"unknown chart kind {self.kind!r}")
        if min(self.shape) < 8:
            raise ValueError("chart resolution must be at least 8 nodes per axis")
        if self.kind == "log-polar":
            if self.puncture is None:
                raise ValueError("log-polar chart needs a puncture")
            t0, t1 = self.domain
            if not (np.isfinite(t1) and t1 > t0):
                raise ValueError("log-polar chart needs a finite inner cutoff t_max")

    # ---- grids ------------------------------------------------------

    def axes(self):
        """1-D node coordinate arrays (a, b) for the two grid axes."""
        if self.kind == "cartesian":
            x0, x1, y0, y1 = self.domain
            return (np.linspace(x0, x1, self.shape[0]),
                    np.linspace(y0, y1, self.shape[1]))
        t0, t1 = self.domain
        t = np.linspace(t0, t1, self.shape[0])
        theta = np.linspace(0.0, 2.0 * np.pi, self.shape[1], endpoint=False)
        return t, theta

    def spacings(self):
        a, b = self.axes()
        db = b[1] - b[0]
        return a[1] - a[0], db

    def grid(self):
        a, b = self.axes()
        return np.meshgrid(a, b, indexing="ij")

    @property
    def periodic_b(self) -> bool:
        return self.kind == "log-polar"

    # ---- coordinate maps --------------------------------------------

    def local_complex(self, A, B):
        """Holomorphic grid coordinate: w = x+iy, or sigma = t - i*theta."""
        if self.kind == "cartesian":
            return A + 1j * B
        return A - 1j * B

    def to_reference(self, A, B):
        """Reference coordinate z at grid points (A, B)."""
        if self.kind == "cartesian":
            w = A + 1j * B
            return w if self.mobius.is_identity else self.mobius(w)
        zeta = np.exp(-A + 1j * B)
        if _is_inf(self.puncture):
            return self.scale / zeta
        return self.puncture + zeta / self.scale

    def from_reference(self, z):
        """Grid coordinates (A, B) of reference points z."""
        z = np.asarray(z, dtype=complex)
        if self.kind == "cartesian":
            w = z if self.mobius.is_identity else self.mobius.inverse()(z)
            return w.real, w.imag
        if _is_inf(self.puncture):
            zeta = self.scale / z
        else:
            zeta = self.scale * (z - self.puncture)
        with np.errstate(divide="ignore"):
            t = -np.log(np.abs(zeta))
        theta = np.mod(np.angle(zeta), 2.0 * np.pi)
        return t, theta

    def log_jacobian(self, A, B):
        """log |dz/d(grid complex coordinate)|^2 at grid points."""
        if self.kind == "cartesian":
            if self.mobius.is_identity:
                return np.zeros_like(np.asarray(A, dtype=float))
            w = A + 1j * B
            return np.log(np.abs(self.mobius.deriv(w)) ** 2)
        # z = p + exp(-sigma)/s  or  z = s*exp(sigma):  |dz/dsigma|^2
        A = np.asarray(A, dtype=float)
        if _is_inf(self.puncture):
            return 2.0 * A + np.log(np.abs(self.scale) ** 2)
        return -2.0 * A - np.log(np.abs(self.scale) ** 2)

    def dref_dlocal(self, A, B):
        """Complex derivative dz/d(grid complex coordinate) at grid points."""
        if self.kind == "cartesian":
            w = A + 1j * B
            if self.mobius.is_identity:
                return np.ones_like(w)
            return self.mobius.deriv(w)
        sigma = A - 1j * B
        if _is_inf(self.puncture):
            return self.scale * np.exp(sigma)
        return -np.exp(-sigma) / self.scale

    def reference_grid(self):
        A, B = self.grid()
        return self.to_reference(A, B)

    def contains_reference(self, z, margin: float = 0.0) -> np.ndarray:
        """Mask of reference points that land inside this chart's rectangle."""
        A, B = self.from_reference(z)
        a, b = self.axes()
        ok_a = (A >= a[0] + margin) & (A <= a[-1] - margin)
        if self.periodic_b:
            return ok_a
        ok_b = (B >= b[0] + margin) & (B <= b[-1] - margin)
        return ok_a & ok_b


def cartesian_chart(id: str, x0, x1, y0, y1, nx, ny, mobius: Mobius | None = None) -> Chart:
    return Chart(id=id, kind="cartesian", domain=(x0, x1, y0, y1), shape=(nx, ny),
                 mobius=mobius or Mobius())


def log_polar_chart(id: str, puncture, t0, t1, nt, ntheta, scale=1.0 + 0.0j) -> Chart:
    return Chart(id=id, kind="log-polar", domain=(t0, t1), shape=(nt, ntheta),
                 puncture=complex(puncture) if not _is_inf(puncture) else INF,
                 scale=complex(scale))


def bilinear_sample(chart: Chart, values: np.ndarray, A, B):
    """Sample a grid array at arbitrary chart coordinates (A, B).

    Bilinear interpolation; theta axis wraps on log-polar charts.
    Points outside the a-axis range are clamped (callers should stay inside).
    """
    a, b = chart.axes()
    da, db = chart.spacings()
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)

    fa = np.clip((A - a[0]) / da, 0.0, len(a) - 1.0 - 1e-12)
    ia = fa.astype(int)
    wa = fa - ia

    if chart.periodic_b:
        fb = np.mod(B - b[0], 2.0 * np.pi) / db
        ib = fb.astype(int) % len(b)
        wb = fb - np.floor(fb)
        ib1 = (ib + 1) % len(b)
    else:
        fb = np.clip((B - b[0]) / db, 0.0, len(b) - 1.0 - 1e-12)
        ib = fb.astype(int)
        wb = fb - ib
        ib1 = ib + 1

    v00 = values[ia, ib]
    v10 = values[ia + 1, ib]
    v01 = values[ia, ib1]
    v11 = values[ia + 1, ib1]
    return ((1 - wa) * (1 - wb) * v00 + wa * (1 - wb) * v10
            + (1 - wa) * wb * v01 + wa * wb * v11)
