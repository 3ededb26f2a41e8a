"""Cone potentials over affine spheres.

An elliptic affine sphere H (mean curvature +1, center 0) generates the
potential Phi = r^2/2 on the cone over H, solving det Hess Phi = 1; a
hyperbolic affine sphere (mean curvature -1, even dimension of the
ambient minus one) generates Phi = int (r^{n+1} - 1)^{1/(n+1)} dr on the
truncated cone 0 < r < 1.  Here r(y) is the ray coordinate: y = r p with
p on the surface.  Surfaces come either in analytic form (unit sphere,
hyperboloid sheet) or as sampled patches from the developing map,
interpolated with smooth splines so finite-difference Hessians of Phi
converge at second order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import brentq

from .hessian import ClosedFormPotential


@dataclass
class ImmersedSurface:
    """Star-shaped surface patch with a smooth parametric evaluator."""

    kind: str                      # elliptic | hyperbolic | analytic-sphere | analytic-hyperboloid
    evaluate: callable             # (a, b) -> points (..., 3)
    param_range: tuple             # ((a0, a1), (b0, b1))
    affine_metric: callable = None  # (a, b) -> 2x2 metric matrix of h
    normalization: float = 1.0     # scale applied to reach mean curvature +-1

    def samples(self, na: int = 40, nb: int = 40):
        (a0, a1), (b0, b1) = self.param_range
        A, B = np.meshgrid(np.linspace(a0, a1, na), np.linspace(b0, b1, nb), indexing="ij")
        return A, B, self.evaluate(A, B)

    def ray_injective(self, na: int = 24, nb: int = 24, bins: int = 64) -> bool:
        """Pairwise ray-injectivity within angular bins of the sample set."""
        _, _, P = self.samples(na, nb)
        pts = P.reshape(-1, 3)
        dirs = pts / np.linalg.norm(pts, axis=1)[:, None]
        seen = {}
        for k in range(len(pts)):
            key = tuple(np.round(dirs[k] * bins).astype(int))
            if key in seen:
                other = seen[key]
                cosang = float(np.dot(dirs[k], dirs[other]))
                if cosang > 1.0 - 1e-10:
                    r1 = np.linalg.norm(pts[k]); r2 = np.linalg.norm(pts[other])
                    if abs(r1 - r2) > 1e-8 * max(r1, r2):
                        return False
            seen[key] = k
        return True


def unit_sphere_surface(cap: float = 1.2) -> ImmersedSurface:
    """Analytic unit sphere patch around the north pole (stereographic box)."""

    def ev(a, b):
        z2 = a**2 + b**2
        den = 1.0 + z2
        return np.stack([2 * a / den, -2 * b / den, (1 - z2) / den], axis=-1)

    def metric(a, b):
        c = 4.0 / (1.0 + a**2 + b**2) ** 2
        return np.stack([np.stack([c, 0 * c], axis=-1),
                         np.stack([0 * c, c], axis=-1)], axis=-2)

    return ImmersedSurface(kind="analytic-sphere", evaluate=ev,
                           param_range=((-cap, cap), (-cap, cap)),
                           affine_metric=metric)


def hyperboloid_surface(cap: float = 0.9) -> ImmersedSurface:
    """Upper sheet of z^2 - x^2 - y^2 = 1: a hyperbolic affine sphere with
    affine mean curvature exactly -1 (normalization factor 1, verified by
    the volume condition at the apex)."""

    def ev(a, b):
        w = np.sqrt(1.0 + a**2 + b**2)
        return np.stack([a, b, w], axis=-1)

    return ImmersedSurface(kind="analytic-hyperboloid", evaluate=ev,
                           param_range=((-cap, cap), (-cap, cap)))


def developed_surface(patch: dict, kind: str = "elliptic") -> ImmersedSurface:
    """Spline-interpolated surface from a develop_patch result."""
    xs, ys, F = patch["x"], patch["y"], patch["f"]
    splines = [RectBivariateSpline(xs, ys, F[:, :, k], kx=5, ky=5) for k in range(3)]

    def ev(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        flat_a, flat_b = a.ravel(), b.ravel()
        vals = np.stack([s.ev(flat_a, flat_b) for s in splines], axis=-1)
        return vals.reshape(a.shape + (3,))

    sol = patch.get("solution")
    metric = None
    if sol is not None:
        def metric(a, b):
            z = np.asarray(a) + 1j * np.asarray(b)
            c = np.exp(np.vectorize(lambda w: float(sol.psi(w)))(z))
            zero = 0.0 * c
            return np.stack([np.stack([c, zero], axis=-1),
                             np.stack([zero, c], axis=-1)], axis=-2)

    return ImmersedSurface(kind=kind, evaluate=ev,
                           param_range=((xs[0], xs[-1]), (ys[0], ys[-1])),
                           affine_metric=metric)


# ---------------------------------------------------------------------------
# ray geometry

class RayIntersector:
    """Solves surface(a, b) parallel to a given direction (star-shaped patch)."""

    def __init__(self, surface: ImmersedSurface, seed_n: int = 48):
        self.surface = surface
        A, B, P = surface.samples(seed_n, seed_n)
        self._seed_ab = np.stack([A.ravel(), B.ravel()], axis=1)
        norms = np.linalg.norm(P.reshape(-1, 3), axis=1)
        self._seed_dirs = P.reshape(-1, 3) / norms[:, None]
        self._seed_r = norms

    def intersect(self, y: np.ndarray, tol: float = 1e-12, max_iter: int = 60):
        """Returns (point p on surface, parameters (a, b), r = |y| / |p|)."""
        y = np.asarray(y, dtype=float)
        d = y / np.linalg.norm(y)
        k = int(np.argmax(self._seed_dirs @ d))
        ab = self._seed_ab[k].copy()
        h = 1e-6
        for _ in range(max_iter):
            p = self.surface.evaluate(ab[0], ab[1])
            # solve cross(p(a,b), d) = 0 in the 2 directions transverse to d
            c = np.cross(p, d)
            basis = _transverse_basis(d)
            F = basis @ c
            if np.linalg.norm(F) < tol * max(1.0, np.linalg.norm(p)):
                break
            pa = (self.surface.evaluate(ab[0] + h, ab[1])
                  - self.surface.evaluate(ab[0] - h, ab[1])) / (2 * h)
            pb = (self.surface.evaluate(ab[0], ab[1] + h)
                  - self.surface.evaluate(ab[0], ab[1] - h)) / (2 * h)
            J = np.stack([basis @ np.cross(pa, d), basis @ np.cross(pb, d)], axis=1)
            try:
                step = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                raise RuntimeError("ray intersection Jacobian singular")
            ab = ab - step
        else:
            raise RuntimeError("ray-surface intersection did not converge")
        (a0, a1), (b0, b1) = self.surface.param_range
        if not (a0 - 1e-9 <= ab[0] <= a1 + 1e-9 and b0 - 1e-9 <= ab[1] <= b1 + 1e-9):
            raise OutsidePatch("ray misses the sampled patch")
        p = self.surface.evaluate(ab[0], ab[1])
        if np.dot(p, d) <= 0:
            raise OutsidePatch("ray hits the antipodal sheet")
        r = float(np.linalg.norm(y) / np.linalg.norm(p))
        return p, ab, r


class OutsidePatch(RuntimeError):
    pass


def _transverse_basis(d):
    e = np.eye(3)[int(np.argmin(np.abs(d)))]
    u = np.cross(d, e); u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return np.stack([u, v])


# ---------------------------------------------------------------------------
# cone potentials

@dataclass
class ConePotential:
    kind: str
    surface: ImmersedSurface
    value: callable              # Phi(y) for y of shape (..., 3)
    r_of: callable               # r(y)
    n: int = 2
    fd_step: float = 1e-3

    def closed_form(self) -> ClosedFormPotential:
        return ClosedFormPotential(self.value, fd_step=self.fd_step)


def elliptic_cone_potential(surface: ImmersedSurface) -> ConePotential:
    """Phi(y) = r(y)^2 / 2 over the cone of an elliptic affine sphere."""
    if surface.kind not in ("elliptic", "analytic-sphere"):
        raise ValueError("elliptic cone needs an elliptic affine sphere")
    if not surface.ray_injective():
        raise ValueError("rays are not injective on the sampled patch")
    inter = RayIntersector(surface)

    def r_of(y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            return inter.intersect(y)[2]
        flat = y.reshape(-1, 3)
        return np.array([inter.intersect(p)[2] for p in flat]).reshape(y.shape[:-1])

    def value(y):
        r = r_of(y)
        return 0.5 * r**2

    return ConePotential(kind="elliptic", surface=surface, value=value, r_of=r_of)


def hyperbolic_cone_potential(surface: ImmersedSurface, n: int = 2) -> ConePotential:
    """Phi = int (r^{n+1} - 1)^{1/(n+1)} dr on the open cone 0 < r < 1.

    n must be even (odd root keeps the integrand real-negative below
    r = 1); points with r >= 1 are outside the domain.
    """
    if n % 2 != 0:
        raise ValueError("the construction needs n even")
    if surface.kind not in ("hyperbolic", "analytic-hyperboloid"):
        raise ValueError("hyperbolic cone needs a hyperbolic affine sphere")
    inter = RayIntersector(surface)
    p_exp = 1.0 / (n + 1.0)

    from numpy.polynomial.legendre import leggauss
    gl_x, gl_w = leggauss(48)

    def antider(r):
        """int_{1/2}^{r} (s^{n+1} - 1)^{1/(n+1)} ds by Gauss-Legendre."""
        r = np.asarray(r, dtype=float)
        a, b = 0.5, r
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        s = mid[..., None] + half[..., None] * gl_x
        integrand = -np.abs(1.0 - s ** (n + 1.0)) ** p_exp  # negative real odd root
        return np.sum(integrand * gl_w, axis=-1) * half

    def r_of(y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            return inter.intersect(y)[2]
        flat = y.reshape(-1, 3)
        return np.array([inter.intersect(p)[2] for p in flat]).reshape(y.shape[:-1])

    def value(y):
        r = r_of(y)
        if np.any(r >= 1.0):
            raise OutsidePatch("point outside the truncated cone (r >= 1)")
        return antider(r)

    return ConePotential(kind="hyperbolic", surface=surface, value=value, r_of=r_of, n=n)


# ---------------------------------------------------------------------------
# Calabi radial family

def calabi_radial_potential(d: int, K: float = 1.0, A: float = 1.0):
    """Radial potential with Phi'(r) = (K r^d + A)^{1/d} in dimension d.

    det Hess = Phi'' (Phi'/r)^{d-1} = K identically (closed forms); the
    value itself comes from Gauss-Legendre quadrature of Phi'.
    """
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if K <= 0 or A < 0:
        raise ValueError("need K > 0 and A >= 0 for a convex potential")
    from numpy.polynomial.legendre import leggauss
    gl_x, gl_w = leggauss(64)

    def dphi(r):
        return (K * r**d + A) ** (1.0 / d)

    def d2phi(r):
        return K * r ** (d - 1.0) * (K * r**d + A) ** (1.0 / d - 1.0)

    def value_r(r):
        r = np.asarray(r, dtype=float)
        mid = 0.5 * r
        s = mid[..., None] * (1.0 + gl_x)
        return np.sum(dphi(s) * gl_w, axis=-1) * mid

    def value(X):
        X = np.asarray(X, dtype=float)
        return value_r(np.linalg.norm(X, axis=-1))

    def grad(X):
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X, axis=-1)
        return dphi(r)[..., None] * X / r[..., None]

    def hess(X):
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X, axis=-1)
        rhat = X / r[..., None]
        P = np.einsum("...i,...j->...ij", rhat, rhat)
        eye = np.eye(d)
        return (d2phi(r)[..., None, None] * P
                + (dphi(r) / r)[..., None, None] * (eye - P))

    def det_closed(r):
        return d2phi(r) * (dphi(r) / r) ** (d - 1.0)

    cf = ClosedFormPotential(value, grad=grad, hess=hess)
    return cf, det_closed


# ---------------------------------------------------------------------------
# verification

def fd_hessian(value, y, h):
    y = np.asarray(y, dtype=float)
    m = len(y)
    H = np.empty((m, m))
    f0 = value(y)
    for i in range(m):
        ei = np.zeros(m); ei[i] = h
        H[i, i] = (value(y + ei) - 2 * f0 + value(y - ei)) / h**2
        for j in range(i + 1, m):
            ej = np.zeros(m); ej[j] = h
            H[i, j] = H[j, i] = (value(y + ei + ej) - value(y + ei - ej)
                                 - value(y - ei + ej) + value(y - ei - ej)) / (4 * h**2)
    return H


def verify_cone(potential: ConePotential, n_dirs: int = 40, radii=(0.85, 1.0, 1.15),
                h_rel: float = 1e-3, rng=None) -> dict:
    """Monge-Ampere residual and metric-splitting checks of a cone potential.

    Samples rays through the surface patch interior; at each test point
    reports det Hess Phi - 1, g(X, Y) for tangent Y (orthogonality of the
    radial direction), g(X, X) - r^2, and the relative deviation of the
    restricted metric from r^2 h when the surface carries its affine
    metric.  Hessians are centered differences with Richardson.
    """
    rng = rng or np.random.default_rng(0)
    surf = potential.surface
    (a0, a1), (b0, b1) = surf.param_range
    pad_a = 0.25 * (a1 - a0)
    pad_b = 0.25 * (b1 - b0)
    across = rng.uniform(a0 + pad_a, a1 - pad_a, n_dirs)
    bcross = rng.uniform(b0 + pad_b, b1 - pad_b, n_dirs)
    if potential.kind == "hyperbolic":
        radii = tuple(r for r in radii if r < 1.0) or (0.6, 0.75, 0.9)

    def radial_second(r):
        """F''(r) of the radial profile: g(X, X) = r^2 F''."""
        if potential.kind == "elliptic":
            return 1.0
        n = potential.n
        return r**n * (1.0 - r ** (n + 1.0)) ** (1.0 / (n + 1.0) - 1.0)

    worst = {"det": 0.0, "gXY": 0.0, "gXX": 0.0, "metric": 0.0}
    h_fd = 1e-6
    for a, b in zip(across, bcross):
        p = surf.evaluate(a, b)
        pa = (surf.evaluate(a + h_fd, b) - surf.evaluate(a - h_fd, b)) / (2 * h_fd)
        pb = (surf.evaluate(a, b + h_fd) - surf.evaluate(a, b - h_fd)) / (2 * h_fd)
        for r in radii:
            y = r * p
            h = h_rel * np.linalg.norm(y)
            H1 = fd_hessian(potential.value, y, h)
            H2 = fd_hessian(potential.value, y, h / 2)
            H = (4.0 * H2 - H1) / 3.0
            worst["det"] = max(worst["det"], abs(float(np.linalg.det(H)) - 1.0))
            gXY = max(abs(float(y @ H @ pa)), abs(float(y @ H @ pb)))
            worst["gXY"] = max(worst["gXY"], gXY / np.linalg.norm(y) / max(np.linalg.norm(pa), 1e-30))
            worst["gXX"] = max(worst["gXX"], abs(float(y @ H @ y) - r**2 * radial_second(r)))
            if surf.affine_metric is not None and potential.kind == "elliptic":
                # tangents of the scaled slice rH at y are r * (pa, pb), so
                # the splitting g|_slice = r^2 h reads (pa H pb) = h_ab
                hm = surf.affine_metric(a, b)
                g2 = np.array([[pa @ H @ pa, pa @ H @ pb], [pb @ H @ pa, pb @ H @ pb]])
                rel = np.max(np.abs(g2 - hm)) / max(np.max(np.abs(hm)), 1e-30)
                worst["metric"] = max(worst["metric"], rel)
    return worst
