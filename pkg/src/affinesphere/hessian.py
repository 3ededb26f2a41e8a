"""Convex potentials on real-coordinate lattices: Monge-Ampere residuals,
curvature of Hessian metrics, Legendre transforms and the consistency
equations for Hessian coordinate changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import fsum_array


class ClosedFormPotential:
    """Callable bundle (value, grad, hess, third) for an analytic potential.

    Any of grad/hess/third may be None, in which case finite differences
    of `value` are used with step `fd_step`.
    """

    def __init__(self, value, grad=None, hess=None, third=None, fd_step=1e-4):
        self.value = value
        self._grad = grad
        self._hess = hess
        self._third = third
        self.fd_step = float(fd_step)

    def grad(self, X):
        if self._grad is not None:
            return np.asarray(self._grad(X), dtype=float)
        X = np.asarray(X, dtype=float)
        h = self.fd_step
        out = np.empty(X.shape)
        for i in range(X.shape[-1]):
            e = np.zeros(X.shape[-1]); e[i] = h
            out[..., i] = (self.value(X + e) - self.value(X - e)) / (2 * h)
        return out

    def hess(self, X):
        if self._hess is not None:
            return np.asarray(self._hess(X), dtype=float)
        X = np.asarray(X, dtype=float)
        d = X.shape[-1]
        h = self.fd_step
        out = np.empty(X.shape[:-1] + (d, d))
        f0 = self.value(X)
        for i in range(d):
            ei = np.zeros(d); ei[i] = h
            out[..., i, i] = (self.value(X + ei) - 2 * f0 + self.value(X - ei)) / h**2
            for j in range(i + 1, d):
                ej = np.zeros(d); ej[j] = h
                mixed = (self.value(X + ei + ej) - self.value(X + ei - ej)
                         - self.value(X - ei + ej) + self.value(X - ei - ej)) / (4 * h**2)
                out[..., i, j] = mixed
                out[..., j, i] = mixed
        return out

    def third(self, X):
        if self._third is not None:
            return np.asarray(self._third(X), dtype=float)
        X = np.asarray(X, dtype=float)
        d = X.shape[-1]
        h = self.fd_step
        out = np.empty(X.shape[:-1] + (d, d, d))
        for k in range(d):
            e = np.zeros(d); e[k] = h
            dh = (self.hess(X + e) - self.hess(X - e)) / (2 * h)
            out[..., k] = dh
        return out


@dataclass
class HessianPotential:
    """Real potential Phi on a 2D or 3D lattice, optionally with closed form."""

    dim: int
    axes: tuple          # 1-D coordinate arrays, one per dimension
    values: np.ndarray
    closed_form: ClosedFormPotential | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != self.dim:
            raise ValueError("values rank must equal dim")

    def spacings(self):
        return tuple(ax[1] - ax[0] for ax in self.axes)

    def meshgrid(self):
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self):
        return np.stack(self.meshgrid(), axis=-1)

    def interior(self, width: int = 1):
        sl = tuple(slice(width, -width) for _ in range(self.dim))
        mask = np.zeros(self.values.shape, dtype=bool)
        mask[sl] = True
        return mask

    def fd_hessian_grid(self):
        """Second-order FD Hessian at interior lattice nodes (NaN elsewhere)."""
        d = self.dim
        hs = self.spacings()
        V = self.values
        H = np.full(V.shape + (d, d), np.nan)
        inner = self.interior()
        idx = np.argwhere(inner)
        # vectorized via shifted arrays
        H_full = np.empty(V.shape + (d, d))
        for i in range(d):
            H_full[..., i, i] = _shift(V, i, 1) - 2 * V + _shift(V, i, -1)
            H_full[..., i, i] /= hs[i] ** 2
            for j in range(i + 1, d):
                mixed = (_shift(_shift(V, i, 1), j, 1) - _shift(_shift(V, i, 1), j, -1)
                         - _shift(_shift(V, i, -1), j, 1) + _shift(_shift(V, i, -1), j, -1))
                mixed = mixed / (4 * hs[i] * hs[j])
                H_full[..., i, j] = mixed
                H_full[..., j, i] = mixed
        H[inner] = H_full[inner]
        del idx
        return H


def _shift(a: np.ndarray, axis: int, by: int) -> np.ndarray:
    """np.roll without wraparound semantics mattering (interior use only)."""
    return np.roll(a, -by, axis=axis)


def potential_from_closed_form(cf: ClosedFormPotential, axes) -> HessianPotential:
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = np.asarray(cf.value(pts), dtype=float)
    return HessianPotential(dim=len(axes), axes=axes, values=vals, closed_form=cf)


@dataclass
class MongeAmpereReport:
    residual: np.ndarray       # det Hess - 1 per node (NaN at boundary/flagged)
    max_abs: float
    l2: float
    convergence_order: float | None
    non_convex_nodes: int


def monge_ampere_residual(phi: HessianPotential, target_det: float = 1.0) -> MongeAmpereReport:
    """det Hess Phi - target per node, with norms and observed FD order.

    Closed-form Hessians are used when available; otherwise centered
    differences on the lattice.  Nodes where the Hessian is not positive
    definite are counted but still reported.
    """
    with np.errstate(invalid="ignore"):
        if phi.closed_form is not None and phi.closed_form._hess is not None:
            H = phi.closed_form.hess(phi.points())
            order = None
        else:
            H = phi.fd_hessian_grid()
            order = _observed_order(phi)
        det = np.linalg.det(np.nan_to_num(H, nan=np.nan))
        res = det - target_det
        finite = np.isfinite(res)
        eigs = np.linalg.eigvalsh(np.where(np.isfinite(H), H, np.eye(phi.dim)))
    bad = int(np.sum(np.any(eigs <= 0, axis=-1) & finite))
    vals = res[finite]
    return MongeAmpereReport(
        residual=res,
        max_abs=float(np.max(np.abs(vals))) if vals.size else np.nan,
        l2=float(np.sqrt(np.mean(vals**2))) if vals.size else np.nan,
        convergence_order=order,
        non_convex_nodes=bad,
    )


def _observed_order(phi: HessianPotential) -> float | None:
    """Observed order of the FD determinant by Richardson doubling.

    Uses three nested grids (h, 2h, 4h by subsampling) and compares the
    successive differences of det Hess on the common coarse nodes.
    """
    if any((n - 1) % 4 != 0 or n < 17 for n in phi.values.shape):
        return None

    def det_on(step):
        sub = phi.values[tuple(slice(None, None, step) for _ in range(phi.dim))]
        axes = tuple(ax[::step] for ax in phi.axes)
        H = HessianPotential(phi.dim, axes, sub).fd_hessian_grid()
        with np.errstate(invalid="ignore"):
            return np.linalg.det(np.nan_to_num(H, nan=np.nan))

    d1 = det_on(1)[tuple(slice(None, None, 4) for _ in range(phi.dim))]
    d2 = det_on(2)[tuple(slice(None, None, 2) for _ in range(phi.dim))]
    d4 = det_on(4)
    ok = np.isfinite(d1) & np.isfinite(d2) & np.isfinite(d4)
    if not ok.any():
        return None
    e21 = np.max(np.abs(d2[ok] - d1[ok]))
    e42 = np.max(np.abs(d4[ok] - d2[ok]))
    if e21 == 0:
        return None
    return float(np.log2(e42 / e21))


def hessian_curvature(phi: HessianPotential, check_tol: float = 1e-10):
    """Curvature tensor of the Hessian metric from the cubic-derivative formula.

    R_{ijkl} = -1/4 Phi^{ab} (Phi_{ika} Phi_{jlb} - Phi_{jka} Phi_{ilb});
    returns (R array per node, max antisymmetry defect in (i<->j)).
    Nodes with singular Hessian are rejected (NaN).
    """
    X = phi.points()
    if phi.closed_form is not None:
        H = phi.closed_form.hess(X)
        T = phi.closed_form.third(X)
    else:
        H = phi.fd_hessian_grid()
        T = _fd_third_grid(phi)
    d = phi.dim
    R = np.full(H.shape[:-2] + (d, d, d, d), np.nan)
    ok = np.isfinite(H).all(axis=(-2, -1)) & np.isfinite(T).all(axis=(-3, -2, -1))
    dets = np.where(ok, np.linalg.det(np.where(ok[..., None, None], H, np.eye(d))), 0.0)
    ok = ok & (np.abs(dets) > 1e-300)
    Hin = np.linalg.inv(np.where(ok[..., None, None], H, np.eye(d)))
    # einsum over node axes
    term1 = np.einsum("...ab,...ika,...jlb->...ijkl", Hin, T, T)
    term2 = np.einsum("...ab,...jka,...ilb->...ijkl", Hin, T, T)
    Rval = -0.25 * (term1 - term2)
    R[ok] = Rval[ok]
    anti = np.nanmax(np.abs(Rval + np.swapaxes(Rval, -4, -3))[ok]) if ok.any() else 0.0
    return R, float(anti)


def _fd_third_grid(phi: HessianPotential) -> np.ndarray:
    hs = phi.spacings()
    H = phi.fd_hessian_grid()
    d = phi.dim
    T = np.full(H.shape + (d,), np.nan)
    for k in range(d):
        T[..., k] = (_shift(H, k, 1) - _shift(H, k, -1)) / (2 * hs[k])
    # re-symmetrize: third derivatives are totally symmetric
    T = (T + np.swapaxes(T, -3, -1) + np.swapaxes(T, -2, -1)
         + np.swapaxes(np.swapaxes(T, -3, -2), -2, -1)
         + np.swapaxes(np.swapaxes(T, -3, -1), -2, -1)
         + np.swapaxes(T, -3, -2)) / 6.0
    return T


class InvertibleGradientError(RuntimeError):
    pass


def legendre_transform(phi: HessianPotential, newton_tol: float = 1e-12,
                       newton_iter: int = 60):
    """Legendre transform Psi(v) = u.v - Phi(u) with v = grad Phi(u).

    Returns (psi: HessianPotential on the image of the lattice under the
    gradient map, v_points array).  Needs a closed-form gradient/Hessian
    (or falls back to FD of the sampled values); the gradient map must be
    injective on the lattice, otherwise InvertibleGradientError.
    """
    cf = phi.closed_form or ClosedFormPotential(
        _grid_interpolant(phi), fd_step=min(phi.spacings()) / 4)
    X = phi.points()
    V = cf.grad(X)
    flatV = V.reshape(-1, phi.dim)
    # sampled-collision check
    rounded = np.round(flatV / (1e-9 + 1e-9 * np.abs(flatV).max()), 0)
    _, counts = np.unique(rounded, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise InvertibleGradientError("gradient map collides on the lattice (not injective)")
    psi_vals = np.einsum("...i,...i->...", X, V) - cf.value(X)
    flatX = X.reshape(-1, phi.dim)

    def inverse_map(v):
        v = np.asarray(v, dtype=float)
        shape = v.shape
        vf = v.reshape(-1, phi.dim)
        # nearest sampled gradient as the initial guess keeps Newton inside
        # the domain of definition (important for log-type gradient maps)
        d2 = np.sum((flatV[None, :, :] - vf[:, None, :]) ** 2, axis=-1)
        u = flatX[np.argmin(d2, axis=1)].copy()
        for _ in range(newton_iter):
            r = cf.grad(u) - vf
            if np.max(np.abs(r)) < newton_tol:
                break
            H = cf.hess(u)
            step = np.linalg.solve(H, r[..., None])[..., 0]
            # damped update: reject steps that blow the residual up
            for damp in (1.0, 0.5, 0.25, 0.125):
                cand = u - damp * step
                rc = cf.grad(cand) - vf
                if np.all(np.isfinite(rc)) and np.max(np.abs(rc)) <= np.max(np.abs(r)):
                    u = cand
                    break
            else:
                u = u - 0.05 * step
        else:
            raise InvertibleGradientError("Newton inversion of the gradient map failed")
        return u.reshape(shape)

    def psi_value(v):
        u = inverse_map(v)
        return np.einsum("...i,...i->...", u, v) - cf.value(u)

    def psi_grad(v):
        return inverse_map(v)

    def psi_hess(v):
        u = inverse_map(v)
        return np.linalg.inv(cf.hess(u))

    # regular grid in v-space on the interior of the image box
    lo = flatV.min(axis=0)
    hi = flatV.max(axis=0)
    pad = 0.15 * (hi - lo)
    n = max(9, min(33, phi.values.shape[0]))
    axes = tuple(np.linspace(lo[i] + pad[i], hi[i] - pad[i], n) for i in range(phi.dim))
    psi_cf = ClosedFormPotential(psi_value, grad=psi_grad, hess=psi_hess)
    psi = potential_from_closed_form(psi_cf, axes)
    return psi, V


def _grid_interpolant(phi: HessianPotential):
    from scipy.interpolate import RegularGridInterpolator
    rgi = RegularGridInterpolator(phi.axes, phi.values, method="cubic",
                                  bounds_error=False, fill_value=None)

    def value(X):
        X = np.asarray(X, dtype=float)
        return rgi(X.reshape(-1, phi.dim)).reshape(X.shape[:-1])

    return value


def legendre_duality_residual(phi: HessianPotential, psi: HessianPotential,
                              points=None) -> float:
    """max |Phi(u) + Psi(v) - u.v| over matched points (v = grad Phi(u))."""
    cf = phi.closed_form
    if cf is None:
        raise ValueError("duality check needs closed forms")
    X = points if points is not None else phi.points()
    V = cf.grad(X)
    lhs = cf.value(X) + psi.closed_form.value(V)
    rhs = np.einsum("...i,...i->...", X, V)
    return float(np.max(np.abs(lhs - rhs)))


def hessian_consistency_residual(y_map, metric_fn, points: np.ndarray,
                                 fd_step: float = 1e-4):
    """Residual of Psi_ab (y^a_i y^b_{jk} - y^a_k y^b_{ij}) at sample points.

    y_map: callable X -> y (shape (..., m)); metric_fn: callable y -> Psi
    (shape (..., m, m)).  Returns (per-point max-norm array, flagged mask
    of points with degenerate Jacobian).
    """
    X = np.asarray(points, dtype=float)
    d = X.shape[-1]
    h = fd_step
    y0 = np.asarray(y_map(X), dtype=float)
    m = y0.shape[-1]
    J = np.empty(X.shape[:-1] + (m, d))
    Hy = np.empty(X.shape[:-1] + (m, d, d))
    for i in range(d):
        ei = np.zeros(d); ei[i] = h
        J[..., :, i] = (y_map(X + ei) - y_map(X - ei)) / (2 * h)
        Hy[..., :, i, i] = (y_map(X + ei) - 2 * y0 + y_map(X - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d); ej[j] = h
            mix = (y_map(X + ei + ej) - y_map(X + ei - ej)
                   - y_map(X - ei + ej) + y_map(X - ei - ej)) / (4 * h**2)
            Hy[..., :, i, j] = mix
            Hy[..., :, j, i] = mix
    Psi = np.asarray(metric_fn(y0), dtype=float)
    # T_{ijk} = Psi_ab y^a_i y^b_{jk} - Psi_ab y^a_k y^b_{ij}
    T1 = np.einsum("...ab,...ai,...bjk->...ijk", Psi, J, Hy)
    T = T1 - np.swapaxes(T1, -3, -1)
    res = np.max(np.abs(T), axis=(-3, -2, -1))
    if m == d:
        degenerate = np.abs(np.linalg.det(J)) < 1e-12
    else:
        degenerate = np.linalg.matrix_rank(J) < min(m, d)
    return res, degenerate
