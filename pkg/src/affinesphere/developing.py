"""Integration of the first-order frame system of two-dimensional affine
spheres: immersions from conformal data (psi, U), conservation checks,
monodromy around punctures, and the exactly-solvable parabolic family.

The complexified frame (f, f_z, f_zbar) obeys, in the elliptic case,

    d/dz    (f, f_z, f_zbar)^T = A_z    (f, f_z, f_zbar)^T
    d/dzbar (f, f_z, f_zbar)^T = A_zbar (f, f_z, f_zbar)^T

with A_z = [[0, 1, 0], [0, psi_z, U e^-psi], [-e^psi/2, 0, 0]] and A_zbar
its conjugate-partner; the parabolic case replaces the f-feedback row by
the constant affine normal.  Reality (f real, f_zbar = conj f_z) is kept
exact by integrating the equivalent real 9-dimensional system in
(f, Re f_z, Im f_z).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class FrameState:
    f: np.ndarray                # real 3-vector
    fz: np.ndarray               # complex 3-vector (f_zbar = conj implied)
    base: complex

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.fz = np.asarray(self.fz, dtype=complex)

    def frame_matrix(self) -> np.ndarray:
        """Complex 3x3 with columns (f_z, f_zbar, f)."""
        return np.stack([self.fz, np.conj(self.fz), self.f.astype(complex)], axis=1)

    def nonsingular(self, tol: float = 1e-12) -> bool:
        return abs(np.linalg.det(self.frame_matrix())) > tol


@dataclass
class SolutionData:
    """Conformal data of the immersion: callables in the chart coordinate."""

    psi: callable
    psi_z: callable
    U: callable
    mode: str = "elliptic"                 # "elliptic" | "parabolic"
    xi: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    poles: tuple = ()

    def __post_init__(self):
        if self.mode not in ("elliptic", "parabolic"):
            raise ValueError("mode must be elliptic or parabolic")


def round_sphere_solution() -> SolutionData:
    """U = 0 with the round metric 4/(1+|z|^2)^2: the unit-sphere immersion."""
    return SolutionData(
        psi=lambda z: np.log(4.0) - 2.0 * np.log1p(np.abs(z) ** 2),
        psi_z=lambda z: -2.0 * np.conj(z) / (1.0 + np.abs(z) ** 2),
        U=lambda z: np.zeros_like(np.asarray(z, dtype=complex)),
        mode="elliptic",
    )


def radial_solution_data(radial, scale: complex = 1.0) -> SolutionData:
    """Annulus solution around a double pole: psi = psi(t), U = z^-2.

    `radial` is the RadialSolution of the local solver; psi', needed for
    psi_z = -psi'(t)/(2z), combines the exact leading part with a spline
    derivative of the small remainder.
    """
    from scipy.interpolate import CubicSpline
    phi_sp = CubicSpline(radial.phi.t, radial.phi.values)

    def psi(z):
        t = -np.log(np.abs(z))
        return t + np.log(2.0 * t) + phi_sp(t)

    def psi_z(z):
        t = -np.log(np.abs(z))
        dpsi = 1.0 + 1.0 / t + phi_sp(t, 1)
        return -dpsi / (2.0 * z)

    return SolutionData(psi=psi, psi_z=psi_z,
                        U=lambda z: scale * np.asarray(z, dtype=complex) ** -2.0,
                        mode="elliptic", poles=((0.0 + 0.0j, 2),))


def transport_matrices(sol: SolutionData, z: complex):
    """(A_z, A_zbar) of the first-order system at z."""
    psi = float(sol.psi(z))
    psi_z = complex(sol.psi_z(z))
    U = complex(sol.U(z))
    e_psi = math.exp(psi)
    e_mpsi = math.exp(-psi)
    if sol.mode == "elliptic":
        feed = -0.5 * e_psi
        A_z = np.array([[0, 1, 0],
                        [0, psi_z, U * e_mpsi],
                        [feed, 0, 0]], dtype=complex)
        A_zb = np.array([[0, 0, 1],
                         [feed, 0, 0],
                         [0, np.conj(U) * e_mpsi, np.conj(psi_z)]], dtype=complex)
    else:
        # constant affine normal: f_zzbar = e^psi/2 * xi enters as an
        # affine (inhomogeneous) term, handled in frame_rhs directly
        A_z = np.array([[0, 1, 0],
                        [0, psi_z, U * e_mpsi],
                        [0, 0, 0]], dtype=complex)
        A_zb = np.array([[0, 0, 1],
                         [0, 0, 0],
                         [0, np.conj(U) * e_mpsi, np.conj(psi_z)]], dtype=complex)
    return A_z, A_zb


def frame_rhs(state: FrameState, sol: SolutionData, direction: complex):
    """(df, dfz) along dz = direction ds; reality is exact by construction."""
    z = state.base
    if sol.poles and any(abs(z - p) < 1e-12 for p, _ in sol.poles if not np.isinf(p)):
        raise ValueError("evaluation at a pole of the cubic differential")
    psi = float(sol.psi(z))
    psi_z = complex(sol.psi_z(z))
    U = complex(sol.U(z))
    d = complex(direction)
    fz = state.fz
    df = 2.0 * np.real(d * fz)
    if sol.mode == "elliptic":
        fzzb = -0.5 * math.exp(psi) * state.f.astype(complex)
    else:
        fzzb = 0.5 * math.exp(psi) * sol.xi.astype(complex)
    fzz = psi_z * fz + U * math.exp(-psi) * np.conj(fz)
    dfz = d * fzz + np.conj(d) * fzzb
    return df, dfz


def default_initial_frame(sol: SolutionData, z0: complex, f0=None) -> FrameState:
    """Frame at z0 satisfying det(f_z, f_zbar, -f) = i e^psi / 2.

    Gauge: Im f_z . e1 = 0, f_z along (1, i, 0)/sqrt scaling, f = (0,0,1)
    unless given.  For the round solution this is the north-pole frame of
    the standard sphere immersion (x, -y)-oriented.
    """
    psi0 = float(sol.psi(z0))
    f = np.array([0.0, 0.0, 1.0]) if f0 is None else np.asarray(f0, dtype=float)
    s = math.sqrt(math.exp(psi0) / (4.0 * abs(f[2]) if f[2] != 0 else 4.0))
    fz = np.array([s, 1j * s, 0.0], dtype=complex)
    st = FrameState(f=f, fz=fz, base=z0)
    target = 0.5j * math.exp(psi0)
    det = np.linalg.det(np.stack([st.fz, np.conj(st.fz), -st.f.astype(complex)], axis=1))
    if abs(det - target) > 1e-9 * abs(target):
        raise RuntimeError("initial frame does not satisfy the volume condition")
    return st


def conserved_determinant(state: FrameState, sol: SolutionData) -> complex:
    """det(f_z, f_zbar, -f) e^{-psi}: constant (= i/2) along integral paths."""
    det = np.linalg.det(np.stack([state.fz, np.conj(state.fz),
                                  -state.f.astype(complex)], axis=1))
    return det * math.exp(-float(sol.psi(state.base)))


def _rk4_segment(state: FrameState, sol: SolutionData, z_to: complex, n_steps: int):
    z = state.base
    f, fz = state.f.copy(), state.fz.copy()
    dz = (z_to - z) / n_steps
    for _ in range(n_steps):
        def rhs(fv, fzv, zv):
            st = FrameState(fv, fzv, zv)
            return frame_rhs(st, sol, dz)

        k1f, k1z = rhs(f, fz, z)
        k2f, k2z = rhs(f + 0.5 * k1f, fz + 0.5 * k1z, z + 0.5 * dz)
        k3f, k3z = rhs(f + 0.5 * k2f, fz + 0.5 * k2z, z + 0.5 * dz)
        k4f, k4z = rhs(f + k3f, fz + k3z, z + dz)
        f = f + (k1f + 2 * k2f + 2 * k3f + k4f) / 6.0
        fz = fz + (k1z + 2 * k2z + 2 * k3z + k4z) / 6.0
        z = z + dz
    return FrameState(f, fz, z)


def integrate_path(init: FrameState, path, sol: SolutionData, step: float = 0.01,
                   drift_tol: float = 1e-8):
    """RK4 along the polyline `path` (list of complex waypoints from
    init.base); returns (final state, report).

    The conserved determinant det(f_z, f_zbar, -f) e^{-psi} is evaluated
    at both ends; drift beyond drift_tol raises (step too large).
    """
    if abs(complex(path[0]) - init.base) > 1e-12:
        raise ValueError("path must start at the initial frame's base point")
    for p, _ in sol.poles:
        for a, b in zip(path[:-1], path[1:]):
            if not np.isinf(p) and _segment_distance(complex(a), complex(b), complex(p)) < 1e-9:
                raise ValueError("path crosses a pole of the cubic differential")
    c0 = conserved_determinant(init, sol)
    state = init
    for a, b in zip(path[:-1], path[1:]):
        seg = complex(b) - complex(a)
        n = max(1, int(math.ceil(abs(seg) / step)))
        state = _rk4_segment(state, sol, complex(b), n)
    c1 = conserved_determinant(state, sol)
    drift = abs(c1 - c0)
    if drift > drift_tol * max(1.0, abs(c0)):
        raise ValueError(f"conservation drift {drift:.2e} exceeds tolerance; reduce step")
    return state, {"det_start": c0, "det_end": c1, "drift": drift}


def _segment_distance(a: complex, b: complex, p: complex) -> float:
    d = b - a
    if d == 0:
        return abs(p - a)
    s = np.clip(((p - a) * np.conj(d)).real / abs(d) ** 2, 0.0, 1.0)
    return abs(a + s * d - p)


def check_volume_and_pick(states, sol: SolutionData) -> dict:
    """Deviations of the volume condition and the Pick determinant.

    Along a solution the frame satisfies det(f_z, f_zbar, -f) = i e^psi/2
    and det(f_z, f_zz, -f) = i U / 2 (with f_zz from the structure
    equations); returns the max deviation of both over the given states.
    """
    dev_vol = 0.0
    dev_pick = 0.0
    for st in states:
        z = st.base
        psi = float(sol.psi(z))
        U = complex(sol.U(z))
        vol = np.linalg.det(np.stack([st.fz, np.conj(st.fz), -st.f.astype(complex)], axis=1))
        dev_vol = max(dev_vol, abs(vol - 0.5j * math.exp(psi)))
        fzz = complex(sol.psi_z(z)) * st.fz + U * math.exp(-psi) * np.conj(st.fz)
        pick = np.linalg.det(np.stack([st.fz, fzz, -st.f.astype(complex)], axis=1))
        dev_pick = max(dev_pick, abs(pick - 0.5j * U))
    return {"volume_deviation": dev_vol, "pick_deviation": dev_pick}


# ---------------------------------------------------------------------------
# monodromy

_C = np.array([[1, 0, 0], [0, 0.5, 0.5], [0, -0.5j, 0.5j]], dtype=complex)
_Cinv = np.array([[1, 0, 0], [0, 1, 1j], [0, 1, -1j]], dtype=complex)


def _real_generator(sol: SolutionData, z: complex, direction: complex) -> np.ndarray:
    A_z, A_zb = transport_matrices(sol, z)
    A = direction * A_z + np.conj(direction) * A_zb
    B = _C @ A @ _Cinv
    return B


def monodromy(loop, sol: SolutionData, step: float = 0.005,
              drift_tol: float = 1e-8) -> dict:
    """Transport matrix of the real frame stack (f, Re f_z, Im f_z) around
    the closed polyline `loop`.

    Each component slot of the three frame vectors evolves by the same
    real 3x3 system dPsi/ds = B(s) Psi, so the returned M satisfies
    (stack at end) = M (stack at start); det M = 1 up to integration error
    (the trace of the generator integrates psi around the loop).
    """
    if abs(complex(loop[0]) - complex(loop[-1])) > 1e-12:
        raise ValueError("monodromy needs a closed loop")
    M = np.eye(3, dtype=complex)
    imag_peak = 0.0
    for a, b in zip(loop[:-1], loop[1:]):
        a, b = complex(a), complex(b)
        seg = b - a
        n = max(1, int(math.ceil(abs(seg) / step)))
        dz = seg / n
        z = a
        for _ in range(n):
            k1 = _real_generator(sol, z, dz)
            k2 = _real_generator(sol, z + 0.5 * dz, dz)
            k4 = _real_generator(sol, z + dz, dz)
            incr = (k1 + 4 * k2 + k4) / 6.0   # k3 = k2 for state-independent B
            # classical RK4 on dM = B M
            m1 = k1 @ M
            m2 = k2 @ (M + 0.5 * m1)
            m3 = k2 @ (M + 0.5 * m2)
            m4 = k4 @ (M + m3)
            M = M + (m1 + 2 * m2 + 2 * m3 + m4) / 6.0
            z += dz
    imag_peak = float(np.max(np.abs(M.imag)))
    Mr = M.real
    det = float(np.linalg.det(Mr))
    tr = float(np.trace(Mr))
    tr_inv = float(np.trace(np.linalg.inv(Mr)))
    if abs(det - 1.0) > max(100 * drift_tol, 1e-6):
        raise ValueError(f"monodromy determinant drift |det-1| = {abs(det - 1):.2e}")
    return {"matrix": Mr, "det": det, "trace": tr, "trace_inverse": tr_inv,
            "imaginary_residue": imag_peak}


def circle_loop(center: complex, radius: float, n: int = 256, base_angle: float = 0.0):
    th = base_angle + np.linspace(0.0, 2.0 * np.pi, n + 1)
    return [center + radius * cmath.exp(1j * t) for t in th]


# ---------------------------------------------------------------------------
# developed surface patches

def develop_patch(sol: SolutionData, x_range, y_range, nx: int, ny: int,
                  init: FrameState | None = None, step: float = 0.01):
    """Integrate the frame over a rectangle, row by row from its corner.

    Returns dict with arrays f (nx, ny, 3), fz (complex), and the grid;
    feeds the cone constructions with a genuinely immersed patch.
    """
    xs = np.linspace(*x_range, nx)
    ys = np.linspace(*y_range, ny)
    z0 = complex(xs[0], ys[0])
    st0 = init or default_initial_frame(sol, z0)
    F = np.empty((nx, ny, 3))
    FZ = np.empty((nx, ny, 3), dtype=complex)
    col_state = st0
    for j, y in enumerate(ys):
        if j > 0:
            col_state, _ = integrate_path(col_state,
                                          [complex(xs[0], ys[j - 1]), complex(xs[0], y)],
                                          sol, step=step, drift_tol=1e-6)
        row_state = col_state
        F[0, j], FZ[0, j] = row_state.f, row_state.fz
        for i in range(1, nx):
            row_state, _ = integrate_path(row_state,
                                          [complex(xs[i - 1], y), complex(xs[i], y)],
                                          sol, step=step, drift_tol=1e-6)
            F[i, j], FZ[i, j] = row_state.f, row_state.fz
    return {"x": xs, "y": ys, "f": F, "fz": FZ, "solution": sol}


# ---------------------------------------------------------------------------
# parabolic explicit family

def parabolic_explicit_immersion(alpha: float, A, B, xi):
    """Closed-form immersed parabolic affine sphere with U = z^(2 alpha - 3) dz^3.

    Requires det(A, B, xi) = -8 (to 1e-12); returns an evaluator
    f(rho, theta) allowing theta outside [0, 2 pi) (the universal cover;
    the map has nontrivial monodromy around the puncture).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    xi = np.asarray(xi, dtype=float)
    det = float(np.linalg.det(np.stack([A, B, xi], axis=1)))
    if abs(det + 8.0) > 1e-12:
        raise ValueError(f"det(A, B, xi) = {det}, must equal -8")

    def immersion(rho, theta):
        rho = np.asarray(rho, dtype=float)
        theta = np.asarray(theta, dtype=float)
        ra = rho**alpha
        ca, sa = np.cos(alpha * theta), np.sin(alpha * theta)
        c2a = np.cos(2.0 * alpha * theta)
        lr = np.log(rho)
        termA = (ra / (2.0 * alpha)) * (theta * ca - sa / alpha + lr * sa)
        termB = -(ra / (2.0 * alpha)) * ca
        termXi = (rho ** (2.0 * alpha) / alpha**2) * (c2a / (2.0 * alpha) + 1.0 / alpha - lr)
        shape = np.broadcast(rho, theta).shape
        out = (np.multiply.outer(np.broadcast_to(termA, shape), A)
               + np.multiply.outer(np.broadcast_to(termB, shape), B)
               + np.multiply.outer(np.broadcast_to(termXi, shape), xi))
        return out

    return immersion


def parabolic_metric_psi(alpha: float):
    """Conformal factor of the affine metric of the explicit family:
    psi = (2 - 2 alpha) t + log(2 t), t = -log rho (radial solution of the
    parabolic integrability equation for |U| = rho^(2 alpha - 3))."""
    def psi(z):
        t = -np.log(np.abs(z))
        return (2.0 - 2.0 * alpha) * t + np.log(2.0 * t)
    return psi


def parabolic_structure_residual(alpha: float, A, B, xi, samples, h: float = 1e-4) -> dict:
    """Residuals of the parabolic structure equations for the closed form.

    Checks f_zzbar = e^psi xi / 2 and f_zz = psi_z f_z + U e^-psi f_zbar
    with finite-difference derivatives of the closed-form immersion and
    the radial metric factor; also reports the volume-condition deviation
    det(f_z, f_zbar, xi) - i e^psi/2.
    """
    imm = parabolic_explicit_immersion(alpha, A, B, xi)
    xi = np.asarray(xi, dtype=float)

    def f_at(z):
        return imm(np.abs(z), np.angle(z))

    worst_n = 0.0
    worst_t = 0.0
    worst_vol = 0.0
    for z in samples:
        z = complex(z)
        fpx = f_at(z + h); fmx = f_at(z - h)
        fpy = f_at(z + 1j * h); fmy = f_at(z - 1j * h)
        f0 = f_at(z)
        fx = (fpx - fmx) / (2 * h); fy = (fpy - fmy) / (2 * h)
        fxx = (fpx - 2 * f0 + fmx) / h**2
        fyy = (fpy - 2 * f0 + fmy) / h**2
        fxy = (f_at(z + h + 1j * h) - f_at(z + h - 1j * h)
               - f_at(z - h + 1j * h) + f_at(z - h - 1j * h)) / (4 * h**2)
        fz = 0.5 * (fx - 1j * fy)
        fzz = 0.25 * (fxx - fyy - 2j * fxy)
        fzzb = 0.25 * (fxx + fyy)
        t = -math.log(abs(z))
        psi = (2.0 - 2.0 * alpha) * t + math.log(2.0 * t)
        dpsi_dt = (2.0 - 2.0 * alpha) + 1.0 / t
        psi_z = -dpsi_dt / (2.0 * z)
        U = z ** (2.0 * alpha - 3.0)
        res_normal = np.max(np.abs(fzzb - 0.5 * math.exp(psi) * xi))
        res_tang = np.max(np.abs(fzz - psi_z * fz - U * math.exp(-psi) * np.conj(fz)))
        vol = np.linalg.det(np.stack([fz, np.conj(fz), xi.astype(complex)], axis=1))
        worst_vol = max(worst_vol, abs(vol - 0.5j * math.exp(psi)))
        worst_n = max(worst_n, float(res_normal))
        worst_t = max(worst_t, float(res_tang))
    return {"normal_residual": worst_n, "tangential_residual": worst_t,
            "volume_deviation": worst_vol}


def parabolic_monodromy_shift(alpha: float, A, B, xi, rho: float, thetas) -> dict:
    """Change of the closed-form immersion under theta -> theta + 2 pi.

    Reports the max deviation from the formula-predicted shift (rotation
    of the angular harmonics plus the additive pi/alpha * rho^alpha *
    cos-term along A) and, for half-integer alpha, the fitted affine
    deck transformation.
    """
    imm = parabolic_explicit_immersion(alpha, A, B, xi)
    thetas = np.asarray(thetas, dtype=float)
    f0 = imm(rho, thetas)
    f1 = imm(rho, thetas + 2.0 * np.pi)
    ra = rho**alpha
    predicted = f1 - f0
    # direct evaluation of the closed-form difference
    ca2 = np.cos(alpha * (thetas + 2 * np.pi))
    sa2 = np.sin(alpha * (thetas + 2 * np.pi))
    ca, sa = np.cos(alpha * thetas), np.sin(alpha * thetas)
    lr = math.log(rho)
    dA = (ra / (2 * alpha)) * (thetas * (ca2 - ca) + 2 * np.pi * ca2
                               - (sa2 - sa) / alpha + lr * (sa2 - sa))
    dB = -(ra / (2 * alpha)) * (ca2 - ca)
    c2a2 = np.cos(2 * alpha * (thetas + 2 * np.pi))
    c2a = np.cos(2 * alpha * thetas)
    dXi = (rho ** (2 * alpha) / alpha**2) * (c2a2 - c2a) / (2 * alpha)
    formula = (np.multiply.outer(dA, np.asarray(A, dtype=float))
               + np.multiply.outer(dB, np.asarray(B, dtype=float))
               + np.multiply.outer(dXi, np.asarray(xi, dtype=float)))
    defect = float(np.max(np.abs(predicted - formula)))
    additive_term = float(np.max(np.abs((math.pi / alpha) * ra * ca2)))
    return {"shift_max": float(np.max(np.abs(predicted))),
            "formula_defect": defect,
            "additive_A_term_scale": additive_term,
            "nontrivial": bool(np.max(np.abs(predicted)) > 1e-8)}
