"""Analytic fields of rectangular surface electrodes and single-site trap metrics.

Every electrode is a rectangle in the z = 0 plane with the rest of the plane
grounded (gapless-plane approximation). Potentials are in volts, positions in
metres. The ``TrapPotential`` field returns the effective potential per unit
ion charge, i.e. the pseudopotential divided by ``Z e`` plus the DC potential,
so that ``omega^2 = Z e * eig(hessian) / m``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import constants as sc
from scipy import optimize

from .layout import ConfigError, Electrode, RfDrive, TrapLayout
from .species import ELEMENTARY_CHARGE, Species

logger = logging.getLogger(__name__)


class DomainError(ValueError):
    """Evaluation point outside the half space z > 0."""


class SearchError(RuntimeError):
    """Minimum or saddle search failed."""


class NotATrapError(RuntimeError):
    """Hessian at a candidate minimum has a non-positive eigenvalue."""

    def __init__(self, msg, eigenvalues=None):
        super().__init__(msg)
        self.eigenvalues = eigenvalues


# ---------------------------------------------------------------------------
# Single-rectangle basis
# ---------------------------------------------------------------------------

def _check_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    if np.any(p[..., 2] <= 0):
        raise DomainError("rectangle potential is only defined for z > 0")
    return p


def _corner_sum(corners: np.ndarray, pts: np.ndarray, order: int):
    """Unit-voltage potential (and derivatives) of each rectangle at each point.

    ``corners`` is (n, 4) of ``xa, ya, xb, yb``; ``pts`` is (M, 3). Returns
    arrays shaped (n, M), (n, M, 3), (n, M, 3, 3) up to ``order``.
    """
    n, m = corners.shape[0], pts.shape[0]
    x, y, z = (pts[None, :, k] for k in range(3))
    phi = np.zeros((n, m))
    grad = np.zeros((n, m, 3)) if order >= 1 else None
    hess = np.zeros((n, m, 3, 3)) if order >= 2 else None
    z2 = z * z
    for cx, cy, sign in ((2, 3, 1.0), (0, 3, -1.0), (2, 1, -1.0), (0, 1, 1.0)):
        X = corners[:, cx, None] - x
        Y = corners[:, cy, None] - y
        R2 = z2 + X * X + Y * Y
        R = np.sqrt(R2)
        phi += sign * np.arctan(X * Y / (z * R))
        if order < 1:
            continue
        A = z2 + X * X
        B = z2 + Y * Y
        grad[..., 0] += sign * (-z * Y / (R * A))
        grad[..., 1] += sign * (-z * X / (R * B))
        grad[..., 2] += sign * (-X * Y * (R2 + z2) / (R * A * B))
        if order < 2:
            continue
        R3 = R2 * R
        gxx = -z * X * Y * (1.0 / (R3 * A) + 2.0 / (R * A * A))
        gyy = -z * X * Y * (1.0 / (R3 * B) + 2.0 / (R * B * B))
        gxy = z / R3
        gxz = -Y * ((R2 - z2) / (R3 * A) - 2.0 * z2 / (R * A * A))
        gyz = -X * ((R2 - z2) / (R3 * B) - 2.0 * z2 / (R * B * B))
        gzz = -(gxx + gyy)
        hess[..., 0, 0] += sign * gxx
        hess[..., 1, 1] += sign * gyy
        hess[..., 2, 2] += sign * gzz
        hess[..., 0, 1] += sign * gxy
        hess[..., 0, 2] += sign * gxz
        hess[..., 1, 2] += sign * gyz
    scale = 1.0 / (2.0 * np.pi)
    phi *= scale
    if grad is not None:
        grad *= scale
    if hess is not None:
        hess *= scale
        hess[..., 1, 0] = hess[..., 0, 1]
        hess[..., 2, 0] = hess[..., 0, 2]
        hess[..., 2, 1] = hess[..., 1, 2]
    return phi, grad, hess


def electrode_basis(corners: np.ndarray, points, order: int = 0):
    """Unit-voltage basis for many rectangles at many points (see ``_corner_sum``)."""
    pts = _check_points(points).reshape(-1, 3)
    corners = np.asarray(corners, dtype=float).reshape(-1, 4)
    return _corner_sum(corners, pts, order)


def _corners_of(e: Electrode) -> np.ndarray:
    return np.array([[*e.corner_a, *e.corner_b]])


def rect_potential(e: Electrode, v: float, p) -> float:
    """Potential of electrode ``e`` held at ``v`` volts, evaluated at point ``p``."""
    phi, _, _ = electrode_basis(_corners_of(e), p, 0)
    return float(v * phi[0, 0])


def rect_gradient(e: Electrode, v: float, p) -> np.ndarray:
    _, g, _ = electrode_basis(_corners_of(e), p, 1)
    return v * g[0, 0]


def rect_hessian(e: Electrode, v: float, p) -> np.ndarray:
    _, _, h = electrode_basis(_corners_of(e), p, 2)
    return v * h[0, 0]


# ---------------------------------------------------------------------------
# Superposition
# ---------------------------------------------------------------------------

def total_static_potential(layout: TrapLayout, dc_voltages, p) -> float:
    """Sum of the DC electrode potentials at ``p``."""
    v = layout.dc_vector(dc_voltages)
    if layout.n_dc == 0:
        _check_points(p)
        return 0.0
    phi, _, _ = electrode_basis(layout.corners(layout.dc_electrodes), p, 0)
    return float(v @ phi[:, 0])


def rf_instantaneous_potential(layout: TrapLayout, drive: RfDrive | None, t: float, p) -> float:
    """RF potential at time ``t``: RF+ at ``+v_rf cos(Omega t)``, RF- with a pi phase delay."""
    drive = drive or layout.drive
    if not layout.rf_electrodes:
        _check_points(p)
        return 0.0
    amps = layout.rf_amplitudes(drive)
    phi, _, _ = electrode_basis(layout.corners(layout.rf_electrodes), p, 0)
    return float(np.cos(drive.omega_rf * t) * (amps @ phi[:, 0]))


def pseudopotential(layout: TrapLayout, drive: RfDrive | None, sp: Species, p) -> float:
    """Ponderomotive potential energy ``Z^2 e^2 |grad phi_RF|^2 / (4 m Omega^2)`` in eV."""
    drive = drive or layout.drive
    if not layout.rf_electrodes:
        _check_points(p)
        return 0.0
    amps = layout.rf_amplitudes(drive)
    _, g, _ = electrode_basis(layout.corners(layout.rf_electrodes), p, 1)
    e_field = np.einsum("n,nk->k", amps, g[:, 0])
    return float(sp.charge_number ** 2 * ELEMENTARY_CHARGE * (e_field @ e_field)
                 / (4.0 * sp.mass * drive.omega_rf ** 2))


def richardson_hessian(grad_fn, p, h: float | None = None, vectorized: bool = True) -> np.ndarray:
    """Hessian from Richardson-extrapolated central differences of an analytic gradient.

    With ``vectorized`` all twelve probe points go to ``grad_fn`` in one (12, 3) call.
    """
    p = np.asarray(p, dtype=float)
    if h is None:
        h = max(1e-9, 1e-6 * abs(p[2]))
    n = p.size
    steps = np.array([h, h / 2])
    offsets = np.concatenate([s * np.eye(n) for s in steps] + [-s * np.eye(n) for s in steps])
    pts = p + offsets
    if vectorized:
        g = np.asarray(grad_fn(pts)).reshape(len(pts), n)
    else:
        g = np.array([grad_fn(q) for q in pts])
    plus, minus = g[:2 * n].reshape(2, n, n), g[2 * n:].reshape(2, n, n)
    # central[k][j, i] = d g_i / d x_j at step k
    central = (plus - minus) / (2 * steps[:, None, None])
    hess = ((4.0 * central[1] - central[0]) / 3.0).T
    return 0.5 * (hess + hess.T)


class TrapPotential:
    """Time-averaged potential of a layout for one species.

    ``potential`` returns volts per unit ion charge (pseudopotential / Ze plus
    the DC superposition); multiply by ``Z`` for electron-volts.
    """

    def __init__(self, layout: TrapLayout, species: Species, dc_voltages=None,
                 drive: RfDrive | None = None):
        self.layout = layout
        self.species = species
        self.drive = drive or layout.drive
        self.dc = layout.dc_vector(dc_voltages)
        self._rf_corners = layout.corners(layout.rf_electrodes)
        self._dc_corners = layout.corners(layout.dc_electrodes)
        if len(self._rf_corners):
            if self.drive is None:
                raise ConfigError("RF electrodes present but no RF drive given")
            self._rf_amps = layout.rf_amplitudes(self.drive)
            # pseudopotential prefactor in volts per (V/m)^2
            self._pp = species.charge_number * ELEMENTARY_CHARGE / (4.0 * species.mass * self.drive.omega_rf ** 2)
        else:
            self._rf_amps = np.zeros(0)
            self._pp = 0.0

    def with_voltages(self, dc_voltages) -> "TrapPotential":
        return TrapPotential(self.layout, self.species, dc_voltages, self.drive)

    @property
    def charge_number(self) -> int:
        return self.species.charge_number

    def _rf_field(self, pts, order):
        if not len(self._rf_corners):
            m = pts.shape[0]
            return np.zeros((m, 3)), np.zeros((m, 3, 3))
        _, g, h = _corner_sum(self._rf_corners, pts, order)
        e = np.einsum("n,nmk->mk", self._rf_amps, g)
        he = np.einsum("n,nmkl->mkl", self._rf_amps, h) if h is not None else None
        return e, he

    def _dc_part(self, pts, order):
        m = pts.shape[0]
        if not len(self._dc_corners):
            return np.zeros(m), np.zeros((m, 3))
        phi, g, _ = _corner_sum(self._dc_corners, pts, order)
        return self.dc @ phi, (np.einsum("n,nmk->mk", self.dc, g) if g is not None else None)

    def potential(self, p) -> np.ndarray | float:
        p = _check_points(p)
        pts = p.reshape(-1, 3)
        e, _ = self._rf_field(pts, 1)
        dc, _ = self._dc_part(pts, 0)
        out = self._pp * np.einsum("mk,mk->m", e, e) + dc
        return float(out[0]) if p.ndim == 1 else out.reshape(p.shape[:-1])

    def pseudo(self, p) -> np.ndarray | float:
        """Pseudopotential part only, volts per unit charge."""
        p = _check_points(p)
        e, _ = self._rf_field(p.reshape(-1, 3), 1)
        out = self._pp * np.einsum("mk,mk->m", e, e)
        return float(out[0]) if p.ndim == 1 else out.reshape(p.shape[:-1])

    def gradient(self, p) -> np.ndarray:
        p = _check_points(p)
        pts = p.reshape(-1, 3)
        e, he = self._rf_field(pts, 2)
        _, gdc = self._dc_part(pts, 1)
        g = 2.0 * self._pp * np.einsum("mkl,ml->mk", he, e) + gdc
        return g[0] if p.ndim == 1 else g.reshape(p.shape)

    def hessian(self, p) -> np.ndarray:
        return richardson_hessian(self.gradient, p)

    def energy_ev(self, p):
        return self.charge_number * self.potential(p)


# ---------------------------------------------------------------------------
# Minima, secular frequencies, depth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SecularTriple:
    omega: np.ndarray  # rad/s, ordered like the columns of principal_axes
    principal_axes: np.ndarray  # columns are unit eigenvectors
    minimum: np.ndarray

    def __post_init__(self):
        if np.any(self.omega <= 0):
            raise NotATrapError("secular frequencies must be positive", self.omega)

    @property
    def freq_hz(self) -> np.ndarray:
        return self.omega / (2 * np.pi)

    def lab_ordered(self) -> "SecularTriple":
        """Reorder axes so column k is the principal axis closest to lab axis k."""
        order = lab_axis_order(self.principal_axes)
        axes = self.principal_axes[:, order]
        axes = axes * np.sign(np.diag(axes))[None, :]
        return SecularTriple(self.omega[order], axes, self.minimum)

    @property
    def stiffness_unit(self) -> np.ndarray:
        """``P diag(omega^2) P^T``; multiply by mass for a stiffness matrix."""
        return self.principal_axes @ np.diag(self.omega ** 2) @ self.principal_axes.T


def lab_axis_order(axes: np.ndarray) -> list[int]:
    """Permutation assigning each lab axis the principal vector most aligned with it."""
    from itertools import permutations
    best, best_score = None, -1.0
    for perm in permutations(range(3)):
        score = sum(abs(axes[k, perm[k]]) for k in range(3))
        if score > best_score:
            best, best_score = list(perm), score
    return best


@dataclass
class MinimumResult:
    point: np.ndarray
    hessian: np.ndarray
    iterations: int
    gradient_norm: float


def find_minimum(field, guess, max_iter: int = 100, rtol: float = 1e-12) -> MinimumResult:
    """Damped Newton search for a local minimum of ``field.potential``.

    ``field`` needs ``potential``, ``gradient`` and ``hessian``. Newton steps
    are backtracked on the potential; when the Hessian is indefinite a
    trust-limited gradient step is taken instead. Converges when the gradient
    norm is below ``rtol`` times the curvature scale ``|H| * |z|``.
    """
    x = np.asarray(guess, dtype=float).copy()
    if x[2] <= 0:
        raise DomainError("guess must lie above the electrode plane")
    trust = max(0.25 * x[2], 1e-7)
    u = field.potential(x)
    g = field.gradient(x)
    h = field.hessian(x)
    for it in range(1, max_iter + 1):
        scale = np.linalg.norm(h, 2) * max(abs(x[2]), 1e-6)
        gnorm = np.linalg.norm(g)
        if gnorm <= rtol * scale:
            break
        w, v = np.linalg.eigh(h)
        if w[0] > 0:
            step = -v @ ((v.T @ g) / w)
        else:
            # escape along negative curvature / steepest descent
            step = -g / (np.abs(w).max() + 1e-300)
            if w[0] < 0:
                d = v[:, 0] * (-np.sign(v[:, 0] @ g) or 1.0)
                step = step + d * trust * 0.5
        sn = np.linalg.norm(step)
        if sn > trust:
            step *= trust / sn
            sn = trust
        accepted = False
        for _ in range(40):
            trial = x + step
            if trial[2] > 0:
                ut = field.potential(trial)
                if ut <= u + 1e-4 * (g @ step) or sn < 1e-16 * max(abs(x[2]), 1e-6):
                    accepted = True
                    break
            step *= 0.5
            sn *= 0.5
        if not accepted:
            raise SearchError(f"line search failed at iteration {it}, x={x}")
        x, u = trial, ut
        g = field.gradient(x)
        h = field.hessian(x)
        if sn < 1e-17:
            break
    else:
        raise SearchError(f"minimum search did not converge after {max_iter} iterations (|grad|={gnorm:.3g})")
    w = np.linalg.eigvalsh(h)
    if w[0] <= 0:
        raise NotATrapError(f"stationary point at {x} has an indefinite Hessian", w)
    return MinimumResult(x, h, it, float(np.linalg.norm(g)))


def secular_frequencies(field, minimum, sp: Species, hessian=None) -> SecularTriple:
    """Secular angular frequencies from the Hessian eigensystem at ``minimum``."""
    point = minimum.point if isinstance(minimum, MinimumResult) else np.asarray(minimum, dtype=float)
    h = hessian if hessian is not None else field.hessian(point)
    h = 0.5 * (h + h.T)
    lam, vec = np.linalg.eigh(h)
    if lam[0] <= 0:
        raise NotATrapError(f"escape direction at {point}: eigenvalues {lam}", lam)
    omega = np.sqrt(sp.charge * lam / sp.mass)
    return SecularTriple(omega, vec, point.copy()).lab_ordered()


@dataclass
class DepthResult:
    depth_mev: float
    axial_barrier_mev: float
    vertical_barrier_mev: float
    saddle: np.ndarray
    bounded_by_box: bool = False


def _relaxed_profile(field, start, axis, coords, free, box):
    """Potential minimised over the ``free`` coordinates along a line in ``axis``.

    The relaxation runs in units of ``box`` (half-width of the search window
    around ``start``) so the optimiser sees O(1) variables.
    """
    vals, pts = [], []
    x0 = np.asarray(start, dtype=float).copy()
    centre = x0[free].copy()
    bounds = [(-1.0, 1.0)] * len(free)
    for c in coords:
        x0[axis] = c

        def f(q, x0=x0):
            p = x0.copy()
            p[free] = centre + q * box
            if p[2] <= 0:
                return 1e3, np.zeros(len(free))
            return field.potential(p), field.gradient(p)[free] * box

        q0 = (x0[free] - centre) / box
        res = optimize.minimize(f, q0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": 1e-14})
        x0[free] = centre + res.x * box
        vals.append(float(res.fun))
        pts.append(x0.copy())
    return np.array(vals), np.array(pts)


def _profile_max(field, start, axis, coords, free, box):
    vals, pts = _relaxed_profile(field, start, axis, coords, free, box)
    k = int(np.argmax(vals))
    at_edge = k == len(vals) - 1
    if 0 < k < len(vals) - 1:
        lo, hi = sorted((coords[k - 1], coords[k + 1]))
        res = optimize.minimize_scalar(
            lambda c: -_relaxed_profile(field, pts[k], axis, [c], free, box)[0][0],
            bounds=(lo, hi), method="bounded", options={"xatol": 1e-6 * abs(hi - lo)})
        val, pt = _relaxed_profile(field, pts[k], axis, [res.x], free, box)
        return float(val[0]), pt[0], at_edge
    return float(vals[k]), pts[k], at_edge


def trap_depth(field, minimum, neighbor=None, z_max: float | None = None, n_samples: int = 41,
               charge_number: int | None = None) -> DepthResult:
    """Escape barrier in meV: the lower of the inter-well saddle and the vertical escape.

    ``neighbor`` is an optional point (e.g. the next well's minimum) towards
    which the axial barrier is scanned with y, z relaxed. The vertical escape
    is scanned up to ``z_max`` (default 6x the height) with x, y relaxed. If a
    profile has no interior maximum the box-edge value bounds the depth.
    """
    point = minimum.point if isinstance(minimum, MinimumResult) else np.asarray(minimum, dtype=float)
    zq = charge_number if charge_number is not None else getattr(field, "charge_number", 1)
    u0 = field.potential(point)
    h0 = point[2]

    zs = np.linspace(point[2], z_max or 6.0 * h0, n_samples)
    vmax, saddle_v, edge_v = _profile_max(field, point, 2, zs, [0, 1], 0.5 * h0)
    vert = (vmax - u0) * zq * 1e3
    barriers, saddles, edges = [vert], [saddle_v], [edge_v]

    axial = np.inf
    if neighbor is not None:
        nb = np.asarray(neighbor, dtype=float)
        xs = np.linspace(point[0], nb[0], n_samples)
        vmax, saddle_a, edge_a = _profile_max(field, point, 0, xs, [1, 2], 0.5 * h0)
        axial = (vmax - u0) * zq * 1e3
        barriers.append(axial)
        saddles.append(saddle_a)
        edges.append(edge_a)

    i = int(np.argmin(barriers))
    if edges[i]:
        logger.warning("no interior saddle found; depth bounded by search-box edge")
    return DepthResult(float(barriers[i]), float(axial), float(vert), saddles[i], bool(edges[i]))


def stability_q(omega_sec: float, drive: RfDrive | float) -> tuple[float, bool]:
    """Lowest-order Mathieu parameter ``q = 2 sqrt(2) omega / Omega`` and ``q < 0.908``."""
    omega_rf = drive.omega_rf if isinstance(drive, RfDrive) else float(drive)
    q = 2.0 * np.sqrt(2.0) * omega_sec / omega_rf
    return float(q), bool(q < 0.908)


# Background-gas defaults reproducing a ~36 min lifetime at 300 K.
UHV_PRESSURE = 7.5e-10  # Pa
H2_CROSS_SECTION = 1.0e-18  # m^2
H2_MASS = 2.01588 * sc.atomic_mass


def lifetime_estimate(pressure: float = UHV_PRESSURE, temperature: float = 300.0,
                      cross_section: float = H2_CROSS_SECTION, bg_mass: float = H2_MASS) -> float:
    """Mean time (s) between background-gas collisions, ``kT ln2/(P sigma) sqrt(pi m / 8kT)``."""
    for name, val in (("pressure", pressure), ("temperature", temperature),
                      ("cross_section", cross_section), ("bg_mass", bg_mass)):
        if not val > 0:
            raise ValueError(f"{name} must be positive")
    kt = sc.k * temperature
    return kt * np.log(2.0) / (pressure * cross_section) * np.sqrt(np.pi * bg_mass / (8.0 * kt))


# ---------------------------------------------------------------------------
# Anharmonic expansion
# ---------------------------------------------------------------------------

@dataclass
class AnharmonicFit:
    kappa: np.ndarray  # kappa_2, kappa_3, kappa_4 in V/m^n
    lambda3: float | None  # m; None when kappa_3 vanishes
    lambda4: float | None
    char_length: float  # l, m
    alpha: float
    residual: float  # max fit residual relative to kappa_2 * window^2

    @property
    def kappa2(self) -> float:
        return float(self.kappa[0])

    @property
    def kappa4(self) -> float:
        return float(self.kappa[2])


def characteristic_length(kappa2: float, charge_number: int = 1) -> float:
    """``l = (Z e / (8 pi eps0 kappa_2))^(1/3)``."""
    return float((charge_number * ELEMENTARY_CHARGE / (8 * np.pi * sc.epsilon_0 * kappa2)) ** (1 / 3))


def anharmonicity_scale(kappa_n: float, kappa2: float, n: int) -> float | None:
    """``lambda_n = |kappa_n/kappa_2|^(1/(2-n))``; None when ``kappa_n`` is zero."""
    if kappa_n == 0:
        return None
    return float(abs(kappa_n / kappa2) ** (1.0 / (2 - n)))


def fit_polynomial_profile(dx, u, kappa_ref=None, charge_number: int = 1,
                           kappa2_ref: float | None = None) -> AnharmonicFit:
    """Degree-4 least squares fit of a 1D profile ``u(dx)`` (volts) about the minimum."""
    dx = np.asarray(dx, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.max(np.abs(dx))
    s = dx / w
    vander = np.vander(s, 5, increasing=True)
    cond = np.linalg.cond(vander)
    if not np.isfinite(cond) or cond > 1e8:
        raise SearchError(f"ill-conditioned anharmonic fit (cond={cond:.3g}, {dx.size} samples)")
    coef, *_ = np.linalg.lstsq(vander, u, rcond=None)
    kappa = coef[2:] / w ** np.arange(2, 5)
    # exact zeros for symmetric / pure-quadratic inputs
    kappa[np.abs(coef[2:]) < 1e-13 * abs(coef[2])] = 0.0
    k2 = float(kappa[0])
    if k2 <= 0:
        raise NotATrapError("fitted quadratic coefficient is not positive", kappa)
    resid = float(np.max(np.abs(vander @ coef - u)) / (abs(coef[2]) + 1e-300))
    k2o = kappa2_ref if kappa2_ref is not None else k2
    length = characteristic_length(k2o, charge_number)
    alpha = length ** 2 * kappa[2] * k2o / k2 ** 2
    return AnharmonicFit(kappa, anharmonicity_scale(kappa[1], k2, 3), anharmonicity_scale(kappa[2], k2, 4),
                         length, float(alpha), resid)


def anharmonic_fit(field, minimum, window: float = 1e-6, direction=None, n_samples: int = 41,
                   charge_number: int | None = None, kappa2_ref: float | None = None) -> AnharmonicFit:
    """Fit ``U(dx) = sum kappa_n dx^n`` along ``direction`` (default lab x) through ``minimum``."""
    point = minimum.point if isinstance(minimum, MinimumResult) else np.asarray(minimum, dtype=float)
    d = np.array([1.0, 0.0, 0.0]) if direction is None else np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    zq = charge_number if charge_number is not None else getattr(field, "charge_number", 1)
    # Chebyshev nodes keep the Vandermonde system well conditioned
    s = np.cos(np.pi * (np.arange(n_samples) + 0.5) / n_samples)
    dx = window * s
    u = np.array([field.potential(point + t * d) for t in dx])
    return fit_polynomial_profile(dx, u - field.potential(point), charge_number=zq, kappa2_ref=kappa2_ref)
