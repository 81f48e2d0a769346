import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import dblquad

from iontrap.electrode_field import (DomainError, NotATrapError, SearchError, TrapPotential, anharmonic_fit,
                                     find_minimum, fit_polynomial_profile, lifetime_estimate, pseudopotential,
                                     rect_gradient, rect_hessian, rect_potential, rf_instantaneous_potential,
                                     richardson_hessian, secular_frequencies, stability_q, total_static_potential,
                                     trap_depth)
from iontrap.layout import ConfigError, Electrode, RfDrive, Role, TrapLayout
from iontrap.species import BE9, CA40

UM = 1e-6

coord = st.floats(-40, 40)
size = st.floats(2, 30)
height = st.floats(1.5, 60)


@st.composite
def rect_and_point(draw):
    xa, ya, w, h = draw(coord), draw(coord), draw(size), draw(size)
    e = Electrode((xa * UM, ya * UM), ((xa + w) * UM, (ya + h) * UM), Role.DC_CENTRAL, "e")
    p = np.array([draw(st.floats(-60, 60)), draw(st.floats(-60, 60)), draw(height)]) * UM
    return e, p


class QuadraticField:
    """Synthetic harmonic bowl ``0.5 (x-c)^T K (x-c) + b.x`` in volts."""

    def __init__(self, k, c, bias=(0, 0, 0)):
        self.k, self.c, self.b = np.asarray(k, float), np.asarray(c, float), np.asarray(bias, float)
        self.charge_number = 1

    def potential(self, p):
        d = np.asarray(p) - self.c
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.k, d) + np.asarray(p) @ self.b

    def gradient(self, p):
        return (np.asarray(p) - self.c) @ self.k + self.b

    def hessian(self, p):
        return self.k.copy()


# --- rectangle potential -----------------------------------------------------

def test_rect_potential_matches_frozen_quadrature(oracles):
    for case in oracles["rectangle_potential"]:
        xa, ya, xb, yb = np.array(case["corners_um"]) * UM
        e = Electrode((xa, ya), (xb, yb), Role.DC_CENTRAL, "e")
        got = rect_potential(e, 1.0, np.array(case["point_um"]) * UM)
        assert got == pytest.approx(case["phi_per_volt"], rel=1e-9)


@settings(max_examples=8)
@given(rect_and_point())
def test_rect_potential_matches_live_quadrature(rp):
    e, p = rp
    (xa, ya), (xb, yb) = np.array(e.corner_a) / UM, np.array(e.corner_b) / UM
    x, y, z = p / UM
    ref, _ = dblquad(lambda v, u: z / (2 * np.pi * ((x - u) ** 2 + (y - v) ** 2 + z ** 2) ** 1.5),
                     xa, xb, ya, yb, epsabs=0, epsrel=1e-12)
    assert rect_potential(e, 1.0, p) == pytest.approx(ref, rel=1e-9)


def test_rect_potential_zero_voltage_and_surface_limit():
    e = Electrode((0, 0), (10 * UM, 10 * UM), Role.DC_CENTRAL, "e")
    assert rect_potential(e, 0.0, [1 * UM, 2 * UM, 3 * UM]) == 0.0
    assert rect_potential(e, 2.5, [5 * UM, 5 * UM, 1e-12]) == pytest.approx(2.5, rel=1e-6)


@pytest.mark.parametrize("z", [0.0, -1e-6])
def test_rect_potential_domain(z):
    e = Electrode((0, 0), (1e-5, 1e-5), Role.DC_CENTRAL, "e")
    with pytest.raises(DomainError):
        rect_potential(e, 1.0, [0, 0, z])


@given(rect_and_point())
def test_gradient_matches_central_differences(rp):
    e, p = rp
    h = 1e-4 * p[2]
    fd = np.array([(rect_potential(e, 1, p + h * d) - rect_potential(e, 1, p - h * d)) / (2 * h)
                   for d in np.eye(3)])
    g = rect_gradient(e, 1.0, p)
    assert np.allclose(g, fd, rtol=1e-7, atol=1e-7 * np.abs(g).max())


@given(rect_and_point())
def test_laplace_property(rp):
    e, p = rp
    h = 1e-3 * p[2]
    # divergence of the analytic gradient, fourth-order central stencil
    lap = sum((-rect_gradient(e, 1, p + 2 * h * d)[k] + 8 * rect_gradient(e, 1, p + h * d)[k]
               - 8 * rect_gradient(e, 1, p - h * d)[k] + rect_gradient(e, 1, p - 2 * h * d)[k]) / (12 * h)
              for k, d in enumerate(np.eye(3)))
    scale = max(abs(np.diag(rect_hessian(e, 1, p))).max(), 1e-300)
    assert abs(lap) < 1e-5 * scale
    assert abs(np.trace(rect_hessian(e, 1, p))) < 1e-6 * scale


@given(rect_and_point())
def test_richardson_hessian_matches_analytic(rp):
    e, p = rp
    ana = rect_hessian(e, 1.0, p)
    num = richardson_hessian(lambda q: np.array([rect_gradient(e, 1.0, x) for x in np.atleast_2d(q)]), p)
    assert np.allclose(num, ana, rtol=1e-6, atol=1e-6 * np.abs(ana).max())
    assert np.array_equal(num, num.T)


def test_five_point_hessian_oracle():
    e = Electrode((-5 * UM, -3 * UM), (7 * UM, 4 * UM), Role.DC_CENTRAL, "e")
    p = np.array([2 * UM, -1 * UM, 12 * UM])
    h = 0.02 * UM
    fd = np.empty((3, 3))
    for i, d in enumerate(np.eye(3)):
        g = [rect_gradient(e, 1, p + k * h * d) for k in (-2, -1, 1, 2)]
        fd[i] = (g[0] - 8 * g[1] + 8 * g[2] - g[3]) / (12 * h)
    assert np.allclose(rect_hessian(e, 1, p), fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())


def test_scale_invariance_of_unit_potential():
    e = Electrode((0, 0), (10 * UM, 6 * UM), Role.DC_CENTRAL, "e")
    e2 = Electrode((0, 0), (30 * UM, 18 * UM), Role.DC_CENTRAL, "e")
    p = np.array([3, 4, 7]) * UM
    assert rect_potential(e, 1, p) == pytest.approx(rect_potential(e2, 1, 3 * p), rel=1e-13)


# --- superposition and layouts ----------------------------------------------

def test_total_static_single_and_pair(ca_layout):
    p = np.array([1 * UM, 2 * UM, 20 * UM])
    n = ca_layout.n_dc
    assert total_static_potential(ca_layout, np.zeros(n), p) == 0.0
    v = np.zeros(n)
    v[3] = 1.0
    assert total_static_potential(ca_layout, v, p) == pytest.approx(rect_potential(ca_layout.dc_electrodes[3], 1, p),
                                                                    rel=1e-14)
    v[7] = 2.0
    both = rect_potential(ca_layout.dc_electrodes[3], 1, p) + rect_potential(ca_layout.dc_electrodes[7], 2, p)
    assert total_static_potential(ca_layout, v, p) == pytest.approx(both, rel=1e-14)


def test_total_static_length_mismatch(ca_layout):
    with pytest.raises(ConfigError):
        total_static_potential(ca_layout, [1.0, 2.0], [0, 0, 1e-5])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.integers(0, 10_000))
def test_superposition(ca_layout, ab, seed):
    lay = ca_layout
    rng = np.random.default_rng(seed)
    v1, v2 = rng.uniform(-6, 6, (2, lay.n_dc))
    p = np.array([*rng.uniform(-50, 50, 2), rng.uniform(5, 60)]) * UM
    a, b = ab
    lhs = total_static_potential(lay, a * v1 + b * v2, p)
    rhs = a * total_static_potential(lay, v1, p) + b * total_static_potential(lay, v2, p)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12 * (abs(a) + abs(b)) * 6)


@given(st.floats(-150, 150), st.floats(-30, 30), st.floats(3, 60))
def test_mirror_symmetry(ca_layout, x, y, z):
    f = TrapPotential(ca_layout, CA40)
    p, q = np.array([x, y, z]) * UM, np.array([-x, y, z]) * UM
    assert f.potential(p) == pytest.approx(f.potential(q), rel=1e-12, abs=1e-15)


def test_rf_instantaneous_phases(ca_layout):
    p = np.array([0.0, 2 * UM, 20 * UM])
    d = ca_layout.drive
    v0 = rf_instantaneous_potential(ca_layout, d, 0.0, p)
    assert rf_instantaneous_potential(ca_layout, d, np.pi / (2 * d.omega_rf), p) == pytest.approx(0, abs=1e-12 * abs(v0))
    assert rf_instantaneous_potential(ca_layout, d, np.pi / d.omega_rf, p) == pytest.approx(-v0, rel=1e-12)
    static = sum(d.amplitude(e.role) * rect_potential(e, 1, p) for e in ca_layout.rf_electrodes)
    assert v0 == pytest.approx(static, rel=1e-12)


def test_pseudopotential_scalings(ca_layout):
    p = np.array([3 * UM, 1 * UM, 25 * UM])
    d = ca_layout.drive
    base = pseudopotential(ca_layout, d, CA40, p)
    assert base > 0
    assert pseudopotential(ca_layout, RfDrive(2 * d.v_rf, d.omega_rf), CA40, p) == pytest.approx(4 * base, rel=1e-12)
    assert pseudopotential(ca_layout, d.scaled(3.0), CA40, p) == pytest.approx(base, rel=1e-12)


def test_pseudopotential_linear_quadrupole_closed_form():
    # one huge RF+ plate: field at the centre is uniform along z, |E| = known from the corner formula
    e = Electrode((-1.0, -1.0), (1.0, 1.0), Role.RF_PLUS, "rf")
    lay = TrapLayout([e], RfDrive(10.0, 2 * np.pi * 50e6))
    p = np.array([0.0, 0.0, 1e-3])
    g = 10.0 * rect_gradient(e, 1.0, p)
    expected = CA40.charge_number ** 2 * 1.602176634e-19 * (g @ g) / (4 * CA40.mass * (2 * np.pi * 50e6) ** 2)
    assert pseudopotential(lay, lay.drive, CA40, p) == pytest.approx(expected, rel=1e-12)


# --- minima and secular frequencies -------------------------------------------

def test_find_minimum_synthetic_bowl_and_bias():
    k = np.diag([2.0, 3.0, 5.0]) * 1e8
    c = np.array([1e-6, -2e-6, 20e-6])
    m = find_minimum(QuadraticField(k, c), c + [3e-7, 2e-7, -1e-6])
    assert np.allclose(m.point, c, atol=1e-15)
    bias = np.array([10.0, -20.0, 30.0])
    m2 = find_minimum(QuadraticField(k, c, bias), c)
    assert np.allclose(m2.point, c - np.linalg.solve(k, bias), rtol=1e-12)


def test_find_minimum_reports_saddle():
    k = np.diag([1.0, 1.0, -1.0]) * 1e8
    with pytest.raises((NotATrapError, SearchError)):
        find_minimum(QuadraticField(k, [0, 0, 2e-5]), [0, 0, 2.1e-5], max_iter=30)


def test_secular_frequencies_closed_form():
    a, c = 3e7, 1e8
    k = np.diag([2 * a, 2 * a, -4 * a + 2 * c])
    f = QuadraticField(k, [0, 0, 2e-5])
    tri = secular_frequencies(f, np.array([0, 0, 2e-5]), CA40)
    expected = np.sqrt(CA40.charge * np.diag(k) / CA40.mass)
    assert np.allclose(tri.omega, expected, rtol=1e-14)
    assert np.allclose(tri.principal_axes.T @ tri.principal_axes, np.eye(3), atol=1e-10)


def test_secular_frequencies_rejects_escape_direction():
    f = QuadraticField(np.diag([1.0, 1.0, -1.0]), [0, 0, 1e-5])
    with pytest.raises(NotATrapError):
        secular_frequencies(f, np.array([0, 0, 1e-5]), CA40)


def test_example_layout_well_height_and_ordering(ca_layout):
    f = TrapPotential(ca_layout, CA40)
    m = find_minimum(f, [0.5 * 28e-6, 0, 20e-6])
    assert 15e-6 < m.point[2] < 25e-6
    tri = secular_frequencies(f, m, CA40)
    fx, fy, fz = tri.freq_hz
    assert fx < fy < fz
    # ordering and order of magnitude of (10.44, 17.9, 28.34) MHz
    assert np.allclose(tri.freq_hz / 1e6, [10.44, 17.9, 28.34], rtol=0.15)


def test_trap_depth_synthetic_quartic_double_well():
    class DoubleWell:
        charge_number = 1
        a, b = 1e-2, 4e-6  # U = a((x/b)^2 - 1)^2 + stiff y, z bowl

        def potential(self, p):
            p = np.asarray(p)
            return self.a * ((p[..., 0] / self.b) ** 2 - 1) ** 2 + 1e8 * (p[..., 1] ** 2 + (p[..., 2] - 2e-5) ** 2)

        def gradient(self, p):
            x, y, z = np.asarray(p)
            return np.array([4 * self.a * ((x / self.b) ** 2 - 1) * x / self.b ** 2, 2e8 * y, 2e8 * (z - 2e-5)])

    f = DoubleWell()
    d = trap_depth(f, np.array([-4e-6, 0, 2e-5]), neighbor=np.array([4e-6, 0, 2e-5]), z_max=2.2e-5, n_samples=81)
    assert d.axial_barrier_mev == pytest.approx(1e3 * f.a, rel=1e-6)


def test_trap_depth_example_layout(ca_layout):
    f = TrapPotential(ca_layout, CA40)
    m5, m6 = (find_minimum(f, [x, 0, 20e-6]) for x in (-14e-6, 14e-6))
    d = trap_depth(f, m5, neighbor=m6.point)
    assert 60 <= d.depth_mev <= 100


def test_stability_q():
    omega_rf = 2 * np.pi * 110e6
    q, ok = stability_q(omega_rf / (2 * np.sqrt(2)) * 0.908, omega_rf)
    assert q == pytest.approx(0.908) and not ok
    q, ok = stability_q(2 * np.pi * 28.34e6, omega_rf)
    assert q == pytest.approx(0.7288, abs=1e-3) and ok
    assert stability_q(1e-3, omega_rf) == pytest.approx((2 * np.sqrt(2) * 1e-3 / omega_rf, True))


def test_lifetime_estimate():
    tau = lifetime_estimate()
    assert tau / 60 == pytest.approx(36, rel=0.05)
    assert lifetime_estimate(pressure=2 * 7.5e-10) == pytest.approx(tau / 2, rel=1e-12)
    assert lifetime_estimate(temperature=1200.0) == pytest.approx(2 * tau, rel=1e-12)
    with pytest.raises(ValueError):
        lifetime_estimate(pressure=0.0)


# --- anharmonic fit -------------------------------------------------------------

def test_fit_pure_quadratic():
    dx = np.linspace(-1e-6, 1e-6, 41)
    fit = fit_polynomial_profile(dx, 3e8 * dx ** 2)
    assert fit.kappa2 == pytest.approx(3e8, rel=1e-12)
    assert fit.kappa[1] == 0 and fit.kappa[2] == 0
    assert fit.lambda3 is None and fit.lambda4 is None


@given(st.floats(1e7, 1e10), st.floats(-1e20, 1e20))
def test_fit_recovers_quartic(k2, k4):
    dx = 1e-6 * np.cos(np.pi * (np.arange(41) + 0.5) / 41)
    fit = fit_polynomial_profile(dx, k2 * dx ** 2 + k4 * dx ** 4)
    assert fit.kappa2 == pytest.approx(k2, rel=1e-8)
    assert fit.kappa4 == pytest.approx(k4, rel=1e-8, abs=1e-8 * k2 / 1e-12)
    if fit.lambda4 is not None:
        assert fit.lambda4 == pytest.approx(abs(fit.kappa4 / fit.kappa2) ** -0.5, rel=1e-12)


def test_fit_ill_conditioned():
    with pytest.raises(SearchError):
        fit_polynomial_profile([1e-6, 1e-6, 1e-6], [1.0, 1.0, 1.0])


def test_be_axial_anharmonic_fit_scales(be_layout):
    f = TrapPotential(be_layout, BE9)
    m = find_minimum(f, [14e-6, 0, 20e-6])
    fit = anharmonic_fit(f, m, window=1.5e-6)
    assert fit.kappa2 > 0
    # l is sub-micron for these wells
    assert 0.4e-6 < fit.char_length < 1.5e-6
    assert fit.lambda4 is not None and fit.lambda4 > 5 * fit.char_length
