"""Amplitude-segmented Molmer-Sorensen gates: pulse synthesis and fidelity.

Rabi frequencies are piecewise constant over ``2N+1`` equal intervals. The
displacement of ion ``i`` in mode ``m`` after the gate is

    alpha_im = i eta_im sum_s Omega_s I_s^m,   I_s^m = int_s sin(mu t) exp(i w_m t) dt

and the two-qubit phase is ``chi = Omega^T Gamma Omega`` with ``Gamma`` the
time-ordered double integral of ``sin(mu t2) sin(mu t1) sin(w_m (t2 - t1))``.
Both are evaluated in closed form from exponential integrals.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import constants as sc
from scipy.linalg import null_space

from .layout import ConfigError
from .normal_modes import ModeSpectrum
from .species import Species

logger = logging.getLogger(__name__)

RABI_CAP = 2 * np.pi * 0.25e6
TARGET_PHASE = np.pi / 4
SECONDS_PER_MINUTE = 60.0


class GateInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GateConfig:
    pair: tuple[int, int]
    mu: float  # rad/s
    t_g: float = 200e-6
    n_segments: int = 5
    wavelength: float = 313.2e-9
    beam_angle: float = np.pi / 6
    geometry_factor: float = 2.0  # |dk| = factor * (2 pi / lambda) * cos(angle)
    rabi_cap: float = RABI_CAP

    def __post_init__(self):
        if not self.t_g > 0:
            raise ConfigError("gate time must be positive")
        if self.n_segments < 3 or self.n_segments % 2 == 0:
            raise ConfigError("n_segments must be odd and >= 3")
        if self.pair[0] == self.pair[1]:
            raise ConfigError("gate pair must contain two distinct ions")

    @property
    def t_p(self) -> float:
        return self.t_g / self.n_segments

    @property
    def delta_k(self) -> float:
        return self.geometry_factor * 2 * np.pi / self.wavelength * np.cos(self.beam_angle)

    def edges(self) -> np.ndarray:
        return np.arange(self.n_segments + 1) * self.t_p

    def with_mu(self, mu: float) -> "GateConfig":
        return GateConfig(self.pair, mu, self.t_g, self.n_segments, self.wavelength, self.beam_angle,
                          self.geometry_factor, self.rabi_cap)


# ---------------------------------------------------------------------------
# Lamb-Dicke parameters
# ---------------------------------------------------------------------------

def lamb_dicke(spectrum: ModeSpectrum, species: Sequence[Species] | Species, config: GateConfig,
               warn_above: float = 0.3) -> np.ndarray:
    """``eta_im = dk * b_im * sqrt(hbar / (2 m_i w_m))`` for a single-axis spectrum."""
    n_ion = spectrum.b.shape[0]
    if isinstance(species, Species):
        species = [species] * n_ion
    if np.any(spectrum.omega <= 0):
        raise ValueError("mode frequencies must be positive")
    m = np.array([s.mass for s in species])[:, None]
    eta = config.delta_k * spectrum.b * np.sqrt(sc.hbar / (2 * m * spectrum.omega[None, :]))
    if np.max(np.abs(eta)) > warn_above:
        logger.warning("Lamb-Dicke parameter %.3f exceeds %.2f", np.max(np.abs(eta)), warn_above)
    return eta


# ---------------------------------------------------------------------------
# Exponential integrals
# ---------------------------------------------------------------------------

def _phi1(z):
    """(e^z - 1)/z, accurate near 0."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < 0.5
    zs = z[small]
    acc = np.zeros_like(zs)
    term = np.ones_like(zs)
    for n in range(1, 20):
        acc += term
        term = term * zs / (n + 1)
    out[small] = acc
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def _dd_exp2(d1, d2):
    """Second divided difference of exp at nodes (0, d1, d2)."""
    d1, d2 = np.broadcast_arrays(np.asarray(d1, dtype=complex), np.asarray(d2, dtype=complex))
    out = np.empty(d1.shape, dtype=complex)
    spread = np.maximum(np.maximum(np.abs(d1), np.abs(d2)), np.abs(d1 - d2))
    small = spread < 0.5
    if np.any(small):
        a, b = d1[small], d2[small]
        # sum_m h_m(0, a, b) / (m + 2)!, h_m complete homogeneous polynomial
        acc = np.zeros(a.shape, dtype=complex)
        pa = np.ones_like(a)  # a^k
        h = np.ones_like(a)  # h_0
        for m in range(0, 25):
            acc += h / math.factorial(m + 2)
            pa = pa * a
            h = h * b + pa  # h_{m+1}(a, b) = b h_m + a^{m+1}
        out[small] = acc
    big = ~small
    if np.any(big):
        nodes = np.stack([np.zeros_like(d1[big]), d1[big], d2[big]])
        # put the two most distant nodes on the outside
        dist = np.stack([np.abs(nodes[0] - nodes[1]), np.abs(nodes[0] - nodes[2]), np.abs(nodes[1] - nodes[2])])
        pick = np.argmax(dist, axis=0)
        order = np.array([[0, 2, 1], [0, 1, 2], [1, 0, 2]])[pick]  # (outer, middle, outer)
        cols = np.arange(nodes.shape[1])
        za, zm, zb = nodes[order[:, 0], cols], nodes[order[:, 1], cols], nodes[order[:, 2], cols]
        f_am = np.exp(za) * _phi1(zm - za)
        f_mb = np.exp(zm) * _phi1(zb - zm)
        out[big] = (f_mb - f_am) / (zb - za)
    return out


def _components(mu, omega):
    """Wavenumbers and weights of sin(mu t) e^{i w t} = sum_s c_s e^{i k_s t}."""
    k = np.stack(np.broadcast_arrays(omega + mu, omega - mu), axis=-1)
    c = np.array([1 / 2j, -1 / 2j])
    return k, c


def interval_integrals(mu, omega, edges) -> np.ndarray:
    """``I_s = int_{edges[s]}^{edges[s+1]} sin(mu t) e^{i w_s t} dt``.

    ``omega`` broadcasts against the interval axis (last); a per-interval
    frequency array models drift. Shapes: ``mu`` (...), ``omega`` (..., S).
    """
    edges = np.asarray(edges, dtype=float)
    a, length = edges[:-1], np.diff(edges)
    mu = np.asarray(mu, dtype=float)[..., None]
    omega = np.asarray(omega, dtype=float)
    k, c = _components(mu, omega)
    kk = k  # (..., S, 2)
    j = np.exp(1j * kk * a[:, None]) * length[:, None] * _phi1(1j * kk * length[:, None])
    return np.sum(c * j, axis=-1)


def _diag_double(mu, omega, edges) -> np.ndarray:
    """Time-ordered ``int_s dt2 int_s^{t2} dt1 f(t2) conj f(t1)`` per interval (complex)."""
    edges = np.asarray(edges, dtype=float)
    a, length = edges[:-1], np.diff(edges)
    mu = np.asarray(mu, dtype=float)[..., None]
    k, c = _components(mu, np.asarray(omega, dtype=float))
    out = 0j
    for s in range(2):
        for t in range(2):
            ks, kt = k[..., s], k[..., t]
            x = 1j * ks * length
            y = 1j * kt * length
            out = out + c[s] * np.conj(c[t]) * np.exp(1j * (ks - kt) * a) * length ** 2 * _dd_exp2(x, x - y)
    return out


def gamma_matrix(mu, omega, edges) -> np.ndarray:
    """Lower-triangular ``G_rs = int_r dt2 int_s^{min} dt1 sin sin sin(w(t2 - t1))`` for one mode.

    Returns shape (..., S, S) with zeros above the diagonal.
    """
    i_s = interval_integrals(mu, omega, edges)
    g = np.imag(i_s[..., :, None] * np.conj(i_s[..., None, :]))
    g = np.tril(g, -1)
    d = np.imag(_diag_double(mu, omega, edges))
    idx = np.arange(g.shape[-1])
    g[..., idx, idx] = d
    return g


def _mode_freqs(omega_m, n_seg, drift_freqs=None):
    """(M, S) per-interval frequencies."""
    if drift_freqs is not None:
        return np.asarray(drift_freqs, dtype=float)
    return np.repeat(np.asarray(omega_m, dtype=float)[:, None], n_seg, axis=1)


def alpha(omega_s, eta, mu, omega_m, edges, drift_freqs=None) -> np.ndarray:
    """Complex displacements ``alpha_im`` (ions x modes) after the pulse."""
    edges = np.asarray(edges, dtype=float)
    w = _mode_freqs(omega_m, len(edges) - 1, drift_freqs)
    i_s = interval_integrals(mu, w, edges)  # (M, S)
    a_m = 1j * (i_s @ np.asarray(omega_s, dtype=float))
    return np.asarray(eta) * a_m[None, :]


def gamma_tensor(eta, mu, omega_m, edges, pair, drift_freqs=None) -> np.ndarray:
    """``Gamma_rs,ij = 2 sum_m eta_im eta_jm G^m_rs`` for the ion pair ``(i, j)``."""
    i, j = pair
    edges = np.asarray(edges, dtype=float)
    w = _mode_freqs(omega_m, len(edges) - 1, drift_freqs)
    g = gamma_matrix(mu, w, edges)  # (M, S, S)
    weights = 2 * np.asarray(eta)[i] * np.asarray(eta)[j]
    return np.einsum("m,mrs->rs", weights, g)


def geometric_phase(omega_s, gamma) -> float:
    o = np.asarray(omega_s, dtype=float)
    return float(o @ gamma @ o)


# ---------------------------------------------------------------------------
# Pulse synthesis
# ---------------------------------------------------------------------------

@dataclass
class PulseSolution:
    omega_s: np.ndarray  # rad/s per interval
    mu: float
    t_g: float
    residual_alpha: np.ndarray  # |alpha| per segment mode (pair ions, max over the two)
    chi: float
    cap_ok: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def max_rabi(self) -> float:
        return float(np.max(np.abs(self.omega_s)))

    def to_dict(self) -> dict:
        return {"t_g_s": self.t_g, "mu_hz": self.mu / (2 * np.pi),
                "omega_s_hz": (self.omega_s / (2 * np.pi)).tolist(), "chi": self.chi,
                "max_rabi_hz": self.max_rabi / (2 * np.pi), "cap_ok": self.cap_ok,
                "residual_alpha": self.residual_alpha.tolist()}


def constraint_matrix(mu, omega_m, edges) -> np.ndarray:
    """Real 2M x S system whose null space decouples every mode."""
    i_s = interval_integrals(mu, np.asarray(omega_m, dtype=float)[:, None], edges)
    return np.vstack([i_s.real, i_s.imag])


def _best_scaling(v, gamma_sym, target):
    """Minimum inf-norm vector in span(v) with quadratic form ``target``, or None."""
    q = v.T @ gamma_sym @ v
    q = 0.5 * (q + q.T)
    lam, vec = np.linalg.eigh(q)
    best = None
    for k in range(len(lam)):
        if lam[k] * target <= 0:
            continue
        cand = v @ vec[:, k] * np.sqrt(target / lam[k])
        if best is None or np.max(np.abs(cand)) < np.max(np.abs(best)):
            best = cand
    return best


def solve_pulse(config: GateConfig, segment: ModeSpectrum, eta) -> PulseSolution:
    """Decouple the segment modes and scale to a phase of pi/4.

    ``eta`` is ions x segment modes. Raises :class:`GateInfeasibleError` when
    the constraints leave no null space or the phase has the wrong sign.
    """
    edges = config.edges()
    n_con = 2 * segment.n_modes
    if n_con >= config.n_segments:
        raise GateInfeasibleError(f"{n_con} constraints need more than {config.n_segments} intervals")
    a = constraint_matrix(config.mu, segment.omega, edges)
    scale = np.max(np.abs(a)) or 1.0
    v = null_space(a / scale, rcond=1e-10)
    if v.shape[1] == 0:
        raise GateInfeasibleError("constraint system has an empty null space")
    gam = gamma_tensor(eta, config.mu, segment.omega, edges, config.pair)
    gsym = 0.5 * (gam + gam.T)
    omega_s = _best_scaling(v, gsym, TARGET_PHASE)
    if omega_s is None:
        raise GateInfeasibleError(f"phase pi/4 unreachable at mu/2pi={config.mu / (2 * np.pi):.6f} Hz")
    # make the sequence sign deterministic
    if omega_s[np.argmax(np.abs(omega_s))] < 0:
        omega_s = -omega_s
    al = alpha(omega_s, eta, config.mu, segment.omega, edges)
    pair_alpha = np.max(np.abs(al[list(config.pair)]), axis=0)
    chi = geometric_phase(omega_s, gam)
    cap_ok = bool(np.max(np.abs(omega_s)) <= config.rabi_cap)
    if not cap_ok:
        logger.warning("Rabi cap exceeded: %.4g Hz", np.max(np.abs(omega_s)) / (2 * np.pi))
    return PulseSolution(omega_s, config.mu, config.t_g, pair_alpha, chi, cap_ok)


# ---------------------------------------------------------------------------
# Drift, temperature, fidelity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftModel:
    """Linear drift of all mode frequencies.

    ``rate`` is given per minute, in Hz (linear) or rad/s (angular); ``gamma``
    is the angular rate per second used internally.
    """

    rate: float = 0.0
    unit: str = "hz_per_min"

    def __post_init__(self):
        if self.unit not in ("hz_per_min", "rad_per_s_per_min"):
            raise ConfigError(f"unknown drift unit {self.unit!r}")

    @property
    def gamma(self) -> float:
        per_s = self.rate / SECONDS_PER_MINUTE
        return 2 * np.pi * per_s if self.unit == "hz_per_min" else per_s


def apply_drift(omega_m, drift: DriftModel, n_segments: int, t_p: float) -> np.ndarray:
    """(M, S) frequencies sampled at interval midpoints."""
    s = np.arange(1, n_segments + 1)
    return np.asarray(omega_m, dtype=float)[:, None] + drift.gamma * (s - 0.5) * t_p


@dataclass(frozen=True)
class ThermalState:
    n_bar_c: float = 0.0
    omega_c: float | None = None

    def __post_init__(self):
        if self.n_bar_c < 0:
            raise ConfigError("mean phonon number must be non-negative")

    def beta(self, omega_m) -> np.ndarray:
        omega_m = np.asarray(omega_m, dtype=float)
        if self.n_bar_c == 0:
            return np.ones_like(omega_m)
        if self.omega_c is None:
            raise ConfigError("omega_c is required for a thermal state")
        x = omega_m / (2 * self.omega_c) * np.log1p(1 / self.n_bar_c)
        return 1.0 / np.tanh(x)


@dataclass
class FidelityResult:
    fidelity: float
    delta_chi: float
    alpha: np.ndarray  # pair ions x all modes
    gamma_i: float
    gamma_j: float
    gamma_plus: float
    gamma_minus: float

    @property
    def infidelity(self) -> float:
        return 1.0 - self.fidelity


def fidelity_from_parts(alpha_pair, delta_chi: float, beta) -> FidelityResult:
    ai, aj = np.asarray(alpha_pair)
    beta = np.asarray(beta, dtype=float)
    gi = np.exp(-2 * np.sum(np.abs(ai) ** 2 * beta))
    gj = np.exp(-2 * np.sum(np.abs(aj) ** 2 * beta))
    gp = np.exp(-2 * np.sum(np.abs(ai + aj) ** 2 * beta))
    gm = np.exp(-2 * np.sum(np.abs(ai - aj) ** 2 * beta))
    f = (2 + 2 * (gi + gj) * np.cos(2 * delta_chi) + gp + gm) / 8
    return FidelityResult(float(f), float(delta_chi), np.asarray(alpha_pair), float(gi), float(gj),
                          float(gp), float(gm))


def fidelity(pulse: PulseSolution, config: GateConfig, spectrum: ModeSpectrum, eta,
             thermal: ThermalState | None = None, drift: DriftModel | None = None) -> FidelityResult:
    """Fidelity of ``pulse`` evaluated over every mode of ``spectrum``."""
    thermal = thermal or ThermalState()
    edges = config.edges()
    w = apply_drift(spectrum.omega, drift or DriftModel(), config.n_segments, config.t_p)
    al = alpha(pulse.omega_s, eta, config.mu, spectrum.omega, edges, drift_freqs=w)
    gam = gamma_tensor(eta, config.mu, spectrum.omega, edges, config.pair, drift_freqs=w)
    chi = geometric_phase(pulse.omega_s, gam)
    return fidelity_from_parts(al[list(config.pair)], TARGET_PHASE - chi, thermal.beta(spectrum.omega))


# ---------------------------------------------------------------------------
# Detuning sweep (vectorised over mu)
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    mu: np.ndarray  # rad/s
    infidelity: np.ndarray
    max_rabi: np.ndarray  # rad/s
    feasible: np.ndarray  # bool: solvable and within the Rabi cap

    def rows(self):
        for m, f, r, ok in zip(self.mu, self.infidelity, self.max_rabi, self.feasible):
            yield m / (2 * np.pi), f, r / (2 * np.pi), bool(ok)

    def worst(self, feasible_only: bool = True) -> float:
        sel = self.feasible if feasible_only else np.isfinite(self.infidelity)
        return float(np.max(self.infidelity[sel])) if np.any(sel) else float("nan")

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            w = csv.writer(f)
            w.writerow(["mu_hz", "infidelity", "max_rabi_hz", "feasible"])
            for m, inf, r, ok in self.rows():
                w.writerow([repr(float(m)), repr(float(inf)), repr(float(r)), int(ok)])


def _solve_chunk(mus, config, segment, eta_seg):
    edges = config.edges()
    i, j = config.pair
    # segment constraints, (P, 2M, S)
    i_seg = interval_integrals(mus[:, None], segment.omega[None, :, None], edges)
    a = np.concatenate([i_seg.real, i_seg.imag], axis=1)
    a = a / np.max(np.abs(a), axis=(1, 2), keepdims=True)
    _, sv, vt = np.linalg.svd(a, full_matrices=True)
    rank = np.sum(sv > 1e-10 * sv[:, :1], axis=1)
    g_seg = gamma_matrix(mus[:, None], segment.omega[None, :, None], edges)  # (P, M, S, S)
    gam = np.einsum("m,pmrs->prs", 2 * eta_seg[i] * eta_seg[j], g_seg)
    gsym = 0.5 * (gam + np.swapaxes(gam, 1, 2))
    omega_s = np.full((len(mus), config.n_segments), np.nan)
    for p in range(len(mus)):
        v = vt[p, rank[p]:].T
        if v.shape[1] == 0:
            continue
        sol = _best_scaling(v, gsym[p], TARGET_PHASE)
        if sol is not None:
            omega_s[p] = sol
    return omega_s


def _sweep_chunk(mus, config, segment, eta_seg, eta_all, beta, w_drift, fixed=None):
    edges = config.edges()
    i, j = config.pair
    if fixed is None:
        omega_s = _solve_chunk(mus, config, segment, eta_seg)
    else:
        omega_s = np.broadcast_to(fixed, (len(mus), config.n_segments))
    i_all = interval_integrals(mus[:, None], w_drift[None, :, :], edges)  # (P, M, S)
    ok = np.all(np.isfinite(omega_s), axis=1)
    o = np.where(ok[:, None], omega_s, 0.0)
    a_m = 1j * np.einsum("pms,ps->pm", i_all, o)
    al_i = eta_all[i][None, :] * a_m
    al_j = eta_all[j][None, :] * a_m
    g_all = gamma_matrix(mus[:, None], w_drift[None, :, :], edges)
    gam_all = np.einsum("m,pmrs->prs", 2 * eta_all[i] * eta_all[j], g_all)
    chi = np.einsum("pr,prs,ps->p", o, gam_all, o)
    dchi = TARGET_PHASE - chi
    b = beta[None, :]
    gi = np.exp(-2 * np.sum(np.abs(al_i) ** 2 * b, axis=1))
    gj = np.exp(-2 * np.sum(np.abs(al_j) ** 2 * b, axis=1))
    gp = np.exp(-2 * np.sum(np.abs(al_i + al_j) ** 2 * b, axis=1))
    gm = np.exp(-2 * np.sum(np.abs(al_i - al_j) ** 2 * b, axis=1))
    fid = (2 + 2 * (gi + gj) * np.cos(2 * dchi) + gp + gm) / 8
    infid = np.where(ok, 1 - fid, np.nan)
    rabi = np.where(ok, np.max(np.abs(o), axis=1), np.nan)
    return infid, rabi, ok


def detuning_sweep(mu_values, template: GateConfig, segment: ModeSpectrum, eta_segment,
                   spectrum: ModeSpectrum, eta_all, thermal: ThermalState | None = None,
                   drift: DriftModel | None = None, chunk: int = 512, workers: int = 1,
                   fixed_pulse=None) -> SweepResult:
    """Re-solve the pulse at each detuning and evaluate the full-spectrum fidelity.

    With ``fixed_pulse`` (Rabi amplitudes in rad/s) that one sequence is reused at
    every detuning instead. ``workers`` > 1 evaluates chunks on a thread pool;
    results do not depend on the worker count.
    """
    mu_values = np.asarray(mu_values, dtype=float)
    if mu_values.size == 0:
        raise ValueError("empty detuning range")
    thermal = thermal or ThermalState()
    beta = thermal.beta(spectrum.omega)
    w_drift = apply_drift(spectrum.omega, drift or DriftModel(), template.n_segments, template.t_p)
    eta_seg = np.asarray(eta_segment)
    eta_all = np.asarray(eta_all)
    fixed = None if fixed_pulse is None else np.asarray(fixed_pulse, dtype=float)

    def run(k):
        return _sweep_chunk(mu_values[k:k + chunk], template, segment, eta_seg, eta_all, beta, w_drift, fixed)

    starts = range(0, len(mu_values), chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(k) for k in starts]
    infs, rabis, oks = zip(*parts)
    rabi = np.concatenate(rabis)
    ok = np.concatenate(oks)
    feasible = ok & (np.nan_to_num(rabi, nan=np.inf) <= template.rabi_cap)
    return SweepResult(mu_values, np.concatenate(infs), rabi, feasible)


def sweep_grid(start_hz: float, stop_hz: float, step_hz: float) -> np.ndarray:
    """Angular detunings from ``start_hz`` to ``stop_hz`` inclusive."""
    if step_hz <= 0:
        raise ConfigError("sweep step must be positive")
    n = int(np.floor((stop_hz - start_hz) / step_hz + 1e-9)) + 1
    return 2 * np.pi * (start_hz + step_hz * np.arange(n))


def local_maxima(x, y, prominence: float = 10.0) -> np.ndarray:
    """Indices of local maxima of ``y`` exceeding ``prominence`` times the median."""
    y = np.nan_to_num(np.asarray(y, dtype=float), nan=0.0)
    med = np.median(y[y > 0]) if np.any(y > 0) else 0.0
    peaks = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:]) & (y[1:-1] > prominence * med)) + 1
    return peaks


def save_pulse(pulse: PulseSolution, path, metadata: dict | None = None) -> None:
    d = pulse.to_dict()
    if metadata:
        d["meta"] = metadata
    Path(path).write_text(json.dumps(d, indent=1) + "\n")
