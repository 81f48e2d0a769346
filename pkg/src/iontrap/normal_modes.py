"""Normal modes of ion crystals in arrays of wells."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .electrode_field import (SecularTriple, TrapPotential, characteristic_length, find_minimum,
                              richardson_hessian)
from .ion_dynamics import PseudoForces, minimize_energy
from .layout import ConfigError, TrapLayout
from .species import COULOMB_K, ELEMENTARY_CHARGE, Species

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")
DECOUPLING_TOL = 1e-6


class SingularityError(ValueError):
    pass


class UnstableCrystalError(RuntimeError):
    def __init__(self, msg, eigenvalues=None):
        super().__init__(msg)
        self.eigenvalues = eigenvalues


@dataclass(frozen=True)
class ModeSpectrum:
    axis: str  # "x", "y", "z" or "FULL3N"
    omega: np.ndarray  # rad/s, ascending
    b: np.ndarray  # rows = ions (or 3N coords), columns = modes

    @property
    def freq_hz(self) -> np.ndarray:
        return self.omega / (2 * np.pi)

    @property
    def n_modes(self) -> int:
        return len(self.omega)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "frequencies_hz": self.freq_hz.tolist(), "eigenvectors": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModeSpectrum":
        return cls(d["axis"], 2 * np.pi * np.asarray(d["frequencies_hz"], dtype=float),
                   np.asarray(d["eigenvectors"], dtype=float))

    def subset(self, modes) -> "ModeSpectrum":
        modes = np.asarray(modes, dtype=int)
        return ModeSpectrum(self.axis, self.omega[modes], self.b[:, modes])


# ---------------------------------------------------------------------------
# Hessians
# ---------------------------------------------------------------------------

def coulomb_hessian(positions, charges) -> np.ndarray:
    """Second derivatives (J/m^2) of the pairwise Coulomb energy, 3N x 3N."""
    r = np.asarray(positions, dtype=float)
    q = np.asarray(charges, dtype=float)
    n = len(r)
    h = np.zeros((3 * n, 3 * n))
    for i in range(n):
        for j in range(i + 1, n):
            d = r[i] - r[j]
            dist = np.linalg.norm(d)
            if dist < 1e-12:
                raise SingularityError(f"ions {i} and {j} coincide")
            u = d / dist
            block = COULOMB_K * ELEMENTARY_CHARGE ** 2 * q[i] * q[j] * (3 * np.outer(u, u) - np.eye(3)) / dist ** 3
            h[3 * i:3 * i + 3, 3 * j:3 * j + 3] = -block
            h[3 * j:3 * j + 3, 3 * i:3 * i + 3] = -block
            h[3 * i:3 * i + 3, 3 * i:3 * i + 3] += block
            h[3 * j:3 * j + 3, 3 * j:3 * j + 3] += block
    return h


@dataclass
class CrystalHessian:
    """Mass-weighted Hessians of a crystal.

    ``full`` is expressed in ``frame`` coordinates (columns = frame axes in the
    lab). ``per_axis`` holds the N x N blocks when cross-axis coupling is
    negligible, keyed by the lab axis each frame axis is closest to.
    """

    full: np.ndarray
    stiffness: np.ndarray  # unweighted 3N x 3N in the lab frame, J/m^2
    masses: np.ndarray
    frame: np.ndarray
    axis_labels: tuple[str, str, str]
    cross_ratio: float
    per_axis: dict = field(default_factory=dict)

    @property
    def decoupled(self) -> bool:
        return bool(self.per_axis)


def _common_frame(sites: Sequence[SecularTriple], masses) -> np.ndarray:
    k = sum(m * s.stiffness_unit for s, m in zip(sites, masses))
    _, vec = np.linalg.eigh(k)
    # order columns by the lab axis they align with, right-handed
    order = [int(np.argmax(np.abs(vec[a]))) for a in range(3)]
    if sorted(order) != [0, 1, 2]:
        order = list(range(3))
    vec = vec[:, order]
    vec = vec * np.sign(np.diag(vec) + (np.diag(vec) == 0))
    return vec


def assemble_hessian(sites: Sequence[SecularTriple], positions, species: Sequence[Species],
                     decoupling_tol: float = DECOUPLING_TOL) -> CrystalHessian:
    """Mass-weighted Hessian ``H = M^-1/2 (K_site + C) M^-1/2`` with eigenvalues ``omega_m^2``."""
    positions = np.asarray(positions, dtype=float)
    n = len(sites)
    if not (n == len(positions) == len(species)):
        raise ConfigError(f"inconsistent lengths: {n} sites, {len(positions)} positions, {len(species)} species")
    masses = np.array([s.mass for s in species])
    charges = np.array([s.charge_number for s in species], dtype=float)
    k = coulomb_hessian(positions, charges)
    for i, (s, m) in enumerate(zip(sites, masses)):
        k[3 * i:3 * i + 3, 3 * i:3 * i + 3] += m * s.stiffness_unit
    w = 1.0 / np.sqrt(np.repeat(masses, 3))
    h_lab = w[:, None] * k * w[None, :]
    frame = _common_frame(sites, masses)
    rot = np.kron(np.eye(n), frame)
    h = rot.T @ h_lab @ rot
    h = 0.5 * (h + h.T)
    # axis-major reordering to inspect cross-axis blocks
    perm = np.array([3 * i + a for a in range(3) for i in range(n)])
    hp = h[np.ix_(perm, perm)]
    blocks = {(a, c): hp[a * n:(a + 1) * n, c * n:(c + 1) * n] for a in range(3) for c in range(3)}
    diag_scale = max(np.linalg.norm(blocks[(a, a)]) for a in range(3))
    cross = max(np.linalg.norm(blocks[(a, c)]) for a in range(3) for c in range(3) if a != c)
    ratio = float(cross / diag_scale) if diag_scale > 0 else 0.0
    labels = tuple(AXES[int(np.argmax(np.abs(frame[:, a])))] for a in range(3))
    per_axis = {}
    if ratio < decoupling_tol:
        per_axis = {labels[a]: blocks[(a, a)].copy() for a in range(3)}
    return CrystalHessian(h, k, masses, frame, labels, ratio, per_axis)


def diagonalize(h, axis: str = "FULL3N", symmetry_tol: float = 1e-10) -> ModeSpectrum:
    """Eigen-decomposition of a mass-weighted Hessian into ascending mode frequencies."""
    h = np.asarray(h, dtype=float)
    scale = np.max(np.abs(h)) or 1.0
    if h.ndim != 2 or h.shape[0] != h.shape[1] or np.max(np.abs(h - h.T)) > symmetry_tol * scale:
        raise ValueError("Hessian must be a symmetric square matrix")
    lam, vec = np.linalg.eigh(0.5 * (h + h.T))
    if lam[0] < -1e-12 * scale:
        raise UnstableCrystalError(f"{int(np.sum(lam < 0))} imaginary mode(s)", lam[lam < 0])
    lam = np.clip(lam, 0.0, None)
    # deterministic sign: largest-magnitude component positive
    idx = np.argmax(np.abs(vec), axis=0)
    vec = vec * np.sign(vec[idx, np.arange(vec.shape[1])])
    return ModeSpectrum(axis, np.sqrt(lam), vec)


def axis_spectrum(ch: CrystalHessian, axis: str) -> ModeSpectrum:
    """Per-axis spectrum; falls back to the N modes of the full problem dominated by ``axis``."""
    if axis in ch.per_axis:
        return diagonalize(ch.per_axis[axis], axis)
    full = diagonalize(ch.full)
    a = ch.axis_labels.index(axis)
    n = len(ch.masses)
    comp = full.b[a::3, :]
    weight = np.sum(comp ** 2, axis=0)
    modes = np.sort(np.argsort(weight)[-n:])
    b = comp[:, modes] / np.linalg.norm(comp[:, modes], axis=0)
    logger.info("axis %s taken from the coupled 3N problem (cross ratio %.2g)", axis, ch.cross_ratio)
    return ModeSpectrum(axis, full.omega[modes], b)


# ---------------------------------------------------------------------------
# Interaction matrices, couplings, segments
# ---------------------------------------------------------------------------

def interaction_matrix(spectrum: ModeSpectrum) -> np.ndarray:
    """Each mode column divided by its largest-magnitude entry (sign kept)."""
    b = spectrum.b
    idx = np.argmax(np.abs(b), axis=0)
    return b / b[idx, np.arange(b.shape[1])]


def coupling_strength(sp_i: Species, sp_j: Species, omega_i: float, omega_j: float, d_ion: float) -> float:
    """Phonon-exchange rate (rad/s) between ions in neighbouring wells."""
    num = sp_i.charge_number * sp_j.charge_number * ELEMENTARY_CHARGE ** 2 * COULOMB_K
    return float(num / (np.sqrt(sp_i.mass * sp_j.mass) * np.sqrt(omega_i * omega_j) * d_ion ** 3))


@dataclass(frozen=True)
class CouplingReport:
    pair: tuple[int, int]
    omega_i: float
    omega_j: float
    omega_coupling: float
    delta_minus: float
    coupled: bool


def resonance_detuning(omega_i: float, omega_j: float, omega_coupling: float | None = None,
                       factor: float = 1.0) -> tuple[float, bool | None]:
    """Half the site-frequency difference and whether it lies within ``factor * Omega_I``."""
    dm = 0.5 * (omega_i - omega_j)
    if omega_coupling is None:
        return float(dm), None
    return float(dm), bool(abs(dm) <= factor * omega_coupling)


def coupling_report(i: int, j: int, sp_i: Species, sp_j: Species, omega_i: float, omega_j: float,
                    d_ion: float, factor: float = 1.0) -> CouplingReport:
    oi = coupling_strength(sp_i, sp_j, omega_i, omega_j, d_ion)
    dm, ok = resonance_detuning(omega_i, omega_j, oi, factor)
    return CouplingReport((i, j), omega_i, omega_j, oi, dm, ok)


@dataclass(frozen=True)
class SegmentPartition:
    segments: list  # list of (ion tuple, mode tuple)
    threshold: float

    def segment_of_ion(self, ion: int):
        for s in self.segments:
            if ion in s[0]:
                return s
        raise KeyError(ion)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold,
                "segments": [{"ions": list(i), "modes": list(m)} for i, m in self.segments]}


def detect_segments(spectrum: ModeSpectrum, threshold: float = 1e-4) -> SegmentPartition:
    """Connected components of the bipartite ion-mode participation graph."""
    m = np.abs(interaction_matrix(spectrum))
    n_ion, n_mode = m.shape
    adj = (m > threshold).astype(np.int8)
    graph = np.zeros((n_ion + n_mode, n_ion + n_mode), dtype=np.int8)
    graph[:n_ion, n_ion:] = adj
    graph[n_ion:, :n_ion] = adj.T
    _, labels = connected_components(csr_matrix(graph), directed=False)
    segs = []
    for lab in dict.fromkeys(labels):  # order of first appearance
        ions = tuple(int(i) for i in np.flatnonzero(labels[:n_ion] == lab))
        modes = tuple(int(k) for k in np.flatnonzero(labels[n_ion:] == lab))
        segs.append((ions, modes))
    return SegmentPartition(segs, threshold)


# ---------------------------------------------------------------------------
# Dimensionless anharmonic chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnharmonicChain:
    """Ions on a line in quartic wells, in units of the characteristic length ``l``.

    Dimensionless energy ``sum rho_n du_n^2 + alpha_n du_n^4 + sum_pairs 2/|u_n-u_p|``
    with ``du_n`` the offset of ion n from its own well centre ``c_n``.
    """

    centers: np.ndarray
    rho: np.ndarray  # kappa2^n / kappa2^o
    alpha: np.ndarray

    def energy(self, u) -> float:
        u = np.asarray(u, dtype=float)
        du = u - self.centers
        iu = np.triu_indices(len(u), 1)
        diff = np.abs(u[:, None] - u[None, :])[iu]
        return float(np.sum(self.rho * du ** 2 + self.alpha * du ** 4) + np.sum(2.0 / diff))

    def gradient(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        du = u - self.centers
        d = u[:, None] - u[None, :]
        np.fill_diagonal(d, np.inf)
        return 2 * self.rho * du + 4 * self.alpha * du ** 3 - 2.0 * np.sum(np.sign(d) / d ** 2, axis=1)

    def equilibrium(self, guess=None) -> np.ndarray:
        u0 = self.centers + 0.1 * np.arange(len(self.centers)) if guess is None else np.asarray(guess, dtype=float)
        res = optimize.minimize(self.energy, u0, jac=self.gradient, method="BFGS", options={"gtol": 1e-13})
        u = res.x
        # polish with Newton steps on the gradient
        for _ in range(20):
            g = self.gradient(u)
            if np.max(np.abs(g)) < 1e-14:
                break
            u = u - np.linalg.solve(2 * anharmonic_jacobian(u, self), g)
        return u


def anharmonic_jacobian(u, chain: AnharmonicChain) -> np.ndarray:
    """Dimensionless Jacobian: half the Hessian of ``chain.energy`` at ``u``."""
    u = np.asarray(u, dtype=float)
    n = len(u)
    d = np.abs(u[:, None] - u[None, :])
    off = ~np.eye(n, dtype=bool)
    if n > 1 and d[off].min() < 1e-12:
        raise SingularityError("duplicate positions in the anharmonic chain")
    np.fill_diagonal(d, np.inf)
    a = -2.0 / d ** 3
    du = u - chain.centers
    np.fill_diagonal(a, chain.rho + 6 * chain.alpha * du ** 2 + 2 * np.sum(1.0 / d ** 3, axis=1))
    return a


def anharmonic_modes(u, chain: AnharmonicChain, omega_ref: float, axis: str = "x") -> ModeSpectrum:
    """Modes of the dimensionless Jacobian scaled by the reference-well frequency (equal masses)."""
    return _scaled(diagonalize(anharmonic_jacobian(u, chain), axis), omega_ref)


def _scaled(s: ModeSpectrum, omega_ref: float) -> ModeSpectrum:
    return ModeSpectrum(s.axis, s.omega * omega_ref, s.b)


def chain_from_fits(centers_m, fits, ref: int | None = None, quartic: bool = True, charge_number: int = 1):
    """Build an :class:`AnharmonicChain` from per-ion axial fits.

    ``fits`` holds an ``AnharmonicFit`` per ion (ions sharing a well share the fit).
    The reference curvature is the stiffest well unless ``ref`` is given.
    Returns ``(chain, length, kappa2_ref)``.
    """
    k2 = np.array([f.kappa2 for f in fits])
    k4 = np.array([f.kappa4 for f in fits])
    k2o = k2[ref] if ref is not None else k2.max()
    length = characteristic_length(k2o, charge_number)
    alpha = k4 * length ** 2 / k2o if quartic else np.zeros_like(k4)
    return AnharmonicChain(np.asarray(centers_m) / length, k2 / k2o, alpha), length, k2o


# ---------------------------------------------------------------------------
# Crystals in a trap layout
# ---------------------------------------------------------------------------

@dataclass
class Crystal:
    species: list
    positions: np.ndarray
    sites: list  # SecularTriple at each ion position

    @property
    def masses(self) -> np.ndarray:
        return np.array([s.mass for s in self.species])

    def hessian(self, decoupling_tol: float = DECOUPLING_TOL) -> CrystalHessian:
        return assemble_hessian(self.sites, self.positions, self.species, decoupling_tol)


def site_triple(field: TrapPotential, point, sp: Species) -> SecularTriple:
    h = richardson_hessian(field.gradient, np.asarray(point, dtype=float))
    lam, vec = np.linalg.eigh(h)
    if lam[0] <= 0:
        raise UnstableCrystalError("site Hessian is not positive definite", lam)
    return SecularTriple(np.sqrt(sp.charge * lam / sp.mass), vec,
                         np.asarray(point, dtype=float)).lab_ordered()


def relax_crystal(layout: TrapLayout, species: Sequence[Species], guesses, dc_voltages=None,
                  drive=None) -> Crystal:
    """Equilibrium of the time-averaged potential plus Coulomb, with per-ion site triples."""
    model = PseudoForces(layout, species, dc_voltages, drive)
    pos = minimize_energy(model, guesses)
    sites = [site_triple(model.field(i), pos[i], s) for i, s in enumerate(species)]
    return Crystal(list(species), pos, sites)


def well_minima(layout: TrapLayout, species: Species, centers, height: float = 20e-6, dc_voltages=None):
    """One pseudopotential minimum per nominal well centre (x positions)."""
    field = TrapPotential(layout, species, dc_voltages)
    return [find_minimum(field, [x, 0.0, height]) for x in centers]


def save_spectrum(spectrum: ModeSpectrum, path, metadata: dict | None = None) -> None:
    d = spectrum.to_dict()
    if metadata:
        d["meta"] = metadata
    Path(path).write_text(json.dumps(d, indent=1) + "\n")


def dominant_modes(spectrum: ModeSpectrum, ions, n_modes: int | None = None) -> np.ndarray:
    """Indices (ascending) of the ``n_modes`` modes with the largest weight on ``ions``."""
    ions = list(ions)
    n_modes = len(ions) if n_modes is None else n_modes
    weight = np.sum(spectrum.b[ions] ** 2, axis=0)
    return np.sort(np.argsort(weight)[-n_modes:])
