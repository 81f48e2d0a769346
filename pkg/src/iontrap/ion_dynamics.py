"""Classical Langevin dynamics of ions in the full time-dependent trap potential."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import constants as sc
from scipy import optimize

from .electrode_field import TrapPotential, _check_points, _corner_sum
from .layout import ConfigError, RfDrive, TrapLayout
from .species import COULOMB_K, ELEMENTARY_CHARGE, Species

logger = logging.getLogger(__name__)

MIN_SEPARATION = 1e-9  # m


class NearCollisionError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class IonLossError(RuntimeError):
    def __init__(self, ion: int, time: float, position):
        super().__init__(f"ion {ion} lost at t={time:.6g} s, position={np.asarray(position)}")
        self.ion = ion
        self.time = time
        self.position = np.asarray(position)


# ---------------------------------------------------------------------------
# Coulomb interaction
# ---------------------------------------------------------------------------

def _pair_geometry(positions):
    r = np.asarray(positions, dtype=float)
    diff = r[:, None, :] - r[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    n = len(r)
    off = ~np.eye(n, dtype=bool)
    if n > 1 and dist[off].min() < MIN_SEPARATION:
        i, j = np.argwhere((dist < MIN_SEPARATION) & off)[0]
        raise NearCollisionError(f"ions {i} and {j} closer than {MIN_SEPARATION} m")
    np.fill_diagonal(dist, np.inf)
    return diff, dist


def coulomb_energy(positions, charges) -> float:
    """Total Coulomb energy (J) of point charges ``charges`` (in units of e)."""
    q = np.asarray(charges, dtype=float)
    if len(q) < 2:
        return 0.0
    _, dist = _pair_geometry(positions)
    iu = np.triu_indices(len(q), 1)
    return float(COULOMB_K * ELEMENTARY_CHARGE ** 2 * np.sum((q[:, None] * q[None, :])[iu] / dist[iu]))


def coulomb_forces(positions, charges) -> np.ndarray:
    """(N, 3) Coulomb forces in newtons."""
    q = np.asarray(charges, dtype=float)
    if len(q) < 2:
        return np.zeros((len(q), 3))
    diff, dist = _pair_geometry(positions)
    coef = COULOMB_K * ELEMENTARY_CHARGE ** 2 * (q[:, None] * q[None, :]) / dist ** 3
    return np.einsum("ij,ijk->ik", coef, diff)


# ---------------------------------------------------------------------------
# Force models
# ---------------------------------------------------------------------------

class TrapForces:
    """Forces from the full time-dependent electrode potential plus Coulomb repulsion.

    The external potential is ``sum_DC V_i phi_i + cos(Omega t) sum_RF (+-V_rf) phi_i``.
    """

    def __init__(self, layout: TrapLayout, species: Sequence[Species], dc_voltages=None,
                 drive: RfDrive | None = None):
        self.layout = layout
        self.species = list(species)
        self.drive = drive or layout.drive
        self.charges = np.array([s.charge_number for s in self.species], dtype=float)
        self.masses = np.array([s.mass for s in self.species])
        self._dc = layout.dc_vector(dc_voltages)
        self._dc_corners = layout.corners(layout.dc_electrodes)
        self._rf_corners = layout.corners(layout.rf_electrodes)
        self._rf_amps = layout.rf_amplitudes(self.drive) if len(self._rf_corners) else np.zeros(0)

    def _fields(self, positions, order):
        pts = _check_points(positions).reshape(-1, 3)
        out = []
        for corners, weights in ((self._dc_corners, self._dc), (self._rf_corners, self._rf_amps)):
            if len(corners) == 0:
                out.append((np.zeros(len(pts)), np.zeros((len(pts), 3))))
                continue
            phi, g, _ = _corner_sum(corners, pts, order)
            out.append((weights @ phi, np.einsum("n,nmk->mk", weights, g) if g is not None else None))
        return out

    def __call__(self, positions, t: float) -> np.ndarray:
        (_, gdc), (_, grf) = self._fields(positions, 1)
        c = np.cos(self.drive.omega_rf * t) if self.drive is not None else 0.0
        grad = gdc + c * grf
        return -(self.charges * ELEMENTARY_CHARGE)[:, None] * grad + coulomb_forces(positions, self.charges)

    def potential_energy(self, positions, t: float) -> float:
        (pdc, _), (prf, _) = self._fields(positions, 0)
        c = np.cos(self.drive.omega_rf * t) if self.drive is not None else 0.0
        ext = float(np.sum(self.charges * ELEMENTARY_CHARGE * (pdc + c * prf)))
        return ext + coulomb_energy(positions, self.charges)


class HarmonicForces:
    """Ions bound to fixed centres by anisotropic harmonic springs, plus Coulomb.

    ``omegas`` is (3,) or (N, 3) angular frequencies along lab axes.
    """

    def __init__(self, species: Sequence[Species], omegas, centers, coulomb: bool = True):
        self.species = list(species)
        self.masses = np.array([s.mass for s in self.species])
        self.charges = np.array([s.charge_number for s in self.species], dtype=float)
        n = len(self.species)
        self.omegas = np.broadcast_to(np.asarray(omegas, dtype=float), (n, 3)).copy()
        self.centers = np.broadcast_to(np.asarray(centers, dtype=float), (n, 3)).copy()
        self.coulomb = coulomb

    def __call__(self, positions, t: float = 0.0) -> np.ndarray:
        d = np.asarray(positions) - self.centers
        f = -self.masses[:, None] * self.omegas ** 2 * d
        if self.coulomb:
            f = f + coulomb_forces(positions, self.charges)
        return f

    def potential_energy(self, positions, t: float = 0.0) -> float:
        d = np.asarray(positions) - self.centers
        e = 0.5 * float(np.sum(self.masses[:, None] * self.omegas ** 2 * d * d))
        if self.coulomb:
            e += coulomb_energy(positions, self.charges)
        return e


class PseudoForces:
    """Time-averaged forces: pseudopotential + DC for each ion, plus Coulomb."""

    def __init__(self, layout: TrapLayout, species: Sequence[Species], dc_voltages=None,
                 drive: RfDrive | None = None):
        self.species = list(species)
        self.masses = np.array([s.mass for s in self.species])
        self.charges = np.array([s.charge_number for s in self.species], dtype=float)
        self._fields = {}
        for s in self.species:
            if s not in self._fields:
                self._fields[s] = TrapPotential(layout, s, dc_voltages, drive)

    def field(self, i: int) -> TrapPotential:
        return self._fields[self.species[i]]

    def __call__(self, positions, t: float = 0.0) -> np.ndarray:
        positions = np.asarray(positions, dtype=float)
        f = np.empty_like(positions)
        for i, s in enumerate(self.species):
            f[i] = -s.charge * self._fields[s].gradient(positions[i])
        return f + coulomb_forces(positions, self.charges)

    def potential_energy(self, positions, t: float = 0.0) -> float:
        positions = np.asarray(positions, dtype=float)
        e = sum(s.charge * self._fields[s].potential(positions[i]) for i, s in enumerate(self.species))
        return float(e) + coulomb_energy(positions, self.charges)


def minimize_energy(model, initial, length_scale: float = 1e-6, gtol: float = 1e-12) -> np.ndarray:
    """Direct minimisation of ``model.potential_energy`` (time-independent models)."""
    x0 = np.asarray(initial, dtype=float)
    shape = x0.shape
    e_scale = abs(model.potential_energy(x0)) + sc.k * 1e-3

    def f(q):
        p = (x0.ravel() + q * length_scale).reshape(shape)
        e = model.potential_energy(p) / e_scale
        g = -model(p).ravel() * length_scale / e_scale
        return e, g

    q = np.zeros(x0.size)
    for _ in range(3):
        res = optimize.minimize(f, q, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 20000})
        q = res.x
        if np.linalg.norm(res.jac) < 10 * gtol:
            break
    return (x0.ravel() + q * length_scale).reshape(shape)


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    dt: float
    n_steps: int
    damping: float | Sequence[float] = 0.0  # kg/s per ion
    temperature: float = 0.5e-3  # K, sets the default noise amplitude
    noise_amplitude: float | Sequence[float] | None = None  # N s^1/2 per ion
    rng_seed: int = 0
    record_every: int = 1
    bounding_box: float | None = None  # |coordinate| limit in metres (z always > 0)

    def __post_init__(self):
        if self.n_steps <= 0:
            raise ConfigError("n_steps must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")

    def check_rf_step(self, omega_rf: float) -> None:
        limit = 2 * np.pi / omega_rf / 20
        if self.dt > limit * (1 + 1e-12):
            raise ConfigError(f"dt={self.dt:.3g} s exceeds 1/20 of the RF period ({limit:.3g} s)")

    def gamma(self, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.damping, dtype=float), (n,)).copy()

    def noise(self, n: int) -> np.ndarray:
        """Per-ion noise amplitude ``sqrt(2 gamma k_B T)``; impulse std is this times ``sqrt(dt)``."""
        if self.noise_amplitude is not None:
            return np.broadcast_to(np.asarray(self.noise_amplitude, dtype=float), (n,)).copy()
        return np.sqrt(2.0 * self.gamma(n) * sc.k * self.temperature)


@dataclass
class IonState:
    positions: np.ndarray
    velocities: np.ndarray
    t: float = 0.0
    forces: np.ndarray | None = field(default=None, repr=False)


def step_verlet(state: IonState, force_fn: Callable, masses, gamma, dt: float,
                noise=None, rng: np.random.Generator | None = None) -> IonState:
    """One Langevin velocity-Verlet step (Gronbech-Jensen/Farago splitting).

    Reduces to plain velocity Verlet for ``gamma = 0`` and no noise. ``noise``
    is the per-ion amplitude in N s^1/2; the impulse drawn each step has
    standard deviation ``noise * sqrt(dt)`` per axis.
    """
    m = np.asarray(masses, dtype=float)[:, None]
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (m.shape[0],))[:, None]
    x, v = state.positions, state.velocities
    f = state.forces if state.forces is not None else force_fn(x, state.t)
    c = g * dt / (2 * m)
    b = 1.0 / (1.0 + c)
    a = b * (1.0 - c)
    if noise is not None and rng is not None and np.any(noise):
        sig = np.broadcast_to(np.asarray(noise, dtype=float), (m.shape[0],))[:, None] * np.sqrt(dt)
        beta = sig * rng.standard_normal(x.shape)
    else:
        beta = 0.0
    x_new = x + b * dt * v + b * dt * dt / (2 * m) * f + b * dt / (2 * m) * beta
    t_new = state.t + dt
    f_new = force_fn(x_new, t_new)
    v_new = a * v + dt / (2 * m) * (a * f + f_new) + b / m * beta
    return IonState(x_new, v_new, t_new, f_new)


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # (T, N, 3)
    velocities: np.ndarray  # (T, N, 3)

    def __post_init__(self):
        if not (len(self.times) == len(self.positions) == len(self.velocities)):
            raise ValueError("trajectory arrays have inconsistent lengths")

    @property
    def n_ions(self) -> int:
        return self.positions.shape[1]

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            w = csv.writer(f)
            w.writerow(["t", "ion", "x", "y", "z", "vx", "vy", "vz"])
            for k, t in enumerate(self.times):
                for i in range(self.n_ions):
                    w.writerow([repr(float(t)), i, *(repr(float(c)) for c in self.positions[k, i]),
                                *(repr(float(c)) for c in self.velocities[k, i])])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as f:
            lines = [ln for ln in f if not ln.startswith("#")]
        rows = np.array([[float(c) for c in r] for r in csv.reader(lines[1:]) if r])
        times = np.unique(rows[:, 0])
        n = int(rows[:, 1].max()) + 1
        data = rows[:, 2:].reshape(len(times), n, 6)
        return cls(times, data[..., :3], data[..., 3:])


def simulate(force_fn: Callable, masses, initial_positions, config: SimConfig,
             initial_velocities=None, t0: float = 0.0) -> Trajectory:
    """Integrate ``config.n_steps`` Langevin-Verlet steps and record every ``record_every``."""
    x = np.array(initial_positions, dtype=float)
    n = len(x)
    v = np.zeros_like(x) if initial_velocities is None else np.array(initial_velocities, dtype=float)
    rng = np.random.default_rng(config.rng_seed)
    gamma = config.gamma(n)
    noise = config.noise(n)
    state = IonState(x, v, t0)
    times, pos, vel = [t0], [x.copy()], [v.copy()]
    for step in range(1, config.n_steps + 1):
        state = step_verlet(state, force_fn, masses, gamma, config.dt, noise, rng)
        if not (np.all(np.isfinite(state.positions)) and np.all(np.isfinite(state.velocities))):
            raise IntegrationError(f"non-finite state at step {step}", step)
        lost = state.positions[:, 2] <= 0
        if config.bounding_box is not None:
            lost |= np.any(np.abs(state.positions) > config.bounding_box, axis=1)
        if np.any(lost):
            i = int(np.argmax(lost))
            raise IonLossError(i, state.t, state.positions[i])
        if step % config.record_every == 0:
            times.append(state.t)
            pos.append(state.positions.copy())
            vel.append(state.velocities.copy())
    return Trajectory(np.array(times), np.array(pos), np.array(vel))


@dataclass
class EquilibriumResult:
    positions: np.ndarray  # (N, 3) RF-period averaged
    residual_amplitude: float  # m, spread of per-period means over the averaging window
    trajectory: Trajectory

    @property
    def height_spread(self) -> float:
        """(max z - min z) / mean z."""
        z = self.positions[:, 2]
        return float((z.max() - z.min()) / z.mean())


def default_damping(mass: float, omega_slow: float) -> float:
    """Damping rate giving a damping ratio of 1/2 on the slowest secular mode."""
    return float(mass * omega_slow)


def run_equilibrium(layout: TrapLayout, drive: RfDrive | None, dc_voltages, ions: Sequence[Species],
                    initial_positions, config: SimConfig, average_periods: int = 20,
                    quench: bool = True) -> EquilibriumResult:
    """Damped evolution to equilibrium followed by RF-period averaging.

    With ``quench`` the noise is switched off for the final quarter of the run so
    the averaged positions are not blurred by thermal motion.
    """
    drive = drive or layout.drive
    forces = TrapForces(layout, ions, dc_voltages, drive)
    if drive is not None:
        config.check_rf_step(drive.omega_rf)
        period = 2 * np.pi / drive.omega_rf
    else:
        period = config.dt * 20
    steps_per_period = max(1, int(round(period / config.dt)))
    n_avg = average_periods * steps_per_period
    warm = config.n_steps
    if quench:
        hot = replace(config, n_steps=max(1, warm - warm // 4))
        traj = simulate(forces, forces.masses, initial_positions, hot)
        last = traj.positions[-1], traj.velocities[-1], traj.times[-1]
        cold = replace(config, n_steps=warm // 4 + n_avg, temperature=0.0, noise_amplitude=None,
                       record_every=1, rng_seed=config.rng_seed + 1)
        traj2 = simulate(forces, forces.masses, last[0], cold, last[1], last[2])
    else:
        traj2 = simulate(forces, forces.masses, initial_positions,
                         replace(config, n_steps=warm + n_avg, record_every=1))
    window = traj2.positions[-n_avg:]
    mean = window.mean(axis=0)
    per_period = window.reshape(average_periods, steps_per_period, *window.shape[1:]).mean(axis=1)
    resid = float(np.max(np.linalg.norm(per_period - mean, axis=-1)))
    return EquilibriumResult(mean, resid, traj2)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------

class AmbiguousSpectrumError(RuntimeError):
    pass


def dominant_frequency(signal, dt: float, fmin: float = 0.0, fmax: float | None = None,
                       snr: float = 10.0) -> float:
    """Frequency (Hz) of the strongest Hann-windowed DFT peak in ``[fmin, fmax]``.

    The peak is refined by a parabola through the log-magnitudes of the three
    bins around the maximum.
    """
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    n = len(x)
    spec = np.abs(np.fft.rfft(x * np.hanning(n)))
    freqs = np.fft.rfftfreq(n, dt)
    band = (freqs >= fmin) & (freqs <= (fmax if fmax is not None else freqs[-1]))
    band[0] = False
    idx = np.flatnonzero(band)
    if len(idx) < 3:
        raise AmbiguousSpectrumError("frequency band contains fewer than three bins")
    k = idx[np.argmax(spec[idx])]
    floor = np.median(spec[idx])
    if spec[k] < snr * floor:
        raise AmbiguousSpectrumError(f"no peak {snr}x above the median floor")
    if 0 < k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    else:
        shift = 0.0
    return float((k + shift) * (freqs[1] - freqs[0]))


def spectrum_from_trajectory(traj: Trajectory, ion: int, axis: int, fmin: float = 0.0,
                             fmax: float | None = None) -> float:
    """Dominant oscillation frequency (Hz) of one ion coordinate; assumes uniform sampling."""
    dt = float(np.mean(np.diff(traj.times)))
    return dominant_frequency(traj.positions[:, ion, axis], dt, fmin, fmax)


def save_equilibrium(positions, path, metadata: dict | None = None) -> None:
    payload = {"positions_m": np.asarray(positions).tolist()}
    if metadata:
        payload["meta"] = metadata
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_equilibrium(path) -> np.ndarray:
    d = json.loads(Path(path).read_text())
    return np.asarray(d["positions_m"] if isinstance(d, dict) else d, dtype=float)
