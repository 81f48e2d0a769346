"""Adam optimisation of DC voltages toward target per-site secular frequencies."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .electrode_field import (NotATrapError, SearchError, TrapPotential, find_minimum, secular_frequencies,
                              trap_depth)
from .layout import ConfigError, Role, TrapLayout
from .species import Species

logger = logging.getLogger(__name__)

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
DEFAULT_BOUNDS = {Role.DC_CENTRAL: (0.0, 6.0), Role.DC_SIDE: (-15.0, 15.0), Role.DC_EDGE: (-15.0, 15.0)}


class InfeasibleVoltageError(RuntimeError):
    def __init__(self, msg, site=None):
        super().__init__(msg)
        self.site = site


class FrequencyModel(Protocol):
    n_sites: int

    def site_frequencies(self, v: np.ndarray) -> np.ndarray:
        """(n_sites, 3) angular secular frequencies, lab ordered."""


@dataclass(frozen=True)
class TargetSpectrum:
    omega: np.ndarray  # rad/s per site
    axis: str | Sequence[str] = "z"
    weights: np.ndarray | None = None

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        if np.any(om <= 0):
            raise ConfigError("target frequencies must be positive")
        w = np.ones_like(om) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != om.shape or np.any(w < 0):
            raise ConfigError("weights must be non-negative and match the targets")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "weights", w)

    def axis_indices(self) -> np.ndarray:
        ax = [self.axis] * len(self.omega) if isinstance(self.axis, str) else list(self.axis)
        return np.array([AXIS_INDEX[a] for a in ax])

    def select(self, freqs: np.ndarray) -> np.ndarray:
        return freqs[np.arange(len(self.omega)), self.axis_indices()]


# ---------------------------------------------------------------------------
# Frequency models
# ---------------------------------------------------------------------------

class LayoutModel:
    """Secular frequencies of single ions in chosen wells of a layout.

    ``free`` lists the DC indices the optimiser may move; the rest stay at
    ``base`` voltages. Minima are re-found from the last solution at every call.
    """

    def __init__(self, layout: TrapLayout, species: Species, site_guesses, free=None, base=None):
        self.layout = layout
        self.species = species
        self.guesses = [np.asarray(g, dtype=float) for g in site_guesses]
        self._last = [g.copy() for g in self.guesses]
        self.free = np.arange(layout.n_dc) if free is None else np.asarray(free, dtype=int)
        self.base = layout.dc_vector(base)
        self.n_sites = len(self.guesses)

    def full_vector(self, v) -> np.ndarray:
        out = self.base.copy()
        out[self.free] = v
        return out

    def site_frequencies(self, v) -> np.ndarray:
        field = TrapPotential(self.layout, self.species, self.full_vector(v))
        out = np.empty((self.n_sites, 3))
        for k in range(self.n_sites):
            try:
                m = find_minimum(field, self._last[k])
            except (SearchError, NotATrapError):
                try:
                    m = find_minimum(field, self.guesses[k])
                except (SearchError, NotATrapError) as exc:
                    raise InfeasibleVoltageError(f"site {k} lost its minimum: {exc}", k) from exc
            if abs(m.point[0] - self.guesses[k][0]) > 0.5 * _pitch(self.guesses):
                raise InfeasibleVoltageError(f"site {k} minimum left its well", k)
            self._last[k] = m.point
            out[k] = secular_frequencies(field, m, self.species, m.hessian).omega
        return out

    def minima(self) -> list[np.ndarray]:
        return [p.copy() for p in self._last]


def _pitch(guesses) -> float:
    xs = sorted(g[0] for g in guesses)
    return float(np.min(np.diff(xs))) if len(xs) > 1 else np.inf


class LinearSquaredModel:
    """Toy model ``omega_k^2 = a_k + sum_j B_kj v_j`` on one axis (others fixed)."""

    def __init__(self, a, b, axis: str = "z", other: float = 1.0):
        self.a = np.asarray(a, dtype=float)
        self.b = np.atleast_2d(np.asarray(b, dtype=float))
        self.axis = AXIS_INDEX[axis]
        self.other = other
        self.n_sites = len(self.a)

    def site_frequencies(self, v) -> np.ndarray:
        w2 = self.a + self.b @ np.asarray(v, dtype=float)
        if np.any(w2 <= 0):
            raise InfeasibleVoltageError("toy well vanished", int(np.argmin(w2)))
        out = np.full((self.n_sites, 3), self.other)
        out[:, self.axis] = np.sqrt(w2)
        return out

    def optimum(self, target_omega) -> np.ndarray:
        """Exact least-squares voltages (unconstrained)."""
        rhs = np.asarray(target_omega, dtype=float) ** 2 - self.a
        return np.linalg.lstsq(self.b, rhs, rcond=None)[0]


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

def loss(v, targets: TargetSpectrum, model: FrequencyModel) -> float:
    freqs = targets.select(model.site_frequencies(np.asarray(v, dtype=float)))
    return float(np.sum(targets.weights * (freqs - targets.omega) ** 2))


def gradient(v, targets: TargetSpectrum, model: FrequencyModel, step: float = 1e-3,
             lower=None, upper=None) -> np.ndarray:
    """Central differences with ``step`` volts; falls back to one-sided probes when infeasible."""
    v = np.asarray(v, dtype=float)
    g = np.zeros_like(v)
    f0 = None
    for j in range(len(v)):
        e = np.zeros_like(v)
        e[j] = step
        try:
            g[j] = (loss(v + e, targets, model) - loss(v - e, targets, model)) / (2 * step)
            continue
        except InfeasibleVoltageError:
            logger.warning("probe on electrode %d infeasible, using a one-sided difference", j)
        if f0 is None:
            f0 = loss(v, targets, model)
        try:
            g[j] = (loss(v + e, targets, model) - f0) / step
        except InfeasibleVoltageError:
            g[j] = (f0 - loss(v - e, targets, model)) / step
    return g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, grad, voltages, lower=None, upper=None) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update followed by clamping to ``[lower, upper]``."""
    g = np.asarray(grad, dtype=float)
    if g.shape != state.m.shape:
        raise ValueError("gradient and Adam moments have different lengths")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = np.asarray(voltages, dtype=float) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if lower is not None or upper is not None:
        new = np.clip(new, -np.inf if lower is None else lower, np.inf if upper is None else upper)
    return replace(state, m=m, v=v, t=t), new


@dataclass
class OptimizeConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int = 500
    tol_hz: float = 10.0
    fd_step: float = 1e-3
    stall_window: int = 50
    stall_rtol: float = 1e-12
    plateau_patience: int | None = None  # halve lr after this many non-improving steps
    min_lr: float = 1e-7
    min_depth_mev: float = 50.0
    depth_penalty: float = 0.0


@dataclass
class OptimizeResult:
    voltages: np.ndarray
    loss_history: list
    site_frequencies: np.ndarray  # (n_sites, 3) rad/s at the returned voltages
    converged: bool
    stalled: bool
    iterations: int
    records: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def max_error_hz(self) -> float:
        return self.flags.get("max_site_error_hz", float("nan"))


def _bounds_for(layout: TrapLayout | None, free, bounds=None):
    if layout is None:
        return None, None
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    es = [layout.dc_electrodes[i] for i in free]
    lo = np.array([bounds[e.role][0] for e in es])
    hi = np.array([bounds[e.role][1] for e in es])
    return lo, hi


def optimize(targets: TargetSpectrum, initial, model: FrequencyModel, config: OptimizeConfig | None = None,
             lower=None, upper=None, progress: Callable | None = None) -> OptimizeResult:
    """Adam descent on the weighted squared frequency error.

    Stops when every weighted site is within ``tol_hz`` of its target, on stall
    or at ``max_iter``; the best point seen is returned.
    """
    cfg = config or OptimizeConfig()
    v = np.asarray(initial, dtype=float).copy()
    if lower is not None or upper is not None:
        v = np.clip(v, -np.inf if lower is None else lower, np.inf if upper is None else upper)
    state = AdamState.zeros(len(v), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    active = targets.weights > 0
    history, records = [], []
    best = (np.inf, v.copy(), None)
    since_best = 0
    converged = stalled = False
    it = 0
    for it in range(cfg.max_iter + 1):
        freqs = model.site_frequencies(v)
        sel = targets.select(freqs)
        err = np.abs(sel - targets.omega)[active] / (2 * np.pi)
        f = float(np.sum(targets.weights * (sel - targets.omega) ** 2))
        history.append(f)
        records.append({"loss": f, "voltages": v.tolist(), "site_frequencies_hz": (freqs / (2 * np.pi)).tolist()})
        max_err = float(err.max()) if err.size else 0.0
        if progress:
            progress(it, f, max_err)
        if f < best[0]:
            best = (f, v.copy(), freqs)
            since_best = 0
        else:
            since_best += 1
        if max_err < cfg.tol_hz:
            converged = True
            break
        if len(history) > cfg.stall_window:
            old = min(history[:-cfg.stall_window])
            if old - best[0] <= cfg.stall_rtol * abs(old):
                stalled = True
                break
        if it == cfg.max_iter:
            break
        if cfg.plateau_patience and since_best >= cfg.plateau_patience and state.lr > cfg.min_lr:
            state = replace(state, lr=max(state.lr * 0.5, cfg.min_lr))
            v = best[1].copy()
            since_best = 0
        g = gradient(v, targets, model, cfg.fd_step)
        state, v = adam_step(state, g, v, lower, upper)
    f_best, v_best, freqs_best = best
    sel = targets.select(freqs_best)
    max_err = float(np.max(np.abs(sel - targets.omega)[active]) / (2 * np.pi)) if np.any(active) else 0.0
    flags = {"converged": converged, "stalled": stalled, "max_iter_reached": not (converged or stalled),
             "max_site_error_hz": max_err}
    if lower is not None or upper is not None:
        lo = -np.inf if lower is None else lower
        hi = np.inf if upper is None else upper
        flags["within_bounds"] = bool(np.all((v_best >= lo) & (v_best <= hi)))
    return OptimizeResult(v_best, history, freqs_best, converged, stalled, it, records, flags)


def linear_start(targets: TargetSpectrum, model: FrequencyModel, v0, step: float = 0.1,
                 lower=None, upper=None) -> np.ndarray:
    """Starting voltages from one linearised bounded least-squares solve around ``v0``.

    A programmatic stand-in for a hand-tuned starting point.
    """
    v0 = np.asarray(v0, dtype=float)
    f0 = targets.select(model.site_frequencies(v0))
    jac = np.empty((len(f0), len(v0)))
    for j in range(len(v0)):
        e = np.zeros_like(v0)
        e[j] = step
        jac[:, j] = (targets.select(model.site_frequencies(v0 + e)) - f0) / step
    w = np.sqrt(targets.weights)
    lo = (-np.inf if lower is None else lower) - v0
    hi = (np.inf if upper is None else upper) - v0
    lo = np.broadcast_to(lo, v0.shape)
    hi = np.broadcast_to(hi, v0.shape)
    res = lsq_linear(w[:, None] * jac, w * (targets.omega - f0), bounds=(lo, hi))
    model.site_frequencies(v0)  # restore warm start near v0
    return v0 + res.x


def depth_check(layout: TrapLayout, species: Species, voltages, minima, min_depth_mev: float = 50.0):
    """Post-hoc trap-depth validity per site: list of (depth_meV, ok)."""
    field = TrapPotential(layout, species, voltages)
    out = []
    for k, p in enumerate(minima):
        nb = minima[k + 1] if k + 1 < len(minima) else (minima[k - 1] if k > 0 else None)
        try:
            d = trap_depth(field, find_minimum(field, p), neighbor=nb).depth_mev
        except (SearchError, NotATrapError):
            d = float("nan")
        out.append((float(d), bool(d >= min_depth_mev)))
    return out


# ---------------------------------------------------------------------------
# Crosstalk
# ---------------------------------------------------------------------------

@dataclass
class SensitivityTable:
    electrode_ids: list
    percent: np.ndarray  # (n_electrodes, n_sites, 3), NaN where infeasible
    baseline_hz: np.ndarray  # (n_sites, 3)
    probe_voltage: float

    def to_rows(self):
        for e, eid in enumerate(self.electrode_ids):
            for s in range(self.percent.shape[1]):
                yield (eid, s, *self.percent[e, s])


def sensitivity_report(layout: TrapLayout, species: Species, site_guesses, probe_voltage: float = 6.0,
                       electrodes=None, base=None) -> SensitivityTable:
    """Percent change of each site's (wx, wy, wz) when one electrode moves from base to ``probe_voltage``."""
    base_v = layout.dc_vector(base)
    model = LayoutModel(layout, species, site_guesses, base=base_v)
    f0 = model.site_frequencies(base_v)
    idx = range(layout.n_dc) if electrodes is None else electrodes
    ids, rows = [], []
    for e in idx:
        v = base_v.copy()
        v[e] = probe_voltage
        probe = LayoutModel(layout, species, model.minima(), base=base_v)
        try:
            f = probe.site_frequencies(v)
            rows.append(100 * (f - f0) / f0)
        except InfeasibleVoltageError:
            rows.append(np.full_like(f0, np.nan))
        ids.append(layout.dc_ids[e])
    return SensitivityTable(ids, np.array(rows), f0 / (2 * np.pi), probe_voltage)


def save_run(result: OptimizeResult, path, electrode_ids=None, metadata: dict | None = None) -> None:
    final = {"voltages": result.voltages.tolist(), "loss": result.loss_history and min(result.loss_history),
             "site_frequencies_hz": (result.site_frequencies / (2 * np.pi)).tolist()}
    if electrode_ids is not None:
        final["voltages_by_id"] = dict(zip(electrode_ids, result.voltages.tolist()))
    d = {"iterations": result.records, "final": final, "flags": result.flags}
    if metadata:
        d["meta"] = metadata
    Path(path).write_text(json.dumps(d, indent=1) + "\n")
