"""Trap layouts: rectangular surface electrodes, their roles and the RF drive."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Malformed or inconsistent trap/run configuration."""


class Role(str, enum.Enum):
    RF_PLUS = "RF_PLUS"
    RF_MINUS = "RF_MINUS"
    DC_CENTRAL = "DC_CENTRAL"
    DC_SIDE = "DC_SIDE"
    DC_EDGE = "DC_EDGE"
    GROUND = "GROUND"

    @property
    def is_rf(self) -> bool:
        return self in (Role.RF_PLUS, Role.RF_MINUS)

    @property
    def is_dc(self) -> bool:
        return self in (Role.DC_CENTRAL, Role.DC_SIDE, Role.DC_EDGE)


@dataclass(frozen=True)
class Electrode:
    """Axis-aligned rectangle in the z = 0 plane, corners in metres."""

    corner_a: tuple[float, float]
    corner_b: tuple[float, float]
    role: Role
    id: str

    def __post_init__(self):
        (xa, ya), (xb, yb) = self.corner_a, self.corner_b
        if xa == xb or ya == yb:
            raise ConfigError(f"electrode {self.id!r} is degenerate: {self.corner_a}, {self.corner_b}")
        # normalise so corner_a is the lower-left vertex
        object.__setattr__(self, "corner_a", (float(min(xa, xb)), float(min(ya, yb))))
        object.__setattr__(self, "corner_b", (float(max(xa, xb)), float(max(ya, yb))))
        object.__setattr__(self, "role", Role(self.role))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.corner_a) + np.asarray(self.corner_b))

    def overlaps(self, other: "Electrode") -> bool:
        (xa, ya), (xb, yb) = self.corner_a, self.corner_b
        (ua, va), (ub, vb) = other.corner_a, other.corner_b
        return min(xb, ub) > max(xa, ua) and min(yb, vb) > max(ya, va)


@dataclass(frozen=True)
class RfDrive:
    v_rf: float  # volts, 0-to-peak
    omega_rf: float  # rad/s
    phase_map: dict = field(default_factory=lambda: {Role.RF_PLUS: 0.0, Role.RF_MINUS: np.pi})

    def __post_init__(self):
        if not self.v_rf > 0:
            raise ConfigError(f"v_rf must be positive, got {self.v_rf}")
        if not self.omega_rf > 0:
            raise ConfigError(f"omega_rf must be positive, got {self.omega_rf}")

    def amplitude(self, role: Role) -> float:
        """Signed RF amplitude applied to an electrode of ``role`` (0 for non-RF roles)."""
        if role not in self.phase_map:
            return 0.0
        return self.v_rf * float(np.cos(self.phase_map[role]))

    def scaled(self, c: float) -> "RfDrive":
        return RfDrive(self.v_rf * c, self.omega_rf * c, dict(self.phase_map))


@dataclass
class TrapLayout:
    electrodes: list[Electrode]
    drive: RfDrive | None = None
    name: str = ""

    def __post_init__(self):
        ids = [e.id for e in self.electrodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("electrode ids must be unique")
        for i, a in enumerate(self.electrodes):
            for b in self.electrodes[i + 1:]:
                if a.overlaps(b):
                    raise ConfigError(f"electrodes {a.id!r} and {b.id!r} overlap")
        self._arrays = None

    @property
    def dc_electrodes(self) -> list[Electrode]:
        return [e for e in self.electrodes if e.role.is_dc]

    @property
    def rf_electrodes(self) -> list[Electrode]:
        return [e for e in self.electrodes if e.role.is_rf]

    @property
    def dc_ids(self) -> list[str]:
        return [e.id for e in self.dc_electrodes]

    @property
    def n_dc(self) -> int:
        return len(self.dc_electrodes)

    def corners(self, electrodes=None) -> np.ndarray:
        """(n, 4) array of ``xa, ya, xb, yb``."""
        electrodes = self.electrodes if electrodes is None else electrodes
        if not electrodes:
            return np.zeros((0, 4))
        return np.array([[*e.corner_a, *e.corner_b] for e in electrodes])

    def rf_amplitudes(self, drive: RfDrive | None = None) -> np.ndarray:
        drive = drive or self.drive
        if drive is None:
            raise ConfigError("layout has no RF drive")
        return np.array([drive.amplitude(e.role) for e in self.rf_electrodes])

    def dc_vector(self, voltages) -> np.ndarray:
        """Normalise a voltage mapping/sequence to an array ordered like :attr:`dc_ids`."""
        if voltages is None:
            return np.zeros(self.n_dc)
        if isinstance(voltages, dict):
            unknown = set(voltages) - set(self.dc_ids)
            if unknown:
                raise ConfigError(f"unknown DC electrode ids: {sorted(unknown)}")
            return np.array([float(voltages.get(i, 0.0)) for i in self.dc_ids])
        v = np.asarray(voltages, dtype=float)
        if v.shape != (self.n_dc,):
            raise ConfigError(f"expected {self.n_dc} DC voltages, got shape {v.shape}")
        return v

    def dc_index(self, role: Role | None = None) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.dc_electrodes) if role is None or e.role == role],
                        dtype=int)

    def mirror_x(self) -> "TrapLayout":
        es = [Electrode((-e.corner_b[0], e.corner_a[1]), (-e.corner_a[0], e.corner_b[1]), e.role, e.id)
              for e in self.electrodes]
        return TrapLayout(es, self.drive, self.name)

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "units": {"length": "m", "voltage": "V", "frequency": "Hz"},
            "electrodes": [
                {"id": e.id, "role": e.role.value, "xa": e.corner_a[0], "ya": e.corner_a[1],
                 "xb": e.corner_b[0], "yb": e.corner_b[1]}
                for e in self.electrodes
            ],
        }
        if self.drive is not None:
            d["drive"] = {"v_rf": self.drive.v_rf, "omega_rf_hz": self.drive.omega_rf / (2 * np.pi)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrapLayout":
        try:
            es = [Electrode((float(e["xa"]), float(e["ya"])), (float(e["xb"]), float(e["yb"])),
                            Role(e["role"]), str(e["id"])) for e in d.get("electrodes", [])]
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad electrode entry: {exc}") from exc
        drive = None
        if d.get("drive"):
            drive = RfDrive(float(d["drive"]["v_rf"]), 2 * np.pi * float(d["drive"]["omega_rf_hz"]))
        return cls(es, drive, d.get("name", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrapLayout":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Example twelve-well layout
# ---------------------------------------------------------------------------

EXAMPLE_PITCH = 28e-6


def example_layout(n_wells: int = 12, pitch: float = EXAMPLE_PITCH, dc_half: float = 3.0e-6,
                   notch_half: float = 8.4e-6, rf_half_width: float = 23.5e-6, gap: float = 2e-6,
                   side_depth: float = 60e-6, edge_length: float = 100e-6, rail_margin: float = 56e-6,
                   v_rf: float = 80.0, omega_rf: float = 2 * np.pi * 110e6) -> TrapLayout:
    """Best-effort reconstruction of a twelve-notch RF+ rail.

    Each well is a square notch in a single RF+ rail holding a square RF- ring
    around a central DC square. Side DC pads run along both rail edges and two
    DC end pads close the array. Wells sit at ``x_k = (k - (n_wells-1)/2) * pitch``.
    """
    es: list[Electrode] = []
    xs = (np.arange(n_wells) - (n_wells - 1) / 2) * pitch
    hole = notch_half + gap  # half-size of the opening cut into the RF+ rail
    ring_in = dc_half + gap
    x_lo, x_hi = xs[0] - pitch / 2 - rail_margin, xs[-1] + pitch / 2 + rail_margin
    for k, xc in enumerate(xs):
        es.append(Electrode((xc - dc_half, -dc_half), (xc + dc_half, dc_half), Role.DC_CENTRAL, f"dc{k}"))
        # RF- ring as four rectangles
        es.append(Electrode((xc - notch_half, ring_in), (xc + notch_half, notch_half), Role.RF_MINUS, f"rfm{k}_n"))
        es.append(Electrode((xc - notch_half, -notch_half), (xc + notch_half, -ring_in), Role.RF_MINUS, f"rfm{k}_s"))
        es.append(Electrode((xc - notch_half, -ring_in), (xc - ring_in, ring_in), Role.RF_MINUS, f"rfm{k}_w"))
        es.append(Electrode((xc + ring_in, -ring_in), (xc + notch_half, ring_in), Role.RF_MINUS, f"rfm{k}_e"))
    # RF+ rail with notches
    es.append(Electrode((x_lo, hole), (x_hi, rf_half_width), Role.RF_PLUS, "rfp_n"))
    es.append(Electrode((x_lo, -rf_half_width), (x_hi, -hole), Role.RF_PLUS, "rfp_s"))
    bounds = [x_lo] + [v for xc in xs for v in (xc - hole, xc + hole)] + [x_hi]
    for k in range(0, len(bounds), 2):
        lo, hi = bounds[k], bounds[k + 1]
        if hi - lo > 0:
            es.append(Electrode((lo, -hole), (hi, hole), Role.RF_PLUS, f"rfp_b{k // 2}"))
    # side DC pads, one per well on each side
    y0 = rf_half_width + gap
    for k, xc in enumerate(xs):
        lo, hi = xc - pitch / 2 + gap / 2, xc + pitch / 2 - gap / 2
        if k == 0:
            lo = x_lo
        if k == n_wells - 1:
            hi = x_hi
        es.append(Electrode((lo, y0), (hi, y0 + side_depth), Role.DC_SIDE, f"side_n{k}"))
        es.append(Electrode((lo, -y0 - side_depth), (hi, -y0), Role.DC_SIDE, f"side_s{k}"))
    # end pads
    ye = rf_half_width + gap + side_depth
    es.append(Electrode((x_lo - gap - edge_length, -ye), (x_lo - gap, ye), Role.DC_EDGE, "edge_w"))
    es.append(Electrode((x_hi + gap, -ye), (x_hi + gap + edge_length, ye), Role.DC_EDGE, "edge_e"))
    return TrapLayout(es, RfDrive(v_rf, omega_rf), name=f"example-{n_wells}-well")


def well_centers(n_wells: int = 12, pitch: float = EXAMPLE_PITCH) -> np.ndarray:
    return (np.arange(n_wells) - (n_wells - 1) / 2) * pitch
