"""Ion species definitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from scipy import constants as sc

ELEMENTARY_CHARGE = sc.elementary_charge
AMU = sc.atomic_mass
COULOMB_K = 1.0 / (4.0 * sc.pi * sc.epsilon_0)


@dataclass(frozen=True)
class Species:
    mass: float  # kg
    charge_number: int = 1
    label: str = ""

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"species mass must be positive, got {self.mass}")
        if self.charge_number < 1:
            raise ValueError(f"charge number must be >= 1, got {self.charge_number}")

    @property
    def charge(self) -> float:
        return self.charge_number * ELEMENTARY_CHARGE

    @property
    def mass_amu(self) -> float:
        return self.mass / AMU

    def to_dict(self) -> dict:
        return {"label": self.label, "mass_amu": self.mass_amu, "charge": self.charge_number}

    @classmethod
    def from_dict(cls, d: dict) -> "Species":
        return cls(mass=float(d["mass_amu"]) * AMU, charge_number=int(d.get("charge", 1)),
                   label=str(d.get("label", "")))


CA40 = Species(mass=39.962590863 * AMU, charge_number=1, label="40Ca+")
BE9 = Species(mass=9.0121831 * AMU, charge_number=1, label="9Be+")

_BUILTIN = {"ca40": CA40, "40ca+": CA40, "ca": CA40, "be9": BE9, "9be+": BE9, "be": BE9}


def load_species(path_or_name) -> Species:
    """Load a species JSON file ``{label, mass_amu, charge}`` or a builtin name (``ca40``, ``be9``)."""
    key = str(path_or_name).lower()
    if key in _BUILTIN:
        return _BUILTIN[key]
    with open(path_or_name) as f:
        return Species.from_dict(json.load(f))


def save_species(sp: Species, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sp.to_dict(), indent=2) + "\n")
